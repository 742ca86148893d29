use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use noisycrf::data::{NoiseSpec, SyntheticConfig};
use noisycrf::trainer::{TrainConfig, Variant};
use noisycrf::{AlphaSchedule, AuxRbmConfig};
use serde::{Deserialize, Serialize};

use crate::{fail, Failure};

/// One JSON document drives every subcommand. Sections a command does not
/// need are ignored by it; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to every section that has a seed (data, aux model, training).
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Defaults to `<out>/dataset.bin`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Defaults to `<out>/aux.bin`.
    #[serde(default)]
    pub aux_model: Option<PathBuf>,
    /// Defaults to `<out>/checkpoint.bin`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Import of CIFAR-10 binary batches; an alternative to `synthetic`.
    #[serde(default)]
    pub cifar: Option<CifarImport>,
    #[serde(default)]
    pub aux: AuxSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub monitor: Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarImport {
    pub train_files: Vec<PathBuf>,
    #[serde(default)]
    pub test_files: Vec<PathBuf>,
    /// Side of the square average-pooling window; divides 32.
    #[serde(default = "default_pool")]
    pub pool: usize,
    pub noise: NoiseSpec,
    pub clean_fraction: f64,
    #[serde(default)]
    pub val_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxSpec {
    Rbm(AuxRbmConfig),
    /// `t` is the clean-to-noisy transition matrix. When absent it is read
    /// from the dataset's noise record if that describes a multiclass noise
    /// process, and estimated from `D_C` otherwise.
    Transition {
        #[serde(default)]
        t: Option<Vec<Vec<f64>>>,
    },
}

impl Default for AuxSpec {
    fn default() -> Self {
        AuxSpec::Rbm(AuxRbmConfig::default())
    }
}

/// Extra columns of the per-epoch metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Monitor {
    /// Validation accuracy (multiclass) or mAP (multilabel).
    pub validation: bool,
    /// Recovery accuracy or mAP of `q` on `D_N`.
    pub recovery: bool,
}

impl Default for Monitor {
    fn default() -> Self {
        Self {
            validation: true,
            recovery: true,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub alpha_start: Option<f64>,
    pub alpha_end: Option<f64>,
    pub alpha_epochs: Option<usize>,
}

/// Resolved file locations of one run.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub aux: PathBuf,
    pub checkpoint: PathBuf,
}

impl Paths {
    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }

    pub fn cleaned(&self) -> PathBuf {
        self.out.join("cleaned.json")
    }

    pub fn changes(&self) -> PathBuf {
        self.out.join("changes.csv")
    }

    pub fn cleaned_dataset(&self) -> PathBuf {
        self.out.join("cleaned_dataset.bin")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .context(Failure::Config)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .context(Failure::Config)
    }

    /// Applies command-line overrides and spreads the run seed into every
    /// section, then validates the training section.
    pub fn resolve(mut self, o: &Overrides) -> Result<(Self, Paths)> {
        if let Some(seed) = o.seed.or(self.seed) {
            self.seed = Some(seed);
            if let Some(s) = self.synthetic.as_mut() {
                s.seed = seed;
            }
            if let Some(c) = self.cifar.as_mut() {
                c.seed = seed;
            }
            if let AuxSpec::Rbm(c) = &mut self.aux {
                c.seed = seed;
            }
            self.train = self.train.clone().with_seed(seed);
        }
        if let Some(v) = &o.variant {
            self.train.variant = Variant::parse(v).context(Failure::Config)?;
        }
        let a = &mut self.train.alpha_schedule;
        if o.alpha_start.is_some() || o.alpha_end.is_some() || o.alpha_epochs.is_some() {
            *a = AlphaSchedule::new(
                o.alpha_start.unwrap_or(a.start),
                o.alpha_end.unwrap_or(a.end),
                o.alpha_epochs.unwrap_or(a.anneal_epochs),
                a.shape,
            )
            .context(Failure::Config)?;
        }
        self.train.validate().context("training section").context(Failure::Config)?;
        if let Some(s) = &self.synthetic {
            s.validate().context("synthetic section").context(Failure::Config)?;
        }
        if let Some(c) = &self.cifar {
            if self.synthetic.is_some() {
                return Err(fail(Failure::Config, "set either \"synthetic\" or \"cifar\", not both"));
            }
            c.noise.validate(10).context("cifar section").context(Failure::Config)?;
        }

        let Some(out) = o.out.clone().or_else(|| self.out.clone()) else {
            return Err(fail(Failure::Config, "no output directory: pass --out or set \"out\""));
        };
        self.out = Some(out.clone());
        let paths = Paths {
            dataset: self.dataset.clone().unwrap_or_else(|| out.join("dataset.bin")),
            aux: self.aux_model.clone().unwrap_or_else(|| out.join("aux.bin")),
            checkpoint: self.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin")),
            out,
        };
        Ok((self, paths))
    }
}
