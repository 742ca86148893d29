//! Labeled datasets, synthetic generators, label-noise injection, the dataset
//! container format and CIFAR-10 binary import.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bitvec::prelude::*;
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::auxiliary::check_row_stochastic;
use crate::container::{self, header_field, ByteReader, ByteWriter};
use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// `D_N`: only noisy labels are visible to training.
    NoisyTrain,
    /// `D_C`: both noisy and clean labels are visible.
    CleanTrain,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::NoisyTrain, Split::CleanTrain, Split::Val, Split::Test];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Split::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown split tag {c}")))
    }
}

/// Features, noisy labels, optional clean labels and split tags per instance.
/// Instance ids are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    mode: LabelMode,
    features: Array2<f32>,
    noisy: Vec<LabelVector>,
    clean: Vec<Option<LabelVector>>,
    splits: Vec<Split>,
    provenance: Value,
}

impl LabeledDataset {
    pub fn new(
        mode: LabelMode,
        features: Array2<f32>,
        noisy: Vec<LabelVector>,
        clean: Vec<Option<LabelVector>>,
        splits: Vec<Split>,
        provenance: Value,
    ) -> Result<Self> {
        let rows = features.nrows();
        if rows == 0 {
            return Err(Error::EmptyDataset("dataset has no rows"));
        }
        check_len("noisy label rows", rows, noisy.len())?;
        check_len("clean label rows", rows, clean.len())?;
        check_len("split tags", rows, splits.len())?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let n = noisy[0].len();
        let mut c = None;
        for (i, y) in noisy.iter().enumerate() {
            check_len("noisy label length", n, y.len())?;
            if y.mode() != mode {
                return Err(Error::InvalidArgument(format!("row {i}: noisy label mode mismatch")));
            }
        }
        for (i, yc) in clean.iter().enumerate() {
            match yc {
                Some(v) => {
                    let want = *c.get_or_insert(v.len());
                    check_len("clean label length", want, v.len())?;
                    if v.mode() != mode {
                        return Err(Error::InvalidArgument(format!(
                            "row {i}: clean label mode mismatch"
                        )));
                    }
                }
                None if splits[i] == Split::CleanTrain => {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} is in the clean training split but has no clean label"
                    )));
                }
                None => {}
            }
        }
        if mode == LabelMode::Multiclass && c.is_some_and(|c| c != n) {
            return Err(Error::InvalidArgument(
                "multiclass datasets need equal noisy and clean class counts".into(),
            ));
        }
        Ok(Self {
            mode,
            features,
            noisy,
            clean,
            splits,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn noisy_dim(&self) -> usize {
        self.noisy[0].len()
    }

    /// Clean label width; falls back to the noisy width in multiclass mode
    /// when no clean labels are stored.
    pub fn clean_dim(&self) -> usize {
        self.clean
            .iter()
            .flatten()
            .map(|v| v.len())
            .next()
            .unwrap_or(match self.mode {
                LabelMode::Multiclass => self.noisy_dim(),
                LabelMode::Multilabel => 0,
            })
    }

    pub fn provenance(&self) -> &Value {
        &self.provenance
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn feature_row(&self, id: usize) -> Vec<f64> {
        self.features.row(id).iter().map(|&v| v as f64).collect()
    }

    pub fn noisy_label(&self, id: usize) -> &LabelVector {
        &self.noisy[id]
    }

    pub fn split(&self, id: usize) -> Split {
        self.splits[id]
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut m: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in &self.splits {
            *m.get_mut(s).unwrap() += 1;
        }
        m
    }

    /// Ground-truth clean labels of one split, for evaluation only. For
    /// `NoisyTrain` these are the labels hidden from training.
    pub fn evaluation_labels(&self, split: Split) -> Result<Vec<(usize, &LabelVector)>> {
        self.ids(split)
            .into_iter()
            .map(|i| {
                self.clean[i]
                    .as_ref()
                    .map(|c| (i, c))
                    .ok_or_else(|| Error::InvalidArgument(format!("row {i} has no clean label")))
            })
            .collect()
    }

    /// What training may see: features and noisy labels of both training
    /// splits, and clean labels of `D_C` only.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            ds: self,
            noisy_ids: self.ids(Split::NoisyTrain),
            clean_ids: self.ids(Split::CleanTrain),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, payload) = self.encode()?;
        container::write_file(path, "dataset", header, &payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, payload) = self.encode()?;
        Ok(container::encode("dataset", header, &payload))
    }

    fn encode(&self) -> Result<(Map<String, Value>, Vec<u8>)> {
        let mut header = Map::new();
        let counts: BTreeMap<String, usize> = self
            .counts()
            .into_iter()
            .map(|(s, n)| (serde_json::to_value(s).unwrap().as_str().unwrap().to_owned(), n))
            .collect();
        header.insert("mode".into(), serde_json::to_value(self.mode)?);
        header.insert("rows".into(), Value::from(self.len()));
        header.insert("input_dim".into(), Value::from(self.input_dim()));
        header.insert("noisy_dim".into(), Value::from(self.noisy_dim()));
        header.insert("clean_dim".into(), Value::from(self.clean_dim()));
        header.insert("counts".into(), serde_json::to_value(counts)?);
        header.insert("noise".into(), self.provenance.clone());

        let mut w = ByteWriter::new();
        let mut feat = Vec::with_capacity(self.features.len() * 4);
        for v in self.features.iter() {
            feat.extend_from_slice(&v.to_le_bytes());
        }
        w.bytes(&feat);
        let mut bits: BitVec<u8, Lsb0> = BitVec::new();
        for y in &self.noisy {
            bits.extend(y.bits().iter().map(|&b| b == 1));
        }
        let cdim = self.clean_dim();
        for c in &self.clean {
            bits.push(c.is_some());
            match c {
                Some(v) => bits.extend(v.bits().iter().map(|&b| b == 1)),
                None => bits.extend(std::iter::repeat_n(false, cdim)),
            }
        }
        w.bytes(bits.as_raw_slice());
        w.bytes(&self.splits.iter().map(|s| s.code()).collect::<Vec<_>>());
        Ok((header, w.into_inner()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode(bytes, "dataset")?;
        let mode: LabelMode = header_field(&header, "mode")?;
        let rows: usize = header_field(&header, "rows")?;
        let d: usize = header_field(&header, "input_dim")?;
        let n: usize = header_field(&header, "noisy_dim")?;
        let cdim: usize = header_field(&header, "clean_dim")?;
        let provenance = header.get("noise").cloned().unwrap_or(Value::Null);
        let mut r = ByteReader::new(&payload);
        let feat: Vec<f32> = r
            .take(rows * d * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features = Array2::from_shape_vec((rows, d), feat).map_err(|e| Error::Format(e.to_string()))?;
        let nbits = rows * n + rows * (1 + cdim);
        let raw = r.take(nbits.div_ceil(8))?;
        let bits = BitSlice::<u8, Lsb0>::from_slice(raw);
        let take = |start: usize, len: usize| -> Vec<u8> {
            bits[start..start + len].iter().map(|b| u8::from(*b)).collect()
        };
        let mut noisy = Vec::with_capacity(rows);
        for i in 0..rows {
            noisy.push(LabelVector::new(take(i * n, n), mode)?);
        }
        let mut clean = Vec::with_capacity(rows);
        let base = rows * n;
        for i in 0..rows {
            let at = base + i * (1 + cdim);
            clean.push(if bits[at] {
                Some(LabelVector::new(take(at + 1, cdim), mode)?)
            } else {
                None
            });
        }
        let splits = r
            .take(rows)?
            .iter()
            .map(|&c| Split::from_code(c))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let ds = Self::new(mode, features, noisy, clean, splits, provenance)?;
        let counts: BTreeMap<Split, usize> = header_field(&header, "counts")?;
        if counts != ds.counts() {
            return Err(Error::Format("split counts disagree with header".into()));
        }
        Ok(ds)
    }
}

/// The trainer's window onto a dataset. Clean labels of `D_N` are not
/// reachable through it.
#[derive(Debug, Clone)]
pub struct TrainingView<'a> {
    ds: &'a LabeledDataset,
    noisy_ids: Vec<usize>,
    clean_ids: Vec<usize>,
}

impl<'a> TrainingView<'a> {
    /// A view restricted to the given subsets of `D_N` and `D_C`.
    pub fn restricted(ds: &'a LabeledDataset, noisy_ids: Vec<usize>, clean_ids: Vec<usize>) -> Result<Self> {
        for &i in &noisy_ids {
            if i >= ds.len() || !matches!(ds.split(i), Split::NoisyTrain | Split::CleanTrain) {
                return Err(Error::InvalidArgument(format!("row {i} is not a training row")));
            }
        }
        for &i in &clean_ids {
            if i >= ds.len() || ds.split(i) != Split::CleanTrain {
                return Err(Error::InvalidArgument(format!("row {i} is not in the clean split")));
            }
        }
        Ok(Self {
            ds,
            noisy_ids,
            clean_ids,
        })
    }

    pub fn mode(&self) -> LabelMode {
        self.ds.mode
    }

    pub fn input_dim(&self) -> usize {
        self.ds.input_dim()
    }

    pub fn noisy_dim(&self) -> usize {
        self.ds.noisy_dim()
    }

    pub fn clean_dim(&self) -> usize {
        self.ds.clean_dim()
    }

    pub fn noisy_ids(&self) -> &[usize] {
        &self.noisy_ids
    }

    pub fn clean_ids(&self) -> &[usize] {
        &self.clean_ids
    }

    pub fn features(&self, id: usize) -> Vec<f64> {
        self.ds.feature_row(id)
    }

    pub fn noisy(&self, id: usize) -> &LabelVector {
        &self.ds.noisy[id]
    }

    /// Clean label of a `D_C` row; `None` for any other row.
    pub fn clean(&self, id: usize) -> Option<&LabelVector> {
        if self.ds.splits.get(id) == Some(&Split::CleanTrain) {
            self.ds.clean[id].as_ref()
        } else {
            None
        }
    }

    /// `(y, ŷ)` pairs of `D_C`, the training set of the auxiliary model.
    pub fn clean_pairs(&self) -> Vec<(LabelVector, LabelVector)> {
        self.clean_ids
            .iter()
            .filter_map(|&i| self.clean(i).map(|c| (self.noisy(i).clone(), c.clone())))
            .collect()
    }

    /// Empirical clean-class frequencies on `D_C` (multiclass), `None` when
    /// `D_C` is empty.
    pub fn clean_class_prior(&self) -> Option<Vec<f64>> {
        if self.clean_ids.is_empty() || self.mode() != LabelMode::Multiclass {
            return None;
        }
        let mut counts = vec![0.0; self.clean_dim()];
        for &i in &self.clean_ids {
            if let Some(k) = self.clean(i).and_then(|c| c.class()) {
                counts[k] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        Some(counts.into_iter().map(|c| c / total).collect())
    }
}

fn default_background() -> f64 {
    0.05
}

fn default_min_tags() -> usize {
    1
}

fn default_max_tags() -> usize {
    3
}

/// How noisy labels are produced from clean ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Reassigns to a uniformly chosen other class with probability `rate`.
    Uniform { rate: f64 },
    /// Flips to the class's partner with probability `rate`. `partners[k]` is
    /// `None` for classes that are never flipped; [`default_partners`] is
    /// used when absent.
    PairFlip {
        rate: f64,
        #[serde(default)]
        partners: Option<Vec<Option<usize>>>,
    },
    /// Samples the noisy class from row `t[clean]`.
    TransitionMatrix { t: Vec<Vec<f64>> },
    /// Each present clean label emits between `min_tags` and `max_tags`
    /// synonym tags from its pool of `tags / classes` tags, unless it is
    /// dropped (probability `rate`); every tag additionally fires with
    /// probability `background`.
    MultilabelTagger {
        rate: f64,
        tags: usize,
        #[serde(default = "default_background")]
        background: f64,
        #[serde(default = "default_min_tags")]
        min_tags: usize,
        #[serde(default = "default_max_tags")]
        max_tags: usize,
    },
}

/// Default pair-flip partners. Ten classes use the CIFAR-10 flips
/// `cat→dog`, `automobile→truck`, `horse→deer`, `bird→airplane`; two classes
/// swap; any other count flips `k → k+1 (mod C)`.
pub fn default_partners(classes: usize) -> Vec<Option<usize>> {
    match classes {
        10 => {
            let mut p = vec![None; 10];
            p[3] = Some(5);
            p[1] = Some(9);
            p[7] = Some(4);
            p[2] = Some(0);
            p
        }
        2 => vec![Some(1), Some(0)],
        c => (0..c).map(|k| Some((k + 1) % c)).collect(),
    }
}

/// The flips of the cited CIFAR-10 benchmark convention:
/// `truck→automobile`, `bird→airplane`, `deer→horse`, `cat↔dog`.
pub fn mutual_cifar_partners() -> Vec<Option<usize>> {
    let mut p = vec![None; 10];
    p[9] = Some(1);
    p[2] = Some(0);
    p[4] = Some(7);
    p[3] = Some(5);
    p[5] = Some(3);
    p
}

fn check_rate(rate: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("{what} must lie in [0, 1], got {rate}")));
    }
    Ok(())
}

impl NoiseSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            NoiseSpec::Uniform { rate } => check_rate(*rate, "noise rate"),
            NoiseSpec::PairFlip { rate, partners } => {
                check_rate(*rate, "noise rate")?;
                if let Some(p) = partners {
                    check_len("pair-flip partners", classes, p.len())?;
                    if p.iter().flatten().any(|&k| k >= classes) {
                        return Err(Error::InvalidArgument("pair-flip partner out of range".into()));
                    }
                }
                Ok(())
            }
            NoiseSpec::TransitionMatrix { .. } => {
                check_len("transition matrix rows", classes, self.transition(classes)?.nrows())
            }
            NoiseSpec::MultilabelTagger {
                rate,
                tags,
                background,
                min_tags,
                max_tags,
            } => {
                check_rate(*rate, "tag drop rate")?;
                check_rate(*background, "background tag rate")?;
                if *tags < classes || classes == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "tagger needs at least one tag per class ({tags} tags, {classes} classes)"
                    )));
                }
                if *min_tags == 0 || min_tags > max_tags {
                    return Err(Error::InvalidArgument("need 1 <= min_tags <= max_tags".into()));
                }
                Ok(())
            }
        }
    }

    pub fn mode(&self) -> LabelMode {
        match self {
            NoiseSpec::MultilabelTagger { .. } => LabelMode::Multilabel,
            _ => LabelMode::Multiclass,
        }
    }

    /// Ground-truth transition matrix `T[i, j] = P(noisy = j | clean = i)`
    /// for the multiclass noise kinds.
    pub fn transition(&self, classes: usize) -> Result<Array2<f64>> {
        let t = match self {
            NoiseSpec::Uniform { rate } => {
                if classes < 2 {
                    Array2::eye(classes)
                } else {
                    let off = rate / (classes - 1) as f64;
                    let mut t = Array2::from_elem((classes, classes), off);
                    t.diag_mut().fill(1.0 - rate);
                    t
                }
            }
            NoiseSpec::PairFlip { rate, partners } => {
                let p = partners.clone().unwrap_or_else(|| default_partners(classes));
                check_len("pair-flip partners", classes, p.len())?;
                let mut t = Array2::eye(classes);
                for (k, partner) in p.iter().enumerate() {
                    if let Some(j) = *partner {
                        if j != k {
                            t[[k, k]] = 1.0 - rate;
                            t[[k, j]] += rate;
                        }
                    }
                }
                t
            }
            NoiseSpec::TransitionMatrix { t } => {
                let rows = t.len();
                let flat: Vec<f64> = t.iter().flatten().copied().collect();
                let m = Array2::from_shape_vec((rows, flat.len() / rows.max(1)), flat)
                    .map_err(|_| Error::NotStochastic("ragged transition matrix".into()))?;
                check_row_stochastic(&m)?;
                m
            }
            NoiseSpec::MultilabelTagger { .. } => {
                return Err(Error::InvalidArgument(
                    "the tagger has no class transition matrix".into(),
                ))
            }
        };
        Ok(t)
    }

    /// Noisy label width produced from `classes` clean labels.
    pub fn noisy_dim(&self, classes: usize) -> usize {
        match self {
            NoiseSpec::MultilabelTagger { tags, .. } => *tags,
            _ => classes,
        }
    }
}

/// Draws noisy labels for each clean label. Instance `i` uses its own random
/// stream, so results do not depend on batch composition.
pub fn inject_noise(clean: &[LabelVector], spec: &NoiseSpec, seed: u64) -> Result<Vec<LabelVector>> {
    let Some(first) = clean.first() else {
        return Ok(Vec::new());
    };
    let classes = first.len();
    spec.validate(classes)?;
    if clean.iter().any(|c| c.mode() != spec.mode() || c.len() != classes) {
        return Err(Error::InvalidArgument(format!(
            "{:?} noise needs {:?} labels of equal length",
            spec,
            spec.mode()
        )));
    }
    match spec {
        NoiseSpec::MultilabelTagger {
            rate,
            tags,
            background,
            min_tags,
            max_tags,
        } => {
            let pool = tags / classes;
            Ok(clean
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut rng = stream(seed, Domain::Noise, &[i as u64]);
                    let mut bits = vec![0u8; *tags];
                    for k in c.ones() {
                        if rng.random::<f64>() < *rate {
                            continue;
                        }
                        let count = rng.random_range(*min_tags..=*max_tags).min(pool);
                        for t in sample(&mut rng, pool, count) {
                            bits[k * pool + t] = 1;
                        }
                    }
                    for b in bits.iter_mut() {
                        if rng.random::<f64>() < *background {
                            *b = 1;
                        }
                    }
                    LabelVector::multilabel(bits).expect("binary tags")
                })
                .collect())
        }
        NoiseSpec::Uniform { rate } => Ok(clean
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut rng = stream(seed, Domain::Noise, &[i as u64]);
                let k = c.class().expect("one-hot");
                let out = if classes > 1 && rng.random::<f64>() < *rate {
                    let j = rng.random_range(0..classes - 1);
                    if j >= k {
                        j + 1
                    } else {
                        j
                    }
                } else {
                    k
                };
                LabelVector::one_hot(classes, out).expect("in range")
            })
            .collect()),
        NoiseSpec::PairFlip { rate, partners } => {
            let p = partners.clone().unwrap_or_else(|| default_partners(classes));
            Ok(clean
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut rng = stream(seed, Domain::Noise, &[i as u64]);
                    let k = c.class().expect("one-hot");
                    let flip = rng.random::<f64>() < *rate;
                    let out = match p[k] {
                        Some(j) if flip => j,
                        _ => k,
                    };
                    LabelVector::one_hot(classes, out).expect("in range")
                })
                .collect())
        }
        NoiseSpec::TransitionMatrix { .. } => {
            let t = spec.transition(classes)?;
            Ok(clean
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut rng = stream(seed, Domain::Noise, &[i as u64]);
                    let k = c.class().expect("one-hot");
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut out = classes - 1;
                    for j in 0..classes {
                        acc += t[[k, j]];
                        if u < acc {
                            out = j;
                            break;
                        }
                    }
                    LabelVector::one_hot(classes, out).expect("in range")
                })
                .collect())
        }
    }
}

fn default_scenes() -> usize {
    8
}

fn default_labels_per_scene() -> usize {
    3
}

fn default_scene_on() -> f64 {
    0.7
}

fn default_label_floor() -> f64 {
    0.02
}

/// Configuration of [`make_synthetic`].
///
/// Multiclass data are Gaussian clusters: class means drawn from
/// `N(0, I/input_dim)`, scaled by `separation`, plus unit Gaussian noise.
/// Multilabel data pick one of `scenes` latent scenes per instance; each
/// scene turns on its `labels_per_scene` labels with probability `scene_on`
/// and every other label with probability `label_floor`. Features are
/// `separation ×` the sum of the present labels' direction vectors plus unit
/// Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub mode: LabelMode,
    pub classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub train_size: usize,
    #[serde(default)]
    pub val_size: usize,
    #[serde(default)]
    pub test_size: usize,
    pub clean_fraction: f64,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default = "default_labels_per_scene")]
    pub labels_per_scene: usize,
    #[serde(default = "default_scene_on")]
    pub scene_on: f64,
    #[serde(default = "default_label_floor")]
    pub label_floor: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument("synthetic data needs classes and input_dim > 0".into()));
        }
        if self.train_size == 0 {
            return Err(Error::InvalidArgument("train_size must be positive".into()));
        }
        check_rate(self.clean_fraction, "clean_fraction")?;
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::InvalidArgument("separation must be finite and >= 0".into()));
        }
        if self.noise.mode() != self.mode {
            return Err(Error::InvalidArgument(format!(
                "noise kind does not apply to {:?} data",
                self.mode
            )));
        }
        if self.mode == LabelMode::Multilabel {
            if self.scenes == 0 || self.labels_per_scene == 0 || self.labels_per_scene > self.classes {
                return Err(Error::InvalidArgument("invalid scene structure".into()));
            }
            check_rate(self.scene_on, "scene_on")?;
            check_rate(self.label_floor, "label_floor")?;
        }
        self.noise.validate(self.classes)
    }

    /// Size of the clean training split.
    pub fn clean_count(&self) -> usize {
        (self.clean_fraction * self.train_size as f64).round() as usize
    }
}

fn gaussian_rows(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Generates a labeled dataset with injected noise and a
/// `[D_N, D_C, val, test]` split. Deterministic in `config.seed`.
pub fn make_synthetic(config: &SyntheticConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let c = config.classes;
    let d = config.input_dim;
    let total = config.train_size + config.val_size + config.test_size;
    let mut rng = stream(config.seed, Domain::Data, &[0]);
    let dirs = gaussian_rows(&mut rng, c, d, (1.0 / d as f64).sqrt());

    let mut clean = Vec::with_capacity(total);
    match config.mode {
        LabelMode::Multiclass => {
            for _ in 0..total {
                clean.push(LabelVector::one_hot(c, rng.random_range(0..c))?);
            }
        }
        LabelMode::Multilabel => {
            let scene_labels: Vec<Vec<usize>> = (0..config.scenes)
                .map(|_| sample(&mut rng, c, config.labels_per_scene).into_vec())
                .collect();
            for _ in 0..total {
                let s = rng.random_range(0..config.scenes);
                let bits = (0..c)
                    .map(|k| {
                        let p = if scene_labels[s].contains(&k) {
                            config.scene_on
                        } else {
                            config.label_floor
                        };
                        u8::from(rng.random::<f64>() < p)
                    })
                    .collect();
                clean.push(LabelVector::multilabel(bits)?);
            }
        }
    }

    let mut features = gaussian_rows(&mut rng, total, d, 1.0);
    for (i, yc) in clean.iter().enumerate() {
        let mut row = features.row_mut(i);
        for k in yc.ones() {
            row.scaled_add(config.separation, &dirs.row(k));
        }
    }

    let noisy = inject_noise(&clean, &config.noise, config.seed)?;

    let mut train_ids: Vec<usize> = (0..config.train_size).collect();
    train_ids.shuffle(&mut stream(config.seed, Domain::Shuffle, &[u64::MAX]));
    let mut splits = vec![Split::NoisyTrain; total];
    for &i in &train_ids[..config.clean_count()] {
        splits[i] = Split::CleanTrain;
    }
    for s in splits.iter_mut().skip(config.train_size).take(config.val_size) {
        *s = Split::Val;
    }
    for s in splits.iter_mut().skip(config.train_size + config.val_size) {
        *s = Split::Test;
    }

    LabeledDataset::new(
        config.mode,
        features.mapv(|v| v as f32),
        noisy,
        clean.into_iter().map(Some).collect(),
        splits,
        serde_json::to_value(&config.noise)?,
    )
}

/// Bytes per CIFAR-10 binary record: one label byte plus a 32×32×3 image.
pub const CIFAR_RECORD: usize = 1 + 3072;

/// Reads CIFAR-10 binary batches. Pixels are scaled to `[0, 1]` and
/// average-pooled over `pool × pool` blocks per channel (`pool` divides 32).
pub fn read_cifar10_binary(paths: &[&Path], pool: usize) -> Result<(Array2<f32>, Vec<usize>)> {
    if pool == 0 || 32 % pool != 0 {
        return Err(Error::InvalidArgument(format!("pool {pool} must divide 32")));
    }
    let side = 32 / pool;
    let dim = 3 * side * side;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{} is not a whole number of CIFAR-10 records",
                path.display()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Format(format!("label byte {} out of range", rec[0])));
            }
            labels.push(rec[0] as usize);
            let img = &rec[1..];
            let scale = 1.0 / (255.0 * (pool * pool) as f32);
            for ch in 0..3 {
                for by in 0..side {
                    for bx in 0..side {
                        let mut s = 0u32;
                        for dy in 0..pool {
                            for dx in 0..pool {
                                let (y, x) = (by * pool + dy, bx * pool + dx);
                                s += img[ch * 1024 + y * 32 + x] as u32;
                            }
                        }
                        feats.push(s as f32 * scale);
                    }
                }
            }
        }
    }
    let rows = labels.len();
    let features = Array2::from_shape_vec((rows, dim), feats).map_err(|e| Error::Format(e.to_string()))?;
    Ok((features, labels))
}

/// Builds a multiclass dataset from class-labelled features: the `train`
/// rows receive injected noise and are split into `D_N`/`D_C` (plus `val_size`
/// held-out validation rows taken from the end of the shuffled train rows);
/// `test` rows form the test split.
pub fn dataset_from_classes(
    train: (Array2<f32>, Vec<usize>),
    test: Option<(Array2<f32>, Vec<usize>)>,
    classes: usize,
    noise: &NoiseSpec,
    clean_fraction: f64,
    val_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    check_rate(clean_fraction, "clean_fraction")?;
    let (train_x, train_y) = train;
    check_len("train labels", train_x.nrows(), train_y.len())?;
    if val_size >= train_y.len() {
        return Err(Error::InvalidArgument("val_size must be below the number of train rows".into()));
    }
    let mut x = train_x;
    let mut labels = train_y;
    let n_train = labels.len();
    if let Some((tx, ty)) = test {
        check_len("test labels", tx.nrows(), ty.len())?;
        x.append(ndarray::Axis(0), tx.view())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        labels.extend(ty);
    }
    let clean: Vec<LabelVector> = labels
        .iter()
        .map(|&k| LabelVector::one_hot(classes, k))
        .collect::<Result<_>>()?;
    let noisy = inject_noise(&clean, noise, seed)?;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut stream(seed, Domain::Shuffle, &[u64::MAX]));
    let fit = n_train - val_size;
    let n_clean = (clean_fraction * fit as f64).round() as usize;
    let mut splits = vec![Split::Test; labels.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_clean {
            Split::CleanTrain
        } else if rank < fit {
            Split::NoisyTrain
        } else {
            Split::Val
        };
    }
    LabeledDataset::new(
        LabelMode::Multiclass,
        x,
        noisy,
        clean.into_iter().map(Some).collect(),
        splits,
        serde_json::to_value(noise)?,
    )
}
