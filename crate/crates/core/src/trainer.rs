//! Regularised semi-supervised EM: E-step `q` per instance, M-step gradients
//! as positive-minus-negative statistics, mixed clean/noisy minibatches,
//! `α` annealing, checkpoints and per-epoch metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::auxiliary::AuxModel;
use crate::container::{self, header_field, ByteReader, ByteWriter};
use crate::crf::{BiasPair, Dims, EnergyParams, FactorialPosterior};
use crate::data::TrainingView;
use crate::error::{check_len, Error, Result};
use crate::eval::{supervised_epoch, BaselineLoss, SupervisedConfig, Target};
use crate::gibbs::{negative_phase, ChainState, ChainStore, GibbsConfig, NegativeItem, Sampler, StoredSide};
use crate::labels::{LabelMode, LabelVector};
use crate::math::{log_sigmoid, sigmoid, softmax};
use crate::net::{FeatureNet, NetKind};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::oracle::{self, EnumerationLimit};
use crate::rng::{stream, Domain};
use crate::stats::SuffStats;
use crate::variational::{kl_objective, q_clean, q_noisy, AlphaSchedule};

/// Model variants. The CRF variants differ in which pieces of the energy
/// they keep; the two `*_ce` variants are plain supervised baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No `W`, `W′` or `h`: `y` and `ŷ` are independent given `x`, so every
    /// expectation is analytic.
    NoPairwise,
    CrfNoHidden,
    CrfHidden,
    /// `b` is a learned x-independent vector instead of a network head.
    CrfNoXy,
    CleanOnlyCe,
    NoisyOnlyCe,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoPairwise,
        Variant::CrfNoHidden,
        Variant::CrfHidden,
        Variant::CrfNoXy,
        Variant::CleanOnlyCe,
        Variant::NoisyOnlyCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoPairwise => "no_pairwise",
            Variant::CrfNoHidden => "crf_no_hidden",
            Variant::CrfHidden => "crf_hidden",
            Variant::CrfNoXy => "crf_no_xy",
            Variant::CleanOnlyCe => "clean_only_ce",
            Variant::NoisyOnlyCe => "noisy_only_ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    /// Whether `c`, `W`, `W′` are trained.
    pub fn has_pairwise(self) -> bool {
        matches!(self, Variant::CrfNoHidden | Variant::CrfHidden | Variant::CrfNoXy)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Variant::CleanOnlyCe | Variant::NoisyOnlyCe)
    }

    fn hidden_units(self, configured: usize) -> usize {
        match self {
            Variant::CrfHidden | Variant::CrfNoXy => configured,
            _ => 0,
        }
    }

    fn emits_noisy_bias(self) -> bool {
        self != Variant::CrfNoXy
    }
}

/// How the model expectation of the M-step is formed for pairwise variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePhaseKind {
    /// Persistent Gibbs chains per instance.
    Pcd,
    /// Exact enumeration; small models only.
    Exact,
}

/// Fresh-chain Gibbs estimate of `p_θ(ŷ | x)` at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub chains: usize,
    pub sweeps: usize,
    pub burn_in: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            chains: 50,
            sweeps: 100,
            burn_in: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Share of each minibatch drawn from `D_C`; proportional to the set
    /// sizes when absent.
    pub clean_fraction: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f64,
    pub alpha_schedule: AlphaSchedule,
    pub variant: Variant,
    /// `H` for the variants with hidden units.
    pub hidden_units: usize,
    pub net: NetKind,
    pub gibbs: GibbsConfig,
    pub negative_phase: NegativePhaseKind,
    pub prediction: PredictionConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            minibatch_size: 64,
            clean_fraction: None,
            optimizer: OptimizerConfig::default(),
            grad_clip: 10.0,
            alpha_schedule: AlphaSchedule::constant(1.0),
            variant: Variant::CrfHidden,
            hidden_units: 50,
            net: NetKind::Linear,
            gibbs: GibbsConfig::default(),
            negative_phase: NegativePhaseKind::Pcd,
            prediction: PredictionConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sets the run seed and the Gibbs stream seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gibbs.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::InvalidArgument("minibatch_size must be positive".into()));
        }
        if let Some(f) = self.clean_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("clean_fraction must lie in [0, 1], got {f}")));
            }
        }
        if self.grad_clip.is_nan() {
            return Err(Error::InvalidArgument("grad_clip is NaN".into()));
        }
        if self.prediction.chains == 0 || self.prediction.sweeps <= self.prediction.burn_in {
            return Err(Error::InvalidArgument(
                "prediction needs chains > 0 and sweeps > burn_in".into(),
            ));
        }
        self.optimizer.validate()?;
        self.alpha_schedule.validate()?;
        self.gibbs.validate()
    }

    fn supervised(&self) -> SupervisedConfig {
        SupervisedConfig {
            net: self.net,
            epochs: self.epochs,
            batch_size: self.minibatch_size,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub alpha: f64,
    pub bound_estimate: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: EnergyParams,
    pub net: FeatureNet,
    pub optimizer: Optimizer,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub chains: ChainStore,
    pub metrics: Vec<EpochMetrics>,
}

/// Noisy and clean instance ids of one minibatch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Minibatch {
    pub noisy: Vec<usize>,
    pub clean: Vec<usize>,
}

/// Outcome of one [`em_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean noisy-instance bound plus mean clean-instance bound, before the update.
    pub bound_estimate: f64,
    pub grad_norm: f64,
}

/// `E_q` statistics for a noisy instance: `q` over `(ŷ, h)` with `y` observed.
pub fn positive_phase_noisy(y: &LabelVector, q: &FactorialPosterior) -> SuffStats {
    let dims = Dims::new(y.len(), q.p_clean.len(), q.p_hidden.len());
    let mut s = SuffStats::zeros(dims);
    s.add_outer(&q.p_clean, &y.to_f64(), &q.p_hidden, 1.0);
    s
}

/// `E_q` statistics for a clean instance: `y` and `ŷ` observed, `q` over `h`.
pub fn positive_phase_clean(y: &LabelVector, yhat: &LabelVector, q_h: &[f64]) -> SuffStats {
    let dims = Dims::new(y.len(), yhat.len(), q_h.len());
    let mut s = SuffStats::zeros(dims);
    s.add_outer(&yhat.to_f64(), &y.to_f64(), q_h, 1.0);
    s
}

fn probs(logits: &[f64], mode: LabelMode) -> Vec<f64> {
    match mode {
        LabelMode::Multiclass => softmax(logits),
        LabelMode::Multilabel => logits.iter().map(|&l| sigmoid(l)).collect(),
    }
}

/// `log p(v)` for independent units with the given logits.
fn log_prob_units(logits: &[f64], v: &LabelVector) -> f64 {
    match v.mode() {
        LabelMode::Multiclass => {
            let k = v.class().expect("one-hot");
            let p = softmax(logits);
            p[k].max(f64::MIN_POSITIVE).ln()
        }
        LabelMode::Multilabel => logits
            .iter()
            .zip(v.bits())
            .map(|(&l, &b)| if b == 1 { log_sigmoid(l) } else { log_sigmoid(-l) })
            .sum(),
    }
}

/// `E[−E]` under a distribution summarised by its statistics.
fn expected_neg_energy(params: &EnergyParams, bias: &BiasPair, s: &SuffStats) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&bias.a, &s.clean)
        + dot(&bias.b, &s.noisy)
        + dot(params.c.as_slice().unwrap(), &s.hidden)
        + (&params.w * &s.clean_noisy).sum()
        + (&params.wp * &s.hidden_noisy).sum()
}

fn entropy(q: &[f64], mode: LabelMode) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    match mode {
        LabelMode::Multiclass => q.iter().map(|&p| h(p)).sum(),
        LabelMode::Multilabel => q.iter().map(|&p| h(p) + h(1.0 - p)).sum(),
    }
}

impl TrainState {
    /// Fresh parameters for a dataset with the given shape.
    pub fn new(config: TrainConfig, input_dim: usize, noisy: usize, clean: usize, mode: LabelMode) -> Result<Self> {
        config.validate()?;
        let hidden = config.variant.hidden_units(config.hidden_units);
        let dims = Dims::new(noisy, clean, hidden);
        let net = FeatureNet::new(
            config.net,
            input_dim,
            clean,
            noisy,
            config.variant.emits_noisy_bias(),
            config.seed,
        )?;
        let params = EnergyParams::zeros(dims, mode);
        let chains = ChainStore::new(dims, mode, StoredSide::for_dims(dims), config.gibbs.chains_per_instance);
        let mut state = Self {
            optimizer: Optimizer::new(config.optimizer, 0)?,
            config,
            params,
            net,
            epoch: 0,
            step: 0,
            chains,
            metrics: Vec::new(),
        };
        state.optimizer = Optimizer::new(state.config.optimizer, state.flat_len())?;
        Ok(state)
    }

    pub fn for_view(config: TrainConfig, view: &TrainingView<'_>) -> Result<Self> {
        Self::new(config, view.input_dim(), view.noisy_dim(), view.clean_dim(), view.mode())
    }

    pub fn dims(&self) -> Dims {
        self.params.dims
    }

    pub fn mode(&self) -> LabelMode {
        self.params.mode
    }

    /// Number of trainable values: the network, then `c`, `W`, `W′` for
    /// pairwise variants.
    pub fn flat_len(&self) -> usize {
        let d = self.params.dims;
        self.net.num_params()
            + if self.config.variant.has_pairwise() {
                d.hidden + d.clean * d.noisy + d.hidden * d.noisy
            } else {
                0
            }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.net.params.clone();
        if self.config.variant.has_pairwise() {
            v.extend(self.params.c.iter());
            v.extend(self.params.w.iter());
            v.extend(self.params.wp.iter());
        }
        v
    }

    pub fn set_flat_params(&mut self, v: &[f64]) -> Result<()> {
        check_len("flat parameters", self.flat_len(), v.len())?;
        let n = self.net.num_params();
        self.net.params.copy_from_slice(&v[..n]);
        if self.config.variant.has_pairwise() {
            let d = self.params.dims;
            let (c, rest) = v[n..].split_at(d.hidden);
            let (w, wp) = rest.split_at(d.clean * d.noisy);
            self.params.c.as_slice_mut().unwrap().copy_from_slice(c);
            self.params.w.as_slice_mut().unwrap().copy_from_slice(w);
            self.params.wp.as_slice_mut().unwrap().copy_from_slice(wp);
        }
        Ok(())
    }

    /// `α` in effect for the most recently trained epoch.
    pub fn current_alpha(&self) -> f64 {
        self.config.alpha_schedule.at(self.epoch.saturating_sub(1))
    }

    pub fn bias(&self, x: &[f64]) -> Result<BiasPair> {
        self.net.forward(x)
    }

    /// Test-time clean-label probabilities `p_θ(ŷ | x)`. Pairwise variants
    /// use fresh Gibbs chains (Rao–Blackwellised over `ŷ`); `id` selects the
    /// random streams.
    pub fn predict_clean(&self, x: &[f64], id: u64) -> Result<Vec<f64>> {
        let bias = self.bias(x)?;
        let mode = self.mode();
        match self.config.variant {
            Variant::NoPairwise | Variant::CleanOnlyCe => Ok(probs(&bias.a, mode)),
            Variant::NoisyOnlyCe => match mode {
                LabelMode::Multiclass => Ok(probs(&bias.a, mode)),
                LabelMode::Multilabel if self.dims().noisy == self.dims().clean => Ok(probs(&bias.b, mode)),
                LabelMode::Multilabel => Err(Error::InvalidArgument(
                    "a model trained on noisy tags cannot score clean labels when N != C".into(),
                )),
            },
            _ => Ok(self.gibbs_clean_marginal(&bias, id)),
        }
    }

    fn gibbs_clean_marginal(&self, bias: &BiasPair, id: u64) -> Vec<f64> {
        let pc = self.config.prediction;
        let dims = self.dims();
        let mode = self.mode();
        let mut sampler = Sampler::new(&self.params, bias);
        let mut acc = vec![0.0; dims.clean];
        let y0 = probs(&bias.b, mode);
        for chain in 0..pc.chains {
            let mut rng = stream(self.config.seed, Domain::Prediction, &[id, chain as u64]);
            let mut state = ChainState::zeros(dims);
            match mode {
                LabelMode::Multilabel => {
                    for (s, &p) in state.y.iter_mut().zip(&y0) {
                        *s = u8::from(rng.random::<f64>() < p);
                    }
                }
                LabelMode::Multiclass => {
                    let u: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut pick = dims.noisy - 1;
                    for (k, &p) in y0.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            pick = k;
                            break;
                        }
                    }
                    state.y[pick] = 1;
                }
            }
            for sweep in 0..pc.sweeps {
                sampler.sweep(&mut state, &mut rng);
                if sweep >= pc.burn_in {
                    sampler.clean_hidden_probs(&state.y);
                    for (a, p) in acc.iter_mut().zip(sampler.clean_probs()) {
                        *a += p;
                    }
                }
            }
        }
        let n = (pc.chains * (pc.sweeps - pc.burn_in)) as f64;
        acc.into_iter().map(|a| a / n).collect()
    }

    /// Scores used for recovering the clean labels of a noisy training
    /// instance: `q(ŷ | y, x)` for the CRF variants, the classifier's
    /// prediction for the supervised baselines.
    pub fn recovery_scores(&self, aux: &AuxModel, x: &[f64], y: &LabelVector, alpha: f64, id: u64) -> Result<Vec<f64>> {
        if self.config.variant.is_supervised() {
            return self.predict_clean(x, id);
        }
        Ok(q_noisy(&self.params, &self.bias(x)?, aux, y, alpha)?.p_clean)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.net.validate()
    }

    /// Serialises parameters, optimizer moments, chains and metrics.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Map::new();
        header.insert("config".into(), serde_json::to_value(&self.config)?);
        header.insert("epoch".into(), Value::from(self.epoch));
        header.insert("step".into(), Value::from(self.step));
        header.insert("optimizer_t".into(), Value::from(self.optimizer.t));
        header.insert("dims".into(), serde_json::to_value(self.dims())?);
        header.insert("mode".into(), serde_json::to_value(self.mode())?);
        header.insert("input_dim".into(), Value::from(self.net.input_dim));
        header.insert("metrics".into(), serde_json::to_value(&self.metrics)?);
        header.insert("chains_side".into(), serde_json::to_value(self.chains.side())?);
        let mut w = ByteWriter::new();
        w.f64s(&self.net.params)
            .f64s(self.params.c.iter())
            .f64s(self.params.w.iter())
            .f64s(self.params.wp.iter())
            .u64(self.optimizer.m.len() as u64)
            .f64s(&self.optimizer.m)
            .f64s(&self.optimizer.v);
        let chains = self.chains.to_bytes();
        w.u64(chains.len() as u64).bytes(&chains);
        container::write_file(path, "checkpoint", header, &w.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = container::read_file(path, "checkpoint")?;
        let config: TrainConfig = header_field(&header, "config")?;
        let dims: Dims = header_field(&header, "dims")?;
        let mode: LabelMode = header_field(&header, "mode")?;
        let input_dim: usize = header_field(&header, "input_dim")?;
        let mut state = Self::new(config, input_dim, dims.noisy, dims.clean, mode)?;
        if state.dims() != dims {
            return Err(Error::Format("checkpoint dims disagree with its config".into()));
        }
        state.epoch = header_field(&header, "epoch")?;
        state.step = header_field(&header, "step")?;
        state.optimizer.t = header_field(&header, "optimizer_t")?;
        state.metrics = header_field(&header, "metrics")?;
        let side: StoredSide = header_field(&header, "chains_side")?;
        let mut r = ByteReader::new(&payload);
        state.net.params = r.f64s(state.net.num_params())?;
        state.params.c = Array1::from(r.f64s(dims.hidden)?);
        state.params.w = Array2::from_shape_vec((dims.clean, dims.noisy), r.f64s(dims.clean * dims.noisy)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        state.params.wp = Array2::from_shape_vec((dims.hidden, dims.noisy), r.f64s(dims.hidden * dims.noisy)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let moments = r.u64()? as usize;
        state.optimizer.m = r.f64s(moments)?;
        state.optimizer.v = r.f64s(moments)?;
        let chain_len = r.u64()? as usize;
        state.chains = ChainStore::from_bytes(
            dims,
            mode,
            side,
            state.config.gibbs.chains_per_instance,
            r.take(chain_len)?,
        )?;
        r.finish()?;
        state.validate()?;
        Ok(state)
    }

    /// The metrics log as CSV: `epoch,alpha,bound_estimate` followed by the
    /// extra metric columns in sorted order.
    pub fn metrics_csv(&self) -> String {
        let keys: Vec<&String> = {
            let mut k: Vec<&String> = self.metrics.iter().flat_map(|m| m.extra.keys()).collect();
            k.sort();
            k.dedup();
            k
        };
        let mut out = String::from("epoch,alpha,bound_estimate");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for m in &self.metrics {
            let _ = write!(out, "{},{},{}", m.epoch, m.alpha, m.bound_estimate);
            for k in &keys {
                match m.extra.get(*k) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn check_compatible(state: &TrainState, view: &TrainingView<'_>, aux: Option<&AuxModel>) -> Result<()> {
    check_len("features", state.net.input_dim, view.input_dim())?;
    check_len("noisy labels", state.dims().noisy, view.noisy_dim())?;
    check_len("clean labels", state.dims().clean, view.clean_dim())?;
    if view.mode() != state.mode() {
        return Err(Error::InvalidArgument("dataset and model use different label modes".into()));
    }
    if let Some(aux) = aux {
        check_len("aux noisy labels", state.dims().noisy, aux.noisy_dim())?;
        check_len("aux clean labels", state.dims().clean, aux.clean_dim())?;
    }
    Ok(())
}

/// Ascent direction of one minibatch before clipping, laid out like
/// [`TrainState::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub values: Vec<f64>,
    /// Mean noisy-instance bound plus mean clean-instance bound.
    pub bound_estimate: f64,
}

/// `q` per instance, positive minus negative statistics, and
/// backpropagation of the bias gradients into the network. Instances are
/// weighted `1/m_n` (noisy) and `1/m_c` (clean). Advances the persistent
/// chains under the PCD negative phase.
pub fn batch_gradient(
    state: &mut TrainState,
    view: &TrainingView<'_>,
    aux: &AuxModel,
    batch: &Minibatch,
    alpha: f64,
) -> Result<BatchGradient> {
    if batch.noisy.is_empty() && batch.clean.is_empty() {
        return Err(Error::EmptyDataset("minibatch is empty"));
    }
    if state.config.variant.is_supervised() {
        return Err(Error::InvalidArgument(
            "supervised variants are trained by train(), not em_step".into(),
        ));
    }
    let variant = state.config.variant;
    let pairwise = variant.has_pairwise();
    let mode = state.mode();
    let dims = state.dims();

    struct Inst {
        id: usize,
        x: Vec<f64>,
        bias: BiasPair,
        pos: SuffStats,
        weight: f64,
        is_clean: bool,
    }

    let mut insts = Vec::with_capacity(batch.noisy.len() + batch.clean.len());
    let (mut u_sum, mut l_sum) = (0.0, 0.0);
    for (ids, clean) in [(&batch.noisy, false), (&batch.clean, true)] {
        let weight = 1.0 / ids.len().max(1) as f64;
        for &id in ids.iter() {
            let x = view.features(id);
            let bias = state.net.forward(&x)?;
            let y = view.noisy(id);
            let (pos, bound) = if clean {
                let yhat = view
                    .clean(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("row {id} has no visible clean label")))?;
                let q_h = q_clean(&state.params, aux, y, alpha)?;
                let pos = positive_phase_clean(y, yhat, &q_h);
                let bound = if variant == Variant::NoPairwise {
                    log_prob_units(&bias.b, y) + log_prob_units(&bias.a, yhat)
                } else if state.config.negative_phase == NegativePhaseKind::Exact {
                    oracle::exact_clean_bound(&state.params, &bias, aux, y, yhat, alpha, EnumerationLimit::default())?
                } else {
                    let mut b = expected_neg_energy(&state.params, &bias, &pos) + entropy(&q_h, LabelMode::Multilabel);
                    if alpha > 0.0 && aux.hidden_dim() == dims.hidden && dims.hidden > 0 {
                        let aux_h = aux.cond(y)?.p_hidden;
                        let qf = FactorialPosterior::new(Vec::new(), q_h.clone(), LabelMode::Multilabel)?;
                        let af = FactorialPosterior::new(Vec::new(), aux_h, LabelMode::Multilabel)?;
                        b -= alpha * crate::variational::factorial_kl(&qf, &af)?;
                    }
                    b
                };
                (pos, bound)
            } else {
                let q = q_noisy(&state.params, &bias, aux, y, alpha)?;
                let pos = positive_phase_noisy(y, &q);
                let bound = if variant == Variant::NoPairwise {
                    let model = FactorialPosterior::from_logits(&bias.a, &[], mode);
                    log_prob_units(&bias.b, y) - kl_objective(&q, &model, &aux.cond(y)?, alpha)?
                } else if state.config.negative_phase == NegativePhaseKind::Exact {
                    oracle::exact_bound_with_q(&state.params, &bias, aux, y, alpha, &q, EnumerationLimit::default())?
                } else {
                    let model = crate::crf::cond_clean_hidden(&state.params, &bias, y)?;
                    let a = aux.cond(y)?;
                    expected_neg_energy(&state.params, &bias, &pos)
                        + entropy(&q.p_clean, mode)
                        + entropy(&q.p_hidden, LabelMode::Multilabel)
                        - (kl_objective(&q, &model, &a, alpha)? - crate::variational::factorial_kl(&q, &model)?)
                };
                (pos, bound)
            };
            if clean {
                l_sum += bound;
            } else {
                u_sum += bound;
            }
            insts.push(Inst {
                id,
                x,
                bias,
                pos,
                weight,
                is_clean: clean,
            });
        }
    }

    // model expectations per instance
    let negs: Vec<SuffStats> = if variant == Variant::NoPairwise {
        insts
            .iter()
            .map(|inst| {
                let mut s = SuffStats::zeros(dims);
                s.clean = probs(&inst.bias.a, mode);
                s.noisy = probs(&inst.bias.b, mode);
                s
            })
            .collect()
    } else {
        match state.config.negative_phase {
            NegativePhaseKind::Exact => insts
                .iter()
                .map(|inst| oracle::exact_marginals(&state.params, &inst.bias, EnumerationLimit::default()))
                .collect::<Result<_>>()?,
            NegativePhaseKind::Pcd => {
                let items: Vec<NegativeItem<'_>> = insts
                    .iter()
                    .map(|inst| NegativeItem {
                        id: inst.id as u64,
                        bias: &inst.bias,
                        observed_y: view.noisy(inst.id),
                    })
                    .collect();
                negative_phase(&state.params, &mut state.chains, &items, &state.config.gibbs)?
            }
        }
    };

    if state.config.negative_phase == NegativePhaseKind::Pcd && pairwise {
        // the contrast surrogate subtracts E_p[−E] in place of log Z
        for (inst, neg) in insts.iter().zip(&negs) {
            let e = expected_neg_energy(&state.params, &inst.bias, neg);
            if inst.is_clean {
                l_sum -= e;
            } else {
                u_sum -= e;
            }
        }
    }

    let n_net = state.net.num_params();
    let mut grad = vec![0.0; state.flat_len()];
    let (net_grad, rest) = grad.split_at_mut(n_net);
    let mut pair = SuffStats::zeros(dims);
    for (inst, neg) in insts.iter().zip(&negs) {
        let g = inst.pos.minus(neg);
        state
            .net
            .backward_into(&inst.x, &g.clean, &g.noisy, inst.weight, net_grad)?;
        if pairwise {
            pair.add_scaled(&g, inst.weight);
        }
    }
    if pairwise {
        let (c, r2) = rest.split_at_mut(dims.hidden);
        let (w, wp) = r2.split_at_mut(dims.clean * dims.noisy);
        c.copy_from_slice(&pair.hidden);
        w.copy_from_slice(pair.clean_noisy.as_slice().unwrap());
        wp.copy_from_slice(pair.hidden_noisy.as_slice().unwrap());
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient at epoch {} step {} (alpha {alpha})",
            state.epoch, state.step
        )));
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(BatchGradient {
        values: grad,
        bound_estimate: mean(u_sum, batch.noisy.len()) + mean(l_sum, batch.clean.len()),
    })
}

/// One EM update: [`batch_gradient`], global-norm clipping and one
/// optimizer step.
pub fn em_step(
    state: &mut TrainState,
    view: &TrainingView<'_>,
    aux: &AuxModel,
    batch: &Minibatch,
    alpha: f64,
) -> Result<StepReport> {
    let BatchGradient {
        values: mut grad,
        bound_estimate,
    } = batch_gradient(state, view, aux, batch, alpha)?;
    let grad_norm = clip_global_norm(&mut grad, state.config.grad_clip);
    let mut flat = state.flat_params();
    state.optimizer.step(&mut flat, &grad)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "parameters after epoch {} step {}",
            state.epoch, state.step
        )));
    }
    state.set_flat_params(&flat)?;
    state.step += 1;
    Ok(StepReport {
        bound_estimate,
        grad_norm,
    })
}

/// Minibatches for one epoch. Each holds `m_c = round(B · f)` clean and
/// `m_n = B − m_c` noisy instances; the noisy set is traversed once and the
/// clean set is cycled.
pub fn epoch_batches(config: &TrainConfig, view: &TrainingView<'_>, epoch: usize) -> Vec<Minibatch> {
    let mut noisy = view.noisy_ids().to_vec();
    let mut clean = view.clean_ids().to_vec();
    noisy.shuffle(&mut stream(config.seed, Domain::Shuffle, &[epoch as u64, 1]));
    clean.shuffle(&mut stream(config.seed, Domain::Shuffle, &[epoch as u64, 2]));
    let b = config.minibatch_size;
    let frac = config.clean_fraction.unwrap_or_else(|| {
        let total = noisy.len() + clean.len();
        if total == 0 {
            0.0
        } else {
            clean.len() as f64 / total as f64
        }
    });
    let mut m_c = (b as f64 * frac).round() as usize;
    if clean.is_empty() {
        m_c = 0;
    }
    if noisy.is_empty() {
        m_c = b;
    }
    let m_n = b - m_c.min(b);
    let batches = if m_n > 0 {
        noisy.len().div_ceil(m_n)
    } else {
        clean.len().div_ceil(m_c.max(1))
    };
    let mut out = Vec::with_capacity(batches);
    let mut cursor = 0;
    for k in 0..batches {
        let noisy_part = if m_n > 0 {
            noisy[k * m_n..((k + 1) * m_n).min(noisy.len())].to_vec()
        } else {
            Vec::new()
        };
        let mut clean_part = Vec::with_capacity(m_c);
        for _ in 0..m_c.min(clean.len()) {
            clean_part.push(clean[cursor % clean.len()]);
            cursor += 1;
        }
        out.push(Minibatch {
            noisy: noisy_part,
            clean: clean_part,
        });
    }
    out
}

/// Called after each epoch with the updated state; returns extra metrics
/// for the log (validation accuracy, recovery accuracy, ...).
pub trait EpochObserver {
    fn on_epoch_end(&mut self, state: &TrainState, aux: Option<&AuxModel>) -> Result<BTreeMap<String, f64>>;
}

impl<F> EpochObserver for F
where
    F: FnMut(&TrainState, Option<&AuxModel>) -> Result<BTreeMap<String, f64>>,
{
    fn on_epoch_end(&mut self, state: &TrainState, aux: Option<&AuxModel>) -> Result<BTreeMap<String, f64>> {
        self(state, aux)
    }
}

/// An observer that records nothing.
pub fn no_observer(_: &TrainState, _: Option<&AuxModel>) -> Result<BTreeMap<String, f64>> {
    Ok(BTreeMap::new())
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    view: &TrainingView<'_>,
    aux: Option<&AuxModel>,
    config: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainState> {
    let mut state = TrainState::for_view(config.clone(), view)?;
    resume(&mut state, view, aux, observer, &mut |_| Ok(()))?;
    Ok(state)
}

/// The analytic variant: no pairwise links, so `q` and both expectations of
/// the M-step are closed-form. `D_C` may be empty.
pub fn train_analytic_variant(
    view: &TrainingView<'_>,
    aux: &AuxModel,
    config: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainState> {
    if config.variant != Variant::NoPairwise {
        return Err(Error::InvalidArgument(format!(
            "the analytic trainer needs the no_pairwise variant, got {}",
            config.variant.name()
        )));
    }
    train(view, Some(aux), config, observer)
}

/// Continues training `state` until `config.epochs` epochs are complete,
/// calling `after_epoch` (e.g. to write a checkpoint) after each one.
pub fn resume(
    state: &mut TrainState,
    view: &TrainingView<'_>,
    aux: Option<&AuxModel>,
    observer: &mut dyn EpochObserver,
    after_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    check_compatible(state, view, aux)?;
    let variant = state.config.variant;
    if !variant.is_supervised() && aux.is_none() {
        return Err(Error::InvalidArgument(format!(
            "variant {} needs an auxiliary model",
            variant.name()
        )));
    }
    while state.epoch < state.config.epochs {
        let epoch = state.epoch;
        let alpha = state.config.alpha_schedule.at(epoch);
        let bound = if variant.is_supervised() {
            -supervised_round(state, view, epoch)?
        } else {
            let aux = aux.expect("checked above");
            let batches = epoch_batches(&state.config, view, epoch);
            let mut total = 0.0;
            for batch in &batches {
                total += em_step(state, view, aux, batch, alpha)?.bound_estimate;
            }
            total / batches.len().max(1) as f64
        };
        state.epoch += 1;
        let extra = observer.on_epoch_end(state, aux)?;
        state.metrics.push(EpochMetrics {
            epoch,
            alpha,
            bound_estimate: bound,
            extra,
        });
        log::info!("epoch {epoch}: alpha {alpha} bound {bound}");
        after_epoch(state)?;
    }
    Ok(())
}

/// One epoch of a supervised baseline variant; returns the mean loss.
fn supervised_round(state: &mut TrainState, view: &TrainingView<'_>, epoch: usize) -> Result<f64> {
    let (rows, head): (Vec<(usize, LabelVector)>, Target) = match state.config.variant {
        Variant::CleanOnlyCe => (
            view.clean_ids()
                .iter()
                .filter_map(|&i| view.clean(i).map(|c| (i, c.clone())))
                .collect(),
            Target::Clean,
        ),
        _ => {
            let head = if state.mode() == LabelMode::Multiclass {
                Target::NoisyAsClean
            } else {
                Target::Noisy
            };
            let mut ids: Vec<usize> = view.noisy_ids().iter().chain(view.clean_ids()).copied().collect();
            ids.sort_unstable();
            (ids.into_iter().map(|i| (i, view.noisy(i).clone())).collect(), head)
        }
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no rows for the supervised variant"));
    }
    let cfg = state.config.supervised();
    let TrainState { net, optimizer, .. } = state;
    let loss = supervised_epoch(net, optimizer, view, &rows, head, BaselineLoss::CrossEntropy, None, &cfg, epoch)?;
    state.step += rows.len().div_ceil(cfg.batch_size) as u64;
    Ok(loss)
}
