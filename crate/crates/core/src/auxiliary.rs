//! The fixed auxiliary label model `p_aux`: an x-independent RBM over
//! `(y, ŷ, h)` trained with PCD on the clean subset, or a transition-derived
//! conditional `p_aux(ŷ | y)` for multiclass noise.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{self, header_field, ByteReader, ByteWriter};
use crate::crf::{cond_clean_hidden, BiasPair, Dims, EnergyParams, FactorialPosterior};
use crate::error::{check_len, Error, Result};
use crate::gibbs::{ChainState, Sampler};
use crate::labels::{LabelMode, LabelVector};
use crate::math::softmax;
use crate::rng::{derive_seed, stream, Domain, StreamRng};
use crate::stats::SuffStats;

/// Log-probability assigned to impossible transitions. `exp` of it underflows
/// to zero, but `0 · floor` stays finite.
pub const LOG_FLOOR: f64 = -690.0;

/// RBM over `(y, ŷ, h)` with x-independent biases. Its energy has the same
/// quadratic form as the CRF, so it reuses [`EnergyParams`] and a constant
/// [`BiasPair`] (`a_aux`, `b_aux`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRbm {
    pub energy: EnergyParams,
    pub bias: BiasPair,
}

impl AuxRbm {
    /// Biases zero, pairwise weights drawn from `N(0, init_std²)`.
    pub fn init(dims: Dims, mode: LabelMode, init_std: f64, seed: u64) -> Self {
        let mut rng = stream(seed, Domain::ParamInit, &[0xA0]);
        let normal = Normal::new(0.0, init_std).expect("valid std");
        let mut energy = EnergyParams::zeros(dims, mode);
        energy.w.mapv_inplace(|_| normal.sample(&mut rng));
        energy.wp.mapv_inplace(|_| normal.sample(&mut rng));
        Self {
            energy,
            bias: BiasPair::zeros(dims),
        }
    }

    pub fn dims(&self) -> Dims {
        self.energy.dims
    }

    pub fn a_aux(&self) -> &[f64] {
        &self.bias.a
    }

    pub fn b_aux(&self) -> &[f64] {
        &self.bias.b
    }

    pub fn c_aux(&self) -> &Array1<f64> {
        &self.energy.c
    }

    pub fn w_aux(&self) -> &Array2<f64> {
        &self.energy.w
    }

    pub fn wp_aux(&self) -> &Array2<f64> {
        &self.energy.wp
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.bias.validate(self.energy.dims)
    }

    fn apply(&mut self, grad: &SuffStats, step: f64) {
        for (p, g) in self.bias.a.iter_mut().zip(&grad.clean) {
            *p += step * g;
        }
        for (p, g) in self.bias.b.iter_mut().zip(&grad.noisy) {
            *p += step * g;
        }
        for (p, g) in self.energy.c.iter_mut().zip(&grad.hidden) {
            *p += step * g;
        }
        self.energy.w.scaled_add(step, &grad.clean_noisy);
        self.energy.wp.scaled_add(step, &grad.hidden_noisy);
    }
}

/// `p_aux(ŷ, h | y)`: sigmoids of `a_aux + W_aux y` and `c_aux + W′_aux y`.
pub fn aux_cond(aux: &AuxRbm, y: &LabelVector) -> Result<FactorialPosterior> {
    cond_clean_hidden(&aux.energy, &aux.bias, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxRbmConfig {
    pub hidden: usize,
    pub chains: usize,
    pub sweeps: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for AuxRbmConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            chains: 25,
            sweeps: 5,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 32,
            init_std: 0.01,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

/// Trains the auxiliary RBM with persistent contrastive divergence on clean
/// `(y, ŷ)` pairs. The hidden units are free latent variables.
pub fn train_aux_rbm(
    clean_set: &[(LabelVector, LabelVector)],
    config: &AuxRbmConfig,
) -> Result<AuxRbm> {
    let (y0, c0) = clean_set
        .first()
        .ok_or(Error::EmptyDataset("auxiliary training needs clean pairs"))?;
    if config.chains == 0 || config.sweeps == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "aux chains, sweeps and batch size must be positive".into(),
        ));
    }
    let mode = y0.mode();
    let dims = Dims::new(y0.len(), c0.len(), config.hidden);
    for (y, c) in clean_set {
        check_len("aux noisy labels", dims.noisy, y.len())?;
        check_len("aux clean labels", dims.clean, c.len())?;
    }

    let mut rbm = AuxRbm::init(dims, mode, config.init_std, config.seed);
    let mut fantasy: Vec<ChainState> = {
        let mut sampler = Sampler::new(&rbm.energy, &rbm.bias);
        (0..config.chains)
            .map(|k| {
                let mut rng = stream(config.seed, Domain::AuxFantasy, &[u64::MAX, k as u64]);
                let mut s = ChainState::zeros(dims);
                s.y.copy_from_slice(clean_set[k % clean_set.len()].0.bits());
                sampler.sample_clean_hidden(&mut s, &mut rng);
                s
            })
            .collect()
    };

    let mut order: Vec<usize> = (0..clean_set.len()).collect();
    let mut update = 0u64;
    for epoch in 0..config.epochs {
        let mut rng = StreamRng::seed_from_u64(derive_seed(
            config.seed,
            Domain::Shuffle,
            &[0xA0, epoch as u64],
        ));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = SuffStats::zeros(dims);
            let mut sampler = Sampler::new(&rbm.energy, &rbm.bias);
            let w_pos = 1.0 / batch.len() as f64;
            for &i in batch {
                let (y, c) = &clean_set[i];
                sampler.clean_hidden_probs(y.bits());
                grad.add_outer(&c.to_f64(), &y.to_f64(), sampler.hidden_probs(), w_pos);
            }
            let w_neg = -1.0 / config.chains as f64;
            for (k, state) in fantasy.iter_mut().enumerate() {
                let mut rng = stream(config.seed, Domain::AuxFantasy, &[update, k as u64]);
                for _ in 0..config.sweeps {
                    sampler.sweep(state, &mut rng);
                }
                sampler.clean_hidden_probs(&state.y);
                let y: Vec<f64> = state.y.iter().map(|&b| b as f64).collect();
                grad.add_outer(sampler.clean_probs(), &y, sampler.hidden_probs(), w_neg);
            }
            drop(sampler);
            clip_stats(&mut grad, config.grad_clip);
            rbm.apply(&grad, config.learning_rate);
            update += 1;
        }
        if rbm.validate().is_err() {
            return Err(Error::NonFinite(format!(
                "auxiliary RBM diverged during epoch {epoch} (learning rate {})",
                config.learning_rate
            )));
        }
        log::debug!("aux rbm epoch {epoch} done");
    }
    Ok(rbm)
}

pub(crate) fn clip_stats(grad: &mut SuffStats, max_norm: f64) -> f64 {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Transition-derived auxiliary conditional for multiclass noise.
///
/// `t[[i, j]] = P(noisy = j | clean = i)`; `posterior[[j, i]] = p_aux(ŷ = i | y = j)`
/// and `logits` holds its logarithm, floored at [`LOG_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTransition {
    pub t: Array2<f64>,
    pub prior: Vec<f64>,
    pub posterior: Array2<f64>,
    pub logits: Array2<f64>,
}

pub fn check_row_stochastic(t: &Array2<f64>) -> Result<()> {
    if t.nrows() != t.ncols() || t.nrows() == 0 {
        return Err(Error::NotStochastic(format!(
            "expected a non-empty square matrix, got {}x{}",
            t.nrows(),
            t.ncols()
        )));
    }
    for (i, row) in t.rows().into_iter().enumerate() {
        if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::NotStochastic(format!("row {i} has a negative entry")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NotStochastic(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Bayes-inverts `T` under a clean-class prior (uniform when `None`):
/// `p_aux(ŷ = i | y = j) ∝ prior_i · T[i, j]`.
pub fn fit_aux_transition(t: &Array2<f64>, prior: Option<&[f64]>) -> Result<AuxTransition> {
    check_row_stochastic(t)?;
    let c = t.nrows();
    let prior: Vec<f64> = match prior {
        Some(p) => {
            check_len("clean prior", c, p.len())?;
            if p.iter().any(|&v| !v.is_finite() || v < 0.0) || p.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument(
                    "clean prior must be non-negative with positive mass".into(),
                ));
            }
            let s: f64 = p.iter().sum();
            p.iter().map(|v| v / s).collect()
        }
        None => vec![1.0 / c as f64; c],
    };
    let mut posterior = Array2::zeros((c, c));
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| prior[i] * t[[i, j]]).collect();
        let z: f64 = col.iter().sum();
        for i in 0..c {
            // a noisy class no clean class ever produces falls back to the prior
            posterior[[j, i]] = if z > 0.0 { col[i] / z } else { prior[i] };
        }
    }
    let logits = posterior.mapv(|p: f64| if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR });
    Ok(AuxTransition {
        t: t.clone(),
        prior,
        posterior,
        logits,
    })
}

impl AuxTransition {
    pub fn classes(&self) -> usize {
        self.t.nrows()
    }
}

/// Either auxiliary model, as consumed by the variational E-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuxModel {
    Rbm(AuxRbm),
    Transition(AuxTransition),
}

impl AuxModel {
    pub fn mode(&self) -> LabelMode {
        match self {
            AuxModel::Rbm(r) => r.energy.mode,
            AuxModel::Transition(_) => LabelMode::Multiclass,
        }
    }

    pub fn noisy_dim(&self) -> usize {
        match self {
            AuxModel::Rbm(r) => r.dims().noisy,
            AuxModel::Transition(t) => t.classes(),
        }
    }

    pub fn clean_dim(&self) -> usize {
        match self {
            AuxModel::Rbm(r) => r.dims().clean,
            AuxModel::Transition(t) => t.classes(),
        }
    }

    /// Number of auxiliary hidden units (0 for the transition model).
    pub fn hidden_dim(&self) -> usize {
        match self {
            AuxModel::Rbm(r) => r.dims().hidden,
            AuxModel::Transition(_) => 0,
        }
    }

    /// Clean-unit log-scores: logits `a_aux + W_aux y` for the RBM, log
    /// posteriors for the transition model.
    pub fn clean_scores(&self, y: &LabelVector) -> Result<Vec<f64>> {
        check_len("aux noisy labels", self.noisy_dim(), y.len())?;
        Ok(match self {
            AuxModel::Rbm(r) => r.energy.clean_logits(&r.bias.a, y.bits()),
            AuxModel::Transition(t) => {
                let j = y.class().ok_or_else(|| {
                    Error::InvalidArgument("transition aux model needs one-hot labels".into())
                })?;
                t.logits.row(j).to_vec()
            }
        })
    }

    /// Hidden-unit logits `c_aux + W′_aux y`, when the model has hidden units.
    pub fn hidden_logits(&self, y: &LabelVector) -> Option<Vec<f64>> {
        match self {
            AuxModel::Rbm(r) if r.dims().hidden > 0 => Some(r.energy.hidden_logits(y.bits())),
            _ => None,
        }
    }

    /// `p_aux(ŷ, h | y)` as a factorial posterior.
    pub fn cond(&self, y: &LabelVector) -> Result<FactorialPosterior> {
        match self {
            AuxModel::Rbm(r) => aux_cond(r, y),
            AuxModel::Transition(t) => {
                let j = y.class().ok_or_else(|| {
                    Error::InvalidArgument("transition aux model needs one-hot labels".into())
                })?;
                check_len("aux noisy labels", t.classes(), y.len())?;
                // the floored logits, so impossible classes keep a tiny mass and KL[q ‖ p_aux] stays finite
                Ok(FactorialPosterior {
                    p_clean: softmax(t.logits.row(j).as_slice().expect("contiguous")),
                    p_hidden: Vec::new(),
                    mode: LabelMode::Multiclass,
                })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Map::new();
        let mut w = ByteWriter::new();
        match self {
            AuxModel::Rbm(r) => {
                header.insert("aux_kind".into(), Value::from("rbm"));
                header.insert("dims".into(), serde_json::to_value(r.dims())?);
                header.insert("mode".into(), serde_json::to_value(r.energy.mode)?);
                w.f64s(&r.bias.a)
                    .f64s(&r.bias.b)
                    .f64s(r.energy.c.iter())
                    .f64s(r.energy.w.iter())
                    .f64s(r.energy.wp.iter());
            }
            AuxModel::Transition(t) => {
                header.insert("aux_kind".into(), Value::from("transition"));
                header.insert("classes".into(), Value::from(t.classes()));
                header.insert("mode".into(), serde_json::to_value(LabelMode::Multiclass)?);
                w.f64s(t.t.iter()).f64s(&t.prior);
            }
        }
        container::write_file(path, "aux_model", header, &w.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = container::read_file(path, "aux_model")?;
        let kind: String = header_field(&header, "aux_kind")?;
        let mut r = ByteReader::new(&payload);
        let model = match kind.as_str() {
            "rbm" => {
                let dims: Dims = header_field(&header, "dims")?;
                let mode: LabelMode = header_field(&header, "mode")?;
                let a = r.f64s(dims.clean)?;
                let b = r.f64s(dims.noisy)?;
                let c = Array1::from(r.f64s(dims.hidden)?);
                let w = Array2::from_shape_vec((dims.clean, dims.noisy), r.f64s(dims.clean * dims.noisy)?)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let wp = Array2::from_shape_vec(
                    (dims.hidden, dims.noisy),
                    r.f64s(dims.hidden * dims.noisy)?,
                )
                .map_err(|e| Error::Format(e.to_string()))?;
                let rbm = AuxRbm {
                    energy: EnergyParams {
                        dims,
                        mode,
                        c,
                        w,
                        wp,
                    },
                    bias: BiasPair { a, b },
                };
                rbm.validate()?;
                AuxModel::Rbm(rbm)
            }
            "transition" => {
                let c: usize = header_field(&header, "classes")?;
                let t = Array2::from_shape_vec((c, c), r.f64s(c * c)?)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let prior = r.f64s(c)?;
                AuxModel::Transition(fit_aux_transition(&t, Some(&prior))?)
            }
            other => return Err(Error::Format(format!("unknown aux model kind {other:?}"))),
        };
        r.finish()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_rbm_conditional_is_one_half() {
        let rbm = AuxRbm {
            energy: EnergyParams::zeros(Dims::new(3, 2, 4), LabelMode::Multilabel),
            bias: BiasPair::zeros(Dims::new(3, 2, 4)),
        };
        let q = aux_cond(&rbm, &LabelVector::multilabel(vec![1, 0, 1]).unwrap()).unwrap();
        assert!(q.p_clean.iter().chain(&q.p_hidden).all(|&p| p == 0.5));
    }

    #[test]
    fn clean_posterior_ignores_hidden_bias() {
        let mut rbm = AuxRbm::init(Dims::new(3, 2, 4), LabelMode::Multilabel, 0.5, 3);
        let y = LabelVector::multilabel(vec![1, 1, 0]).unwrap();
        let before = aux_cond(&rbm, &y).unwrap();
        rbm.energy.c.fill(4.0);
        let after = aux_cond(&rbm, &y).unwrap();
        assert_eq!(before.p_clean, after.p_clean);
        assert_ne!(before.p_hidden, after.p_hidden);
    }

    #[test]
    fn transition_inversion_examples() {
        let id = fit_aux_transition(&Array2::eye(3), None).unwrap();
        for k in 0..3 {
            assert_eq!(id.posterior[[k, k]], 1.0);
        }

        let t = array![[0.7, 0.3], [0.3, 0.7]];
        let fit = fit_aux_transition(&t, None).unwrap();
        // brute force: joint over (clean, noisy) under a uniform prior, normalised per noisy
        let joint = |i: usize, j: usize| 0.5 * t[[i, j]];
        let z0 = joint(0, 0) + joint(1, 0);
        assert!((fit.posterior[[0, 0]] - joint(0, 0) / z0).abs() < 1e-12);
        assert!((fit.posterior[[0, 0]] - 0.7).abs() < 1e-12);

        let uniform = Array2::from_elem((4, 4), 0.25);
        let fit = fit_aux_transition(&uniform, None).unwrap();
        assert!(fit.posterior.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn prior_rescaling_does_not_change_posterior() {
        let t = array![[0.8, 0.2, 0.0], [0.1, 0.6, 0.3], [0.0, 0.5, 0.5]];
        let a = fit_aux_transition(&t, Some(&[0.2, 0.3, 0.5])).unwrap();
        let b = fit_aux_transition(&t, Some(&[2.0, 3.0, 5.0])).unwrap();
        assert!((&a.posterior - &b.posterior).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_non_stochastic_matrices() {
        assert!(fit_aux_transition(&array![[0.5, 0.4], [0.3, 0.7]], None).is_err());
        assert!(fit_aux_transition(&array![[1.2, -0.2], [0.3, 0.7]], None).is_err());
        assert!(fit_aux_transition(&array![[1.0, 0.0]], None).is_err());
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let data = vec![(
            LabelVector::multilabel(vec![1, 0, 1]).unwrap(),
            LabelVector::multilabel(vec![1, 0]).unwrap(),
        )];
        let cfg = AuxRbmConfig {
            hidden: 4,
            epochs: 0,
            seed: 17,
            ..AuxRbmConfig::default()
        };
        let rbm = train_aux_rbm(&data, &cfg).unwrap();
        assert_eq!(rbm, AuxRbm::init(Dims::new(3, 2, 4), LabelMode::Multilabel, 0.01, 17));
        assert!(train_aux_rbm(&[], &cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rbm = AuxModel::Rbm(AuxRbm::init(Dims::new(3, 2, 4), LabelMode::Multilabel, 0.3, 1));
        let p = dir.path().join("aux.ncrf");
        rbm.save(&p).unwrap();
        assert_eq!(AuxModel::load(&p).unwrap(), rbm);

        let tr = AuxModel::Transition(fit_aux_transition(&array![[0.7, 0.3], [0.3, 0.7]], None).unwrap());
        tr.save(&p).unwrap();
        assert_eq!(AuxModel::load(&p).unwrap(), tr);
    }
}
