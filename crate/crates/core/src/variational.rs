//! The regularised variational distribution `q`: a per-unit, α-weighted
//! geometric mean of the model conditional and the auxiliary conditional.

use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxModel;
use crate::crf::{BiasPair, EnergyParams, FactorialPosterior};
use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::math::{sigmoid, xlogy_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    /// `α` moves linearly in the epoch index.
    Linear,
    /// `ln(1 + α)` moves linearly in the epoch index.
    Exponential,
}

/// Annealing schedule for the auxiliary weight `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_epochs: usize,
    #[serde(default = "default_shape")]
    pub shape: ScheduleShape,
}

fn default_shape() -> ScheduleShape {
    ScheduleShape::Linear
}

impl AlphaSchedule {
    pub fn new(start: f64, end: f64, anneal_epochs: usize, shape: ScheduleShape) -> Result<Self> {
        let s = Self {
            start,
            end,
            anneal_epochs,
            shape,
        };
        s.validate()?;
        Ok(s)
    }

    /// A schedule that holds `α` fixed.
    pub fn constant(alpha: f64) -> Self {
        Self {
            start: alpha,
            end: alpha,
            anneal_epochs: 1,
            shape: ScheduleShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.end < 0.0 || self.start < self.end {
            return Err(Error::InvalidArgument(format!(
                "alpha schedule needs start >= end >= 0, got start {} end {}",
                self.start, self.end
            )));
        }
        if self.anneal_epochs == 0 {
            return Err(Error::InvalidArgument("anneal_epochs must be positive".into()));
        }
        Ok(())
    }

    /// `α` for a zero-based epoch index. Equals `end` from `anneal_epochs` on.
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.anneal_epochs {
            return self.end;
        }
        let frac = epoch as f64 / self.anneal_epochs as f64;
        match self.shape {
            ScheduleShape::Linear => self.start + (self.end - self.start) * frac,
            ScheduleShape::Exponential => {
                let (ls, le) = (self.start.ln_1p(), self.end.ln_1p());
                (ls + (le - ls) * frac).exp_m1().clamp(self.end, self.start)
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

/// `(model + α·aux) / (α + 1)`, written so `α = ∞` selects the aux logit.
pub fn blend_logit(model: f64, aux: f64, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        aux
    } else {
        (model + alpha * aux) / (alpha + 1.0)
    }
}

fn blend_all(model: &mut [f64], aux: &[f64], alpha: f64) {
    for (m, &a) in model.iter_mut().zip(aux) {
        *m = blend_logit(*m, a, alpha);
    }
}

fn check_aux(params: &EnergyParams, aux: &AuxModel) -> Result<()> {
    check_len("aux noisy units", params.dims.noisy, aux.noisy_dim())?;
    check_len("aux clean units", params.dims.clean, aux.clean_dim())?;
    if aux.mode() != params.mode {
        return Err(Error::InvalidArgument(
            "aux model and CRF use different label modes".into(),
        ));
    }
    Ok(())
}

/// Blended logits for `q(ŷ, h | y, x)` before squashing.
pub fn q_noisy_logits(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_alpha(alpha)?;
    bias.validate(params.dims)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    check_aux(params, aux)?;
    let mut clean = params.clean_logits(&bias.a, y.bits());
    if alpha > 0.0 {
        blend_all(&mut clean, &aux.clean_scores(y)?, alpha);
    }
    Ok((clean, q_hidden_logits(params, aux, y, alpha)))
}

fn q_hidden_logits(params: &EnergyParams, aux: &AuxModel, y: &LabelVector, alpha: f64) -> Vec<f64> {
    let mut hidden = params.hidden_logits(y.bits());
    if alpha > 0.0 && aux.hidden_dim() == params.dims.hidden {
        if let Some(aux_h) = aux.hidden_logits(y) {
            blend_all(&mut hidden, &aux_h, alpha);
        }
    }
    hidden
}

/// `q(ŷ, h | y, x) ∝ [p_θ(ŷ, h | y, x) · p_aux(ŷ, h | y)^α]^{1/(α+1)}` per unit.
///
/// Hidden units are blended only when the aux model has exactly as many
/// hidden units as the CRF; otherwise they follow the model conditional.
pub fn q_noisy(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
) -> Result<FactorialPosterior> {
    let (clean, hidden) = q_noisy_logits(params, bias, aux, y, alpha)?;
    Ok(FactorialPosterior::from_logits(&clean, &hidden, params.mode))
}

/// `q(h | y)` for the clean-set bound, blended like [`q_noisy`].
pub fn q_clean(
    params: &EnergyParams,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    check_aux(params, aux)?;
    Ok(q_hidden_logits(params, aux, y, alpha)
        .into_iter()
        .map(sigmoid)
        .collect())
}

fn bernoulli_kl(q: f64, p: f64) -> f64 {
    xlogy_ratio(q, p) + xlogy_ratio(1.0 - q, 1.0 - p)
}

fn block_kl(q: &[f64], p: &[f64], mode: LabelMode) -> f64 {
    match mode {
        LabelMode::Multilabel => q.iter().zip(p).map(|(&a, &b)| bernoulli_kl(a, b)).sum(),
        LabelMode::Multiclass => q.iter().zip(p).map(|(&a, &b)| xlogy_ratio(a, b)).sum(),
    }
}

/// `KL[q ‖ p]` for two factorial distributions with the same shape.
pub fn factorial_kl(q: &FactorialPosterior, p: &FactorialPosterior) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    check_len("clean units", q.p_clean.len(), p.p_clean.len())?;
    check_len("hidden units", q.p_hidden.len(), p.p_hidden.len())?;
    Ok(block_kl(&q.p_clean, &p.p_clean, q.mode)
        + block_kl(&q.p_hidden, &p.p_hidden, LabelMode::Multilabel))
}

/// `KL[q ‖ p_model] + α KL[q ‖ p_aux]`.
///
/// When `p_aux` has a different number of hidden units from `q`, only its
/// clean-unit factor enters the auxiliary term.
pub fn kl_objective(
    q: &FactorialPosterior,
    p_model: &FactorialPosterior,
    p_aux: &FactorialPosterior,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let model = factorial_kl(q, p_model)?;
    p_aux.validate()?;
    check_len("aux clean units", q.p_clean.len(), p_aux.p_clean.len())?;
    let mut aux = block_kl(&q.p_clean, &p_aux.p_clean, q.mode);
    if p_aux.p_hidden.len() == q.p_hidden.len() {
        aux += block_kl(&q.p_hidden, &p_aux.p_hidden, LabelMode::Multilabel);
    }
    Ok(if alpha == 0.0 { model } else { model + alpha * aux })
}
