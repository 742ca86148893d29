//! Brute-force ground truth for small models: partition functions, marginals,
//! conditionals, bound values and gradients by full enumeration.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxModel;
use crate::crf::{BiasPair, Dims, EnergyParams, FactorialPosterior};
use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::math::LogSumExp;
use crate::stats::SuffStats;
use crate::variational::factorial_kl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationLimit {
    pub max_total_units: usize,
}

impl Default for EnumerationLimit {
    fn default() -> Self {
        Self { max_total_units: 20 }
    }
}

impl EnumerationLimit {
    pub fn check(&self, dims: Dims) -> Result<()> {
        if dims.total() > self.max_total_units {
            return Err(Error::EnumerationLimit {
                units: dims.total(),
                limit: self.max_total_units,
            });
        }
        Ok(())
    }
}

/// All assignments of a block in lexicographic order (one-hot vectors only in
/// multiclass mode). An empty block has exactly one (empty) assignment.
pub fn assignments(len: usize, mode: LabelMode) -> Vec<Vec<u8>> {
    match mode {
        LabelMode::Multiclass if len > 0 => (0..len)
            .rev()
            .map(|k| {
                let mut v = vec![0u8; len];
                v[k] = 1;
                v
            })
            .collect(),
        _ => (0..1u64 << len)
            .map(|code| {
                (0..len)
                    .map(|i| ((code >> (len - 1 - i)) & 1) as u8)
                    .collect()
            })
            .collect(),
    }
}

fn as_f64(bits: &[u8]) -> Array1<f64> {
    bits.iter().map(|&b| b as f64).collect()
}

/// Energy recomputed with dense vector algebra.
fn dense_energy(params: &EnergyParams, bias: &BiasPair, y: &Array1<f64>, yhat: &Array1<f64>, h: &Array1<f64>) -> f64 {
    let a = Array1::from(bias.a.clone());
    let b = Array1::from(bias.b.clone());
    -a.dot(yhat) - b.dot(y) - params.c.dot(h) - yhat.dot(&params.w.dot(y)) - h.dot(&params.wp.dot(y))
}

struct Table {
    ys: Vec<Array1<f64>>,
    yhats: Vec<Array1<f64>>,
    hs: Vec<Array1<f64>>,
}

impl Table {
    fn new(params: &EnergyParams) -> Self {
        let d = params.dims;
        let conv = |v: Vec<Vec<u8>>| v.iter().map(|b| as_f64(b)).collect();
        Self {
            ys: conv(assignments(d.noisy, params.mode)),
            yhats: conv(assignments(d.clean, params.mode)),
            hs: conv(assignments(d.hidden, LabelMode::Multilabel)),
        }
    }
}

fn prepare(params: &EnergyParams, bias: &BiasPair, limit: EnumerationLimit) -> Result<Table> {
    params.validate()?;
    bias.validate(params.dims)?;
    limit.check(params.dims)?;
    Ok(Table::new(params))
}

/// `log Z_θ(x)` by running-max log-sum-exp over every configuration.
pub fn log_partition(params: &EnergyParams, bias: &BiasPair, limit: EnumerationLimit) -> Result<f64> {
    let t = prepare(params, bias, limit)?;
    let mut acc = LogSumExp::default();
    for y in &t.ys {
        for yhat in &t.yhats {
            for h in &t.hs {
                acc.add(-dense_energy(params, bias, y, yhat, h));
            }
        }
    }
    Ok(acc.value())
}

/// `Z_θ(x)` in the exponential domain.
pub fn partition(params: &EnergyParams, bias: &BiasPair, limit: EnumerationLimit) -> Result<f64> {
    Ok(log_partition(params, bias, limit)?.exp())
}

/// `Z_θ(x)` as a plain sum of `exp(−E)` in reverse enumeration order; an
/// independent accumulation route for cross-checking [`log_partition`].
pub fn partition_direct(params: &EnergyParams, bias: &BiasPair, limit: EnumerationLimit) -> Result<f64> {
    let t = prepare(params, bias, limit)?;
    let mut total = 0.0;
    for y in t.ys.iter().rev() {
        for yhat in t.yhats.iter().rev() {
            for h in t.hs.iter().rev() {
                total += (-dense_energy(params, bias, y, yhat, h)).exp();
            }
        }
    }
    Ok(total)
}

/// Exact `E_p[ŷ], E_p[y], E_p[h], E_p[ŷyᵀ], E_p[hyᵀ]` under `p_θ(y, ŷ, h | x)`.
pub fn exact_marginals(params: &EnergyParams, bias: &BiasPair, limit: EnumerationLimit) -> Result<SuffStats> {
    let t = prepare(params, bias, limit)?;
    let log_z = log_partition(params, bias, limit)?;
    let mut stats = SuffStats::zeros(params.dims);
    for y in &t.ys {
        for yhat in &t.yhats {
            for h in &t.hs {
                let p = (-dense_energy(params, bias, y, yhat, h) - log_z).exp();
                stats.add_outer(
                    yhat.as_slice().unwrap(),
                    y.as_slice().unwrap(),
                    h.as_slice().unwrap(),
                    p,
                );
            }
        }
    }
    Ok(stats)
}

/// `log p_θ(y | x)`.
pub fn log_prob_noisy(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    limit: EnumerationLimit,
) -> Result<f64> {
    let t = prepare(params, bias, limit)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    let yv = as_f64(y.bits());
    let mut acc = LogSumExp::default();
    for yhat in &t.yhats {
        for h in &t.hs {
            acc.add(-dense_energy(params, bias, &yv, yhat, h));
        }
    }
    Ok(acc.value() - log_partition(params, bias, limit)?)
}

/// `log p_θ(y, ŷ | x)`.
pub fn log_prob_pair(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    yhat: &LabelVector,
    limit: EnumerationLimit,
) -> Result<f64> {
    let t = prepare(params, bias, limit)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    check_len("clean labels", params.dims.clean, yhat.len())?;
    let (yv, cv) = (as_f64(y.bits()), as_f64(yhat.bits()));
    let mut acc = LogSumExp::default();
    for h in &t.hs {
        acc.add(-dense_energy(params, bias, &yv, &cv, h));
    }
    Ok(acc.value() - log_partition(params, bias, limit)?)
}

/// `p_θ(ŷ, h | y, x)` reduced to its per-unit marginals by enumeration.
pub fn exact_conditional(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    limit: EnumerationLimit,
) -> Result<FactorialPosterior> {
    let t = prepare(params, bias, limit)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    let yv = as_f64(y.bits());
    let mut acc = LogSumExp::default();
    for yhat in &t.yhats {
        for h in &t.hs {
            acc.add(-dense_energy(params, bias, &yv, yhat, h));
        }
    }
    let log_norm = acc.value();
    let d = params.dims;
    let mut p_clean = Array1::zeros(d.clean);
    let mut p_hidden = Array1::zeros(d.hidden);
    for yhat in &t.yhats {
        for h in &t.hs {
            let p = (-dense_energy(params, bias, &yv, yhat, h) - log_norm).exp();
            p_clean.scaled_add(p, yhat);
            p_hidden.scaled_add(p, h);
        }
    }
    // summed probabilities can overshoot 1 by an ulp
    Ok(FactorialPosterior {
        p_clean: p_clean.iter().map(|p| p.min(1.0)).collect(),
        p_hidden: p_hidden.iter().map(|p| p.min(1.0)).collect(),
        mode: params.mode,
    })
}

/// `p_θ(h | y, ŷ)` per hidden unit by enumeration.
pub fn exact_hidden_conditional(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    yhat: &LabelVector,
    limit: EnumerationLimit,
) -> Result<Vec<f64>> {
    let t = prepare(params, bias, limit)?;
    check_len("noisy labels", params.dims.noisy, y.len())?;
    check_len("clean labels", params.dims.clean, yhat.len())?;
    let (yv, cv) = (as_f64(y.bits()), as_f64(yhat.bits()));
    let mut acc = LogSumExp::default();
    for h in &t.hs {
        acc.add(-dense_energy(params, bias, &yv, &cv, h));
    }
    let log_norm = acc.value();
    let mut out = Array1::zeros(params.dims.hidden);
    for h in &t.hs {
        out.scaled_add((-dense_energy(params, bias, &yv, &cv, h) - log_norm).exp(), h);
    }
    Ok(out.iter().map(|p| p.min(1.0)).collect())
}

/// Per-unit geometric blend in probability space:
/// `q ∝ p^{1/(α+1)} · r^{α/(α+1)}` for each Bernoulli unit or the categorical block.
fn blend_probs(p: &[f64], r: &[f64], alpha: f64, categorical: bool) -> Vec<f64> {
    let (wp, wr) = (1.0 / (alpha + 1.0), alpha / (alpha + 1.0));
    let pow = |v: f64, w: f64| if w == 0.0 { 1.0 } else { v.powf(w) };
    if categorical {
        let raw: Vec<f64> = p.iter().zip(r).map(|(&a, &b)| pow(a, wp) * pow(b, wr)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    } else {
        p.iter()
            .zip(r)
            .map(|(&a, &b)| {
                let on = pow(a, wp) * pow(b, wr);
                let off = pow(1.0 - a, wp) * pow(1.0 - b, wr);
                on / (on + off)
            })
            .collect()
    }
}

/// The optimal factorial `q` for the noisy-instance bound, formed from the
/// enumerated model conditional and the aux conditional.
pub fn exact_q_noisy(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<FactorialPosterior> {
    let model = exact_conditional(params, bias, y, limit)?;
    let a = aux.cond(y)?;
    let categorical = params.mode == LabelMode::Multiclass;
    let p_clean = blend_probs(&model.p_clean, &a.p_clean, alpha, categorical);
    let p_hidden = if a.p_hidden.len() == model.p_hidden.len() {
        blend_probs(&model.p_hidden, &a.p_hidden, alpha, false)
    } else {
        model.p_hidden.clone()
    };
    Ok(FactorialPosterior {
        p_clean,
        p_hidden,
        mode: params.mode,
    })
}

fn aux_penalty(q: &FactorialPosterior, a: &FactorialPosterior, alpha: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let restricted;
    let (q_used, a_used) = if a.p_hidden.len() == q.p_hidden.len() {
        (q, a)
    } else {
        restricted = (
            FactorialPosterior {
                p_clean: q.p_clean.clone(),
                p_hidden: Vec::new(),
                mode: q.mode,
            },
            FactorialPosterior {
                p_clean: a.p_clean.clone(),
                p_hidden: Vec::new(),
                mode: a.mode,
            },
        );
        (&restricted.0, &restricted.1)
    };
    Ok(alpha * factorial_kl(q_used, a_used)?)
}

/// `U^aux = log p_θ(y|x) − KL[q ‖ p_θ(ŷ,h|y,x)] − α KL[q ‖ p_aux(ŷ,h|y)]` for a
/// given factorial `q`.
pub fn exact_bound_with_q(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
    q: &FactorialPosterior,
    limit: EnumerationLimit,
) -> Result<f64> {
    let log_py = log_prob_noisy(params, bias, y, limit)?;
    let model = exact_conditional(params, bias, y, limit)?;
    Ok(log_py - factorial_kl(q, &model)? - aux_penalty(q, &aux.cond(y)?, alpha)?)
}

/// `U^aux` at its optimal factorial `q`.
pub fn exact_bound(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<f64> {
    let q = exact_q_noisy(params, bias, aux, y, alpha, limit)?;
    exact_bound_with_q(params, bias, aux, y, alpha, &q, limit)
}

/// The optimal `q(h)` for the clean-instance bound.
pub fn exact_q_clean(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    yhat: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<Vec<f64>> {
    let model = exact_hidden_conditional(params, bias, y, yhat, limit)?;
    let a = aux.cond(y)?;
    Ok(if a.p_hidden.len() == model.len() {
        blend_probs(&model, &a.p_hidden, alpha, false)
    } else {
        model
    })
}

/// `L^aux = log p_θ(y, ŷ|x) − KL[q(h) ‖ p_θ(h|y,ŷ)] − α KL[q(h) ‖ p_aux(h|y)]` at the
/// optimal `q(h)`.
pub fn exact_clean_bound(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    yhat: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<f64> {
    let q_h = exact_q_clean(params, bias, aux, y, yhat, alpha, limit)?;
    let model_h = exact_hidden_conditional(params, bias, y, yhat, limit)?;
    let log_p = log_prob_pair(params, bias, y, yhat, limit)?;
    let hidden_only = |p: Vec<f64>| FactorialPosterior {
        p_clean: Vec::new(),
        p_hidden: p,
        mode: LabelMode::Multilabel,
    };
    let q = hidden_only(q_h);
    let mut value = log_p - factorial_kl(&q, &hidden_only(model_h))?;
    let a = aux.cond(y)?;
    if alpha > 0.0 && a.p_hidden.len() == q.p_hidden.len() {
        value -= alpha * factorial_kl(&q, &hidden_only(a.p_hidden))?;
    }
    Ok(value)
}

/// Gradient of [`exact_bound`] with respect to `(a, b, c, W, W′)`, packed as
/// [`SuffStats`]: positive statistics under `q` minus exact model moments.
pub fn exact_bound_gradient(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<SuffStats> {
    let q = exact_q_noisy(params, bias, aux, y, alpha, limit)?;
    let mut pos = SuffStats::zeros(params.dims);
    pos.add_outer(&q.p_clean, &y.to_f64(), &q.p_hidden, 1.0);
    Ok(pos.minus(&exact_marginals(params, bias, limit)?))
}

/// Gradient of [`exact_clean_bound`] with respect to `(a, b, c, W, W′)`.
pub fn exact_clean_bound_gradient(
    params: &EnergyParams,
    bias: &BiasPair,
    aux: &AuxModel,
    y: &LabelVector,
    yhat: &LabelVector,
    alpha: f64,
    limit: EnumerationLimit,
) -> Result<SuffStats> {
    let q_h = exact_q_clean(params, bias, aux, y, yhat, alpha, limit)?;
    let mut pos = SuffStats::zeros(params.dims);
    pos.add_outer(&yhat.to_f64(), &y.to_f64(), &q_h, 1.0);
    Ok(pos.minus(&exact_marginals(params, bias, limit)?))
}
