//! The CRF over noisy labels `y`, clean labels `ŷ` and hidden units `h`:
//! the quadratic energy and its exact factorial conditionals.
//!
//! ```text
//! E(y, ŷ, h, x) = −a(x)ᵀŷ − b(x)ᵀy − cᵀh − ŷᵀW y − hᵀW′y
//! ```
//!
//! `ŷ` and `h` only touch `y`, so the graph is bipartite between `y` and
//! `(ŷ, h)` and both block conditionals factorize.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::math::{sigmoid, softmax_into};

/// Sizes of the noisy (`N`), clean (`C`) and hidden (`H`) layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub noisy: usize,
    pub clean: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn new(noisy: usize, clean: usize, hidden: usize) -> Self {
        Self {
            noisy,
            clean,
            hidden,
        }
    }

    pub fn total(&self) -> usize {
        self.noisy + self.clean + self.hidden
    }
}

/// The x-independent CRF parameters `c`, `W` (C×N) and `W′` (H×N).
///
/// The x-dependent biases `a_φ(x)`, `b_φ(x)` come from a
/// [`FeatureNet`](crate::net::FeatureNet) as a [`BiasPair`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub dims: Dims,
    pub mode: LabelMode,
    pub c: Array1<f64>,
    pub w: Array2<f64>,
    pub wp: Array2<f64>,
}

/// Per-instance biases on the clean (`a`, length C) and noisy (`b`, length N) labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl BiasPair {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            a: vec![0.0; dims.clean],
            b: vec![0.0; dims.noisy],
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        check_len("clean bias a", dims.clean, self.a.len())?;
        check_len("noisy bias b", dims.noisy, self.b.len())?;
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bias pair".into()));
        }
        Ok(())
    }
}

/// Factorial distribution over `(ŷ, h)`: independent Bernoulli units, or a
/// categorical over the clean units in multiclass mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorialPosterior {
    pub p_clean: Vec<f64>,
    pub p_hidden: Vec<f64>,
    pub mode: LabelMode,
}

impl FactorialPosterior {
    pub fn new(p_clean: Vec<f64>, p_hidden: Vec<f64>, mode: LabelMode) -> Result<Self> {
        let post = Self {
            p_clean,
            p_hidden,
            mode,
        };
        post.validate()?;
        Ok(post)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .p_clean
            .iter()
            .chain(&self.p_hidden)
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidArgument(
                "posterior probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.mode == LabelMode::Multiclass {
            let total: f64 = self.p_clean.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "multiclass clean posterior sums to {total}"
                )));
            }
        }
        Ok(())
    }

    /// Builds the posterior from per-unit logits: sigmoids, or a softmax over
    /// the clean units in multiclass mode.
    pub fn from_logits(clean_logits: &[f64], hidden_logits: &[f64], mode: LabelMode) -> Self {
        let p_clean = match mode {
            LabelMode::Multilabel => clean_logits.iter().map(|&l| sigmoid(l)).collect(),
            LabelMode::Multiclass => {
                let mut p = vec![0.0; clean_logits.len()];
                softmax_into(clean_logits, &mut p);
                p
            }
        };
        Self {
            p_clean,
            p_hidden: hidden_logits.iter().map(|&l| sigmoid(l)).collect(),
            mode,
        }
    }

    /// Probability of one joint configuration under the factorial distribution.
    pub fn prob(&self, yhat: &[u8], h: &[u8]) -> f64 {
        let clean = match self.mode {
            LabelMode::Multilabel => unit_product(&self.p_clean, yhat),
            LabelMode::Multiclass => match yhat.iter().position(|&b| b == 1) {
                Some(k) if yhat.iter().filter(|&&b| b == 1).count() == 1 => self.p_clean[k],
                _ => 0.0,
            },
        };
        clean * unit_product(&self.p_hidden, h)
    }

    /// Index of the most probable clean unit.
    pub fn argmax_clean(&self) -> usize {
        argmax(&self.p_clean)
    }
}

fn unit_product(p: &[f64], bits: &[u8]) -> f64 {
    p.iter()
        .zip(bits)
        .map(|(&p, &b)| if b == 1 { p } else { 1.0 - p })
        .product()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl EnergyParams {
    pub fn zeros(dims: Dims, mode: LabelMode) -> Self {
        Self {
            dims,
            mode,
            c: Array1::zeros(dims.hidden),
            w: Array2::zeros((dims.clean, dims.noisy)),
            wp: Array2::zeros((dims.hidden, dims.noisy)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        check_len("hidden bias c", d.hidden, self.c.len())?;
        check_len("W rows", d.clean, self.w.nrows())?;
        check_len("W columns", d.noisy, self.w.ncols())?;
        check_len("W' rows", d.hidden, self.wp.nrows())?;
        check_len("W' columns", d.noisy, self.wp.ncols())?;
        if self
            .c
            .iter()
            .chain(self.w.iter())
            .chain(self.wp.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("energy parameters".into()));
        }
        Ok(())
    }

    fn check_state(&self, bias: &BiasPair, y: &[u8], yhat: &[u8], h: &[u8]) -> Result<()> {
        bias.validate(self.dims)?;
        check_len("noisy labels y", self.dims.noisy, y.len())?;
        check_len("clean labels ŷ", self.dims.clean, yhat.len())?;
        check_len("hidden units h", self.dims.hidden, h.len())?;
        Ok(())
    }

    /// `a + W y`, written into `out`.
    pub fn clean_logits_into(&self, a: &[f64], y: &[u8], out: &mut [f64]) {
        for (i, (o, row)) in out.iter_mut().zip(self.w.rows()).enumerate() {
            let mut s = a[i];
            for (&wij, &yj) in row.iter().zip(y) {
                if yj == 1 {
                    s += wij;
                }
            }
            *o = s;
        }
    }

    /// `c + W′ y`, written into `out`.
    pub fn hidden_logits_into(&self, y: &[u8], out: &mut [f64]) {
        for ((o, row), &ck) in out.iter_mut().zip(self.wp.rows()).zip(&self.c) {
            let mut s = ck;
            for (&wkj, &yj) in row.iter().zip(y) {
                if yj == 1 {
                    s += wkj;
                }
            }
            *o = s;
        }
    }

    /// `b + Wᵀŷ + W′ᵀh`, written into `out`.
    pub fn noisy_logits_into(&self, b: &[f64], yhat: &[u8], h: &[u8], out: &mut [f64]) {
        out.copy_from_slice(b);
        for (row, &on) in self.w.rows().into_iter().zip(yhat) {
            if on == 1 {
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
        }
        for (row, &on) in self.wp.rows().into_iter().zip(h) {
            if on == 1 {
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
        }
    }

    pub fn clean_logits(&self, a: &[f64], y: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.clean];
        self.clean_logits_into(a, y, &mut out);
        out
    }

    pub fn hidden_logits(&self, y: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.hidden];
        self.hidden_logits_into(y, &mut out);
        out
    }

    pub fn noisy_logits(&self, b: &[f64], yhat: &[u8], h: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.noisy];
        self.noisy_logits_into(b, yhat, h, &mut out);
        out
    }

    /// Energy on raw bit slices; dimensions are assumed checked.
    pub(crate) fn energy_raw(&self, bias: &BiasPair, y: &[u8], yhat: &[u8], h: &[u8]) -> f64 {
        let mut e = 0.0;
        for (i, &on) in yhat.iter().enumerate() {
            if on == 1 {
                e -= bias.a[i];
                for (&wij, &yj) in self.w.row(i).iter().zip(y) {
                    if yj == 1 {
                        e -= wij;
                    }
                }
            }
        }
        for (j, &on) in y.iter().enumerate() {
            if on == 1 {
                e -= bias.b[j];
            }
        }
        for (k, &on) in h.iter().enumerate() {
            if on == 1 {
                e -= self.c[k];
                for (&wkj, &yj) in self.wp.row(k).iter().zip(y) {
                    if yj == 1 {
                        e -= wkj;
                    }
                }
            }
        }
        e
    }
}

/// `E(y, ŷ, h, x) = −aᵀŷ − bᵀy − cᵀh − ŷᵀW y − hᵀW′y`.
pub fn energy(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    yhat: &LabelVector,
    h: &LabelVector,
) -> Result<f64> {
    params.check_state(bias, y.bits(), yhat.bits(), h.bits())?;
    Ok(params.energy_raw(bias, y.bits(), yhat.bits(), h.bits()))
}

/// `−E`, the unnormalized log-probability of a configuration.
pub fn unnormalized_log_joint(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
    yhat: &LabelVector,
    h: &LabelVector,
) -> Result<f64> {
    energy(params, bias, y, yhat, h).map(|e| -e)
}

/// Exact `p(ŷ, h | y, x)`: `σ(a_i + W_i y)` per clean unit (softmax in
/// multiclass mode) and `σ(c_j + W′_j y)` per hidden unit.
pub fn cond_clean_hidden(
    params: &EnergyParams,
    bias: &BiasPair,
    y: &LabelVector,
) -> Result<FactorialPosterior> {
    bias.validate(params.dims)?;
    check_len("noisy labels y", params.dims.noisy, y.len())?;
    let clean = params.clean_logits(&bias.a, y.bits());
    let hidden = params.hidden_logits(y.bits());
    Ok(FactorialPosterior::from_logits(&clean, &hidden, params.mode))
}

/// Exact `p(y_j = 1 | ŷ, h, x) = σ(b_j + (Wᵀŷ)_j + (W′ᵀh)_j)`; a softmax over
/// the noisy classes in multiclass mode.
pub fn cond_noisy(
    params: &EnergyParams,
    bias: &BiasPair,
    yhat: &LabelVector,
    h: &LabelVector,
) -> Result<Vec<f64>> {
    bias.validate(params.dims)?;
    check_len("clean labels ŷ", params.dims.clean, yhat.len())?;
    check_len("hidden units h", params.dims.hidden, h.len())?;
    let logits = params.noisy_logits(&bias.b, yhat.bits(), h.bits());
    Ok(match params.mode {
        LabelMode::Multilabel => logits.iter().map(|&l| sigmoid(l)).collect(),
        LabelMode::Multiclass => {
            let mut p = vec![0.0; logits.len()];
            softmax_into(&logits, &mut p);
            p
        }
    })
}
