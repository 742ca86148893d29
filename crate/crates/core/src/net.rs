//! Small differentiable bias producers: `x ↦ (a_φ(x), b_φ(x))`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crf::BiasPair;
use crate::error::{check_len, Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetKind {
    Linear,
    /// One tanh hidden layer of the given width.
    Mlp1 { hidden: usize },
}

/// Bias producer with a flat parameter vector.
///
/// Layout: for `mlp1`, `W1 (hidden×D)`, `b1`; then the clean head
/// `A (C×K)`, `a0`; then either the noisy head `B (N×K)`, `b0` or, when
/// `emits_noisy_bias` is false, a free x-independent vector `b (N)`.
/// `K` is `D` for the linear net and `hidden` for `mlp1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub kind: NetKind,
    pub input_dim: usize,
    pub clean_dim: usize,
    pub noisy_dim: usize,
    pub emits_noisy_bias: bool,
    pub params: Vec<f64>,
}

/// Parameter gradient aligned with [`FeatureNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub norm: f64,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }
}

struct Layout {
    w1: usize,
    b1: usize,
    a_w: usize,
    a_0: usize,
    b_w: usize,
    b_0: usize,
    total: usize,
    feat: usize,
}

impl FeatureNet {
    fn layout(&self) -> Layout {
        Self::layout_for(self.kind, self.input_dim, self.clean_dim, self.noisy_dim, self.emits_noisy_bias)
    }

    fn layout_for(kind: NetKind, d: usize, c: usize, n: usize, emits: bool) -> Layout {
        let (hid, feat) = match kind {
            NetKind::Linear => (0, d),
            NetKind::Mlp1 { hidden } => (hidden, hidden),
        };
        let w1 = 0;
        let b1 = w1 + hid * d;
        let a_w = b1 + hid;
        let a_0 = a_w + c * feat;
        let b_w = a_0 + c;
        let b_0 = if emits { b_w + n * feat } else { b_w };
        Layout {
            w1,
            b1,
            a_w,
            a_0,
            b_w,
            b_0,
            total: b_0 + n,
            feat,
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, offsets zero.
    pub fn new(
        kind: NetKind,
        input_dim: usize,
        clean_dim: usize,
        noisy_dim: usize,
        emits_noisy_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || clean_dim == 0 || noisy_dim == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if let NetKind::Mlp1 { hidden: 0 } = kind {
            return Err(Error::InvalidArgument("mlp1 hidden width must be positive".into()));
        }
        let mut net = Self {
            kind,
            input_dim,
            clean_dim,
            noisy_dim,
            emits_noisy_bias,
            params: Vec::new(),
        };
        let l = net.layout();
        net.params = vec![0.0; l.total];
        let mut rng = stream(seed, Domain::ParamInit, &[0x4E]);
        let head_std = (1.0 / l.feat as f64).sqrt();
        let n1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, head_std).expect("valid std");
        for p in &mut net.params[l.w1..l.b1] {
            *p = n1.sample(&mut rng);
        }
        for p in &mut net.params[l.a_w..l.a_0] {
            *p = n2.sample(&mut rng);
        }
        if emits_noisy_bias {
            for p in &mut net.params[l.b_w..l.b_0] {
                *p = n2.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("network parameters", self.layout().total, self.params.len())?;
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len("features", self.input_dim, x.len())?;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("input features contain NaN".into()));
        }
        Ok(())
    }

    /// Hidden representation the heads read from: `x` itself or `tanh(W1 x + b1)`.
    fn features(&self, x: &[f64], l: &Layout) -> Vec<f64> {
        match self.kind {
            NetKind::Linear => x.to_vec(),
            NetKind::Mlp1 { hidden } => (0..hidden)
                .map(|k| {
                    let row = &self.params[l.w1 + k * self.input_dim..l.w1 + (k + 1) * self.input_dim];
                    (dot(row, x) + self.params[l.b1 + k]).tanh()
                })
                .collect(),
        }
    }

    fn heads(&self, f: &[f64], l: &Layout) -> BiasPair {
        let head = |w: usize, off: usize, rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|i| dot(&self.params[w + i * l.feat..w + (i + 1) * l.feat], f) + self.params[off + i])
                .collect()
        };
        let a = head(l.a_w, l.a_0, self.clean_dim);
        let b = if self.emits_noisy_bias {
            head(l.b_w, l.b_0, self.noisy_dim)
        } else {
            self.params[l.b_0..l.b_0 + self.noisy_dim].to_vec()
        };
        BiasPair { a, b }
    }

    pub fn forward(&self, x: &[f64]) -> Result<BiasPair> {
        self.check_input(x)?;
        let l = self.layout();
        Ok(self.heads(&self.features(x, &l), &l))
    }

    /// Parameter gradient of `grad_aᵀ a_φ(x) + grad_bᵀ b_φ(x)`.
    pub fn backward(&self, x: &[f64], grad_a: &[f64], grad_b: &[f64]) -> Result<Gradient> {
        let mut out = vec![0.0; self.params.len()];
        self.backward_into(x, grad_a, grad_b, 1.0, &mut out)?;
        Ok(Gradient::new(out))
    }

    /// Adds `scale ×` the gradient of [`FeatureNet::backward`] into `acc`.
    pub fn backward_into(
        &self,
        x: &[f64],
        grad_a: &[f64],
        grad_b: &[f64],
        scale: f64,
        acc: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        check_len("clean-bias gradient", self.clean_dim, grad_a.len())?;
        check_len("noisy-bias gradient", self.noisy_dim, grad_b.len())?;
        check_len("gradient buffer", self.params.len(), acc.len())?;
        let l = self.layout();
        let f = self.features(x, &l);
        let mut grad_f = vec![0.0; l.feat];
        let mut head = |w: usize, off: usize, g: &[f64], acc: &mut [f64]| {
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                let gi = gi * scale;
                acc[off + i] += gi;
                let row = w + i * l.feat;
                for (k, &fk) in f.iter().enumerate() {
                    acc[row + k] += gi * fk;
                    grad_f[k] += gi * self.params[row + k];
                }
            }
        };
        head(l.a_w, l.a_0, grad_a, acc);
        if self.emits_noisy_bias {
            head(l.b_w, l.b_0, grad_b, acc);
        } else {
            for (i, &g) in grad_b.iter().enumerate() {
                acc[l.b_0 + i] += scale * g;
            }
        }
        if let NetKind::Mlp1 { hidden } = self.kind {
            // grad_f already carries `scale`
            for k in 0..hidden {
                let pre = grad_f[k] * (1.0 - f[k] * f[k]);
                if pre == 0.0 {
                    continue;
                }
                acc[l.b1 + k] += pre;
                let row = l.w1 + k * self.input_dim;
                for (j, &xj) in x.iter().enumerate() {
                    acc[row + j] += pre * xj;
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
