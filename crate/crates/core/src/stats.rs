use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::crf::Dims;

/// Expectations of the energy's sufficient statistics: `E[ŷ]`, `E[y]`, `E[h]`,
/// `E[ŷyᵀ]` and `E[hyᵀ]`.
///
/// The gradient of `−E` with respect to `(a, b, c, W, W′)` is exactly
/// `(ŷ, y, h, ŷyᵀ, hyᵀ)`, so a difference of two of these is a parameter
/// gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub hidden: Vec<f64>,
    pub clean_noisy: Array2<f64>,
    pub hidden_noisy: Array2<f64>,
}

impl SuffStats {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            clean: vec![0.0; dims.clean],
            noisy: vec![0.0; dims.noisy],
            hidden: vec![0.0; dims.hidden],
            clean_noisy: Array2::zeros((dims.clean, dims.noisy)),
            hidden_noisy: Array2::zeros((dims.hidden, dims.noisy)),
        }
    }

    /// Adds `weight · (clean, noisy, hidden, clean·noisyᵀ, hidden·noisyᵀ)`.
    pub fn add_outer(&mut self, clean: &[f64], noisy: &[f64], hidden: &[f64], weight: f64) {
        for (s, &v) in self.clean.iter_mut().zip(clean) {
            *s += weight * v;
        }
        for (s, &v) in self.noisy.iter_mut().zip(noisy) {
            *s += weight * v;
        }
        for (s, &v) in self.hidden.iter_mut().zip(hidden) {
            *s += weight * v;
        }
        for (mut row, &ci) in self.clean_noisy.rows_mut().into_iter().zip(clean) {
            if ci != 0.0 {
                let wc = weight * ci;
                for (s, &yj) in row.iter_mut().zip(noisy) {
                    *s += wc * yj;
                }
            }
        }
        for (mut row, &hk) in self.hidden_noisy.rows_mut().into_iter().zip(hidden) {
            if hk != 0.0 {
                let wh = weight * hk;
                for (s, &yj) in row.iter_mut().zip(noisy) {
                    *s += wh * yj;
                }
            }
        }
    }

    /// `self += weight · other`.
    pub fn add_scaled(&mut self, other: &SuffStats, weight: f64) {
        let axpy = |dst: &mut [f64], src: &[f64]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        };
        axpy(&mut self.clean, &other.clean);
        axpy(&mut self.noisy, &other.noisy);
        axpy(&mut self.hidden, &other.hidden);
        self.clean_noisy.scaled_add(weight, &other.clean_noisy);
        self.hidden_noisy.scaled_add(weight, &other.hidden_noisy);
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .clean
            .iter_mut()
            .chain(self.noisy.iter_mut())
            .chain(self.hidden.iter_mut())
        {
            *v *= factor;
        }
        self.clean_noisy *= factor;
        self.hidden_noisy *= factor;
    }

    /// `self − other`, the ascent direction when `self` is the positive phase.
    pub fn minus(&self, other: &SuffStats) -> SuffStats {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.clean
            .iter()
            .chain(&self.noisy)
            .chain(&self.hidden)
            .chain(self.clean_noisy.iter())
            .chain(self.hidden_noisy.iter())
            .copied()
    }

    pub fn max_abs_diff(&self, other: &SuffStats) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_products_accumulate() {
        let mut s = SuffStats::zeros(Dims::new(2, 2, 1));
        s.add_outer(&[0.5, 0.5], &[1.0, 0.0], &[0.25], 1.0);
        assert_eq!(s.clean_noisy.column(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(s.clean_noisy.column(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(s.hidden_noisy.row(0).to_vec(), vec![0.25, 0.0]);
        let d = s.minus(&s);
        assert_eq!(d.iter().fold(0.0, |m: f64, v| m.max(v.abs())), 0.0);
    }
}
