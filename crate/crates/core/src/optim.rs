//! Gradient-ascent optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Adaptive moments. `eps` is the denominator offset.
    AdaptiveMoment {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        learning_rate: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdaptiveMoment {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::AdaptiveMoment { learning_rate, .. } | OptimizerConfig::Sgd { learning_rate } => {
                learning_rate
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if let OptimizerConfig::AdaptiveMoment { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidArgument(
                    "adaptive-moment betas must lie in [0, 1) and eps must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer state; `step` ascends along the supplied gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        let moments = matches!(config, OptimizerConfig::AdaptiveMoment { .. });
        let len = if moments { num_params } else { 0 };
        Ok(Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("gradient", params.len(), grad.len())?;
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += learning_rate * g;
                }
            }
            OptimizerConfig::AdaptiveMoment {
                learning_rate,
                beta1,
                beta2,
                eps,
            } => {
                check_len("optimizer moments", params.len(), self.m.len())?;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] += learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grad` to global norm `max_norm` when it is longer; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adaptive_step_moves_by_scaled_sign() {
        let mut opt = Optimizer::new(
            OptimizerConfig::AdaptiveMoment {
                learning_rate: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            2,
        )
        .unwrap();
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_ascends() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { learning_rate: 0.5 }, 1).unwrap();
        let mut p = vec![1.0];
        opt.step(&mut p, &[2.0]).unwrap();
        assert_eq!(p, vec![2.0]);
        assert!(Optimizer::new(OptimizerConfig::Sgd { learning_rate: 0.0 }, 1).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, vec![0.1]);
    }
}
