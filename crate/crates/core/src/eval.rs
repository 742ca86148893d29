//! Metrics (accuracy, recovery accuracy, mAP) and the supervised comparison
//! baselines: plain cross-entropy and forward/backward loss correction.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::auxiliary::check_row_stochastic;
use crate::crf::argmax;
use crate::data::TrainingView;
use crate::error::{check_len, Error, Result};
use crate::labels::{LabelMode, LabelVector};
use crate::math::{sigmoid, softmax};
use crate::net::{FeatureNet, NetKind};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::rng::{stream, Domain};

/// Summary metrics, all in percent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub prediction_accuracy: Option<f64>,
    pub recovery_accuracy: Option<f64>,
    pub map: Option<f64>,
    pub recovery_map: Option<f64>,
    /// Per-class accuracy (multiclass) or average precision (multilabel) of
    /// the prediction metric.
    pub per_class: Vec<Option<f64>>,
}

fn check_rows(scores: &[Vec<f64>], labels: &[&LabelVector]) -> Result<usize> {
    check_len("label rows", scores.len(), labels.len())?;
    let width = labels.first().map(|l| l.len()).unwrap_or(0);
    for (s, l) in scores.iter().zip(labels) {
        check_len("score width", l.len(), s.len())?;
        check_len("label width", width, l.len())?;
    }
    Ok(width)
}

/// Percentage of rows whose argmax score is the labelled class.
pub fn accuracy(scores: &[Vec<f64>], labels: &[&LabelVector]) -> Result<f64> {
    check_rows(scores, labels)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset("accuracy needs at least one row"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| l.class() == Some(argmax(s)))
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Per-class accuracy (`None` for classes without rows).
pub fn per_class_accuracy(scores: &[Vec<f64>], labels: &[&LabelVector]) -> Result<Vec<Option<f64>>> {
    let width = check_rows(scores, labels)?;
    let mut hits = vec![0usize; width];
    let mut totals = vec![0usize; width];
    for (s, l) in scores.iter().zip(labels) {
        if let Some(k) = l.class() {
            totals[k] += 1;
            if argmax(s) == k {
                hits[k] += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect())
}

/// Recovery accuracy of `q` on `D_N` against the hidden clean labels: argmax
/// agreement in multiclass mode, exact set agreement after thresholding at
/// 0.5 in multilabel mode.
pub fn recovery_accuracy(q: &[Vec<f64>], hidden: &[&LabelVector]) -> Result<f64> {
    check_rows(q, hidden)?;
    if hidden.is_empty() {
        return Err(Error::EmptyDataset("recovery accuracy needs clean labels"));
    }
    let hits = q
        .iter()
        .zip(hidden)
        .filter(|(p, l)| match l.mode() {
            LabelMode::Multiclass => l.class() == Some(argmax(p)),
            LabelMode::Multilabel => p.iter().zip(l.bits()).all(|(&pi, &b)| (pi >= 0.5) == (b == 1)),
        })
        .count();
    Ok(100.0 * hits as f64 / hidden.len() as f64)
}

/// Non-interpolated average precision of one ranking: the mean of precision
/// at the rank of each positive. Ties are broken by position (instance order).
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Per-class average precision in percent (`None` for classes without positives).
pub fn per_class_average_precision(scores: &[Vec<f64>], labels: &[&LabelVector]) -> Result<Vec<Option<f64>>> {
    let width = check_rows(scores, labels)?;
    Ok((0..width)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let p: Vec<bool> = labels.iter().map(|l| l.get(k)).collect();
            average_precision(&s, &p).map(|ap| 100.0 * ap)
        })
        .collect())
}

/// Unweighted mean of per-class average precision, in percent. Classes with
/// no positive rows are excluded with a warning.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[&LabelVector]) -> Result<f64> {
    let per = per_class_average_precision(scores, labels)?;
    let skipped = per.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("mAP: {skipped} class(es) without positives excluded");
    }
    let used: Vec<f64> = per.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyDataset("no class has a positive label"));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Probability floor used by the forward-corrected loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−log (Tᵀ p)[noisy]`.
pub fn forward_corrected_loss(probs: &[f64], noisy: usize, t: &Array2<f64>) -> Result<f64> {
    check_row_stochastic(t)?;
    check_len("model probabilities", t.nrows(), probs.len())?;
    if noisy >= probs.len() {
        return Err(Error::InvalidArgument(format!("noisy class {noisy} out of range")));
    }
    let mixed: f64 = probs.iter().enumerate().map(|(i, &p)| t[[i, noisy]] * p).sum();
    if mixed < PROB_FLOOR {
        log::debug!("forward correction clamped probability {mixed:e}");
        return Ok(-PROB_FLOOR.ln());
    }
    Ok(-mixed.ln())
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn invert(t: &Array2<f64>) -> Result<Array2<f64>> {
    let n = t.nrows();
    if t.ncols() != n {
        return Err(Error::InvalidArgument("only square matrices can be inverted".into()));
    }
    let mut a = t.clone();
    let mut inv = Array2::eye(n);
    let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        if a[[pivot, col]].abs() < 1e-12 * scale {
            return Err(Error::Singular);
        }
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let d = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                if f != 0.0 {
                    for k in 0..n {
                        a[[r, k]] -= f * a[[col, k]];
                        inv[[r, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
    }
    Ok(inv)
}

/// `(T⁻¹ ℓ)[noisy]` for the vector `ℓ` of per-class cross-entropy losses.
pub fn backward_corrected_loss(per_class_losses: &[f64], noisy: usize, t: &Array2<f64>) -> Result<f64> {
    let inv = invert(t)?;
    check_len("per-class losses", t.nrows(), per_class_losses.len())?;
    if noisy >= per_class_losses.len() {
        return Err(Error::InvalidArgument(format!("noisy class {noisy} out of range")));
    }
    Ok(inv.row(noisy).iter().zip(per_class_losses).map(|(a, l)| a * l).sum())
}

/// Loss used by [`train_supervised`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineLoss {
    CrossEntropy,
    Forward,
    Backward,
}

/// Which labels and which network head a supervised run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Clean labels of `D_C` through the clean head `a_φ`.
    Clean,
    /// Noisy labels through the clean head (multiclass baselines).
    NoisyAsClean,
    /// Noisy labels through the noisy head `b_φ`.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub net: NetKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            net: NetKind::Mlp1 { hidden: 64 },
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

/// Upstream gradient (ascent direction, i.e. minus the loss gradient) of one
/// example's loss with respect to its logits.
pub fn logit_ascent(
    logits: &[f64],
    label: &LabelVector,
    loss: BaselineLoss,
    t: Option<&Array2<f64>>,
    t_inv: Option<&Array2<f64>>,
) -> Result<(f64, Vec<f64>)> {
    check_len("logits", label.len(), logits.len())?;
    match label.mode() {
        LabelMode::Multilabel => {
            if loss != BaselineLoss::CrossEntropy {
                return Err(Error::InvalidArgument(
                    "loss correction is defined for multiclass labels only".into(),
                ));
            }
            let mut value = 0.0;
            let g = logits
                .iter()
                .zip(label.bits())
                .map(|(&l, &y)| {
                    let p = sigmoid(l);
                    value -= if y == 1 {
                        crate::math::log_sigmoid(l)
                    } else {
                        crate::math::log_sigmoid(-l)
                    };
                    y as f64 - p
                })
                .collect();
            Ok((value, g))
        }
        LabelMode::Multiclass => {
            let k = label.class().expect("one-hot");
            let p = softmax(logits);
            match loss {
                BaselineLoss::CrossEntropy => {
                    let g = p.iter().enumerate().map(|(j, &pj)| f64::from(j == k) - pj).collect();
                    Ok((-p[k].max(f64::MIN_POSITIVE).ln(), g))
                }
                BaselineLoss::Forward => {
                    let t = t.ok_or_else(|| Error::InvalidArgument("forward loss needs T".into()))?;
                    let mixed: f64 = (0..p.len()).map(|i| t[[i, k]] * p[i]).sum::<f64>().max(PROB_FLOOR);
                    // dL/dp_i = −T[i,k]/mixed; chain through the softmax
                    let dl: Vec<f64> = (0..p.len()).map(|i| -t[[i, k]] / mixed).collect();
                    let avg: f64 = dl.iter().zip(&p).map(|(d, q)| d * q).sum();
                    let g = p.iter().zip(&dl).map(|(&pj, &dj)| -(pj * (dj - avg))).collect();
                    Ok((-mixed.ln(), g))
                }
                BaselineLoss::Backward => {
                    let inv = t_inv.ok_or_else(|| Error::InvalidArgument("backward loss needs T".into()))?;
                    let row = inv.row(k);
                    let row_sum: f64 = row.sum();
                    let value = row
                        .iter()
                        .zip(&p)
                        .map(|(&a, &pj)| -a * pj.max(f64::MIN_POSITIVE).ln())
                        .sum();
                    let g = p.iter().zip(row).map(|(&pj, &a)| a - pj * row_sum).collect();
                    Ok((value, g))
                }
            }
        }
    }
}

/// A trained supervised classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: FeatureNet,
    pub mode: LabelMode,
    pub head: Target,
}

impl Classifier {
    /// Per-label probabilities for the head that was trained.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(x)?;
        let logits = if self.head == Target::Noisy { out.b } else { out.a };
        Ok(match self.mode {
            LabelMode::Multiclass => softmax(&logits),
            LabelMode::Multilabel => logits.into_iter().map(sigmoid).collect(),
        })
    }
}

/// One epoch of minibatch training of `net` on `(id, label)` pairs.
/// Returns the mean loss.
#[allow(clippy::too_many_arguments)]
pub fn supervised_epoch(
    net: &mut FeatureNet,
    opt: &mut Optimizer,
    view: &TrainingView<'_>,
    rows: &[(usize, LabelVector)],
    head: Target,
    loss: BaselineLoss,
    t: Option<&Array2<f64>>,
    config: &SupervisedConfig,
    epoch: usize,
) -> Result<f64> {
    let t_inv = match (loss, t) {
        (BaselineLoss::Backward, Some(t)) => Some(invert(t)?),
        _ => None,
    };
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut stream(config.seed, Domain::Shuffle, &[epoch as u64, 0xCE]));
    let mut total = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for batch in order.chunks(config.batch_size.max(1)) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let w = 1.0 / batch.len() as f64;
        for &r in batch {
            let (id, label) = &rows[r];
            let x = view.features(*id);
            let out = net.forward(&x)?;
            let logits = if head == Target::Noisy { &out.b } else { &out.a };
            let (value, g) = logit_ascent(logits, label, loss, t, t_inv.as_ref())?;
            total += value;
            let zeros_a = vec![0.0; net.clean_dim];
            let zeros_b = vec![0.0; net.noisy_dim];
            if head == Target::Noisy {
                net.backward_into(&x, &zeros_a, &g, w, &mut grad)?;
            } else {
                net.backward_into(&x, &g, &zeros_b, w, &mut grad)?;
            }
        }
        clip_global_norm(&mut grad, config.grad_clip);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("supervised gradient in epoch {epoch}")));
        }
        opt.step(&mut net.params, &grad)?;
    }
    Ok(total / rows.len().max(1) as f64)
}

/// Trains a classifier on the rows of `ids` with the chosen labels and loss.
/// `observer` runs after every epoch.
pub fn train_supervised(
    view: &TrainingView<'_>,
    ids: &[usize],
    head: Target,
    loss: BaselineLoss,
    t: Option<&Array2<f64>>,
    config: &SupervisedConfig,
    mut observer: impl FnMut(usize, &Classifier, f64),
) -> Result<Classifier> {
    let rows: Vec<(usize, LabelVector)> = ids
        .iter()
        .map(|&i| {
            let label = match head {
                Target::Clean => view
                    .clean(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("row {i} has no visible clean label"))),
                Target::Noisy | Target::NoisyAsClean => Ok(view.noisy(i).clone()),
            };
            label.map(|l| (i, l))
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset("supervised training needs rows"));
    }
    if head == Target::NoisyAsClean && view.noisy_dim() != view.clean_dim() {
        return Err(Error::InvalidArgument(
            "noisy labels only fit the clean head when N equals C".into(),
        ));
    }
    let mut net = FeatureNet::new(
        config.net,
        view.input_dim(),
        view.clean_dim().max(1),
        view.noisy_dim(),
        true,
        config.seed,
    )?;
    let mut opt = Optimizer::new(config.optimizer, net.num_params())?;
    let mut clf = Classifier {
        net: net.clone(),
        mode: view.mode(),
        head,
    };
    for epoch in 0..config.epochs {
        let loss_value = supervised_epoch(&mut net, &mut opt, view, &rows, head, loss, t, config, epoch)?;
        clf.net = net.clone();
        observer(epoch, &clf, loss_value);
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_computed_average_precision() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn forward_loss_examples() {
        let t = array![[0.7, 0.3], [0.3, 0.7]];
        let l = forward_corrected_loss(&[1.0, 0.0], 0, &t).unwrap();
        assert!((l - 0.356_674_943_938_732_4).abs() < 1e-12);
        let eye = Array2::eye(3);
        let p = [0.2, 0.5, 0.3];
        assert_eq!(forward_corrected_loss(&p, 1, &eye).unwrap(), -(0.5f64).ln());
    }

    #[test]
    fn backward_loss_rejects_singular() {
        let t = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(matches!(backward_corrected_loss(&[1.0, 2.0], 0, &t), Err(Error::Singular)));
        let eye = Array2::eye(2);
        assert_eq!(backward_corrected_loss(&[1.5, 2.5], 1, &eye).unwrap(), 2.5);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let t = array![[0.8, 0.2, 0.0], [0.1, 0.6, 0.3], [0.0, 0.5, 0.5]];
        let inv = invert(&t).unwrap();
        let prod = t.dot(&inv);
        for ((i, j), v) in prod.indexed_iter() {
            assert!((v - f64::from(i == j)).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let t = array![[0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]];
        let inv = invert(&t).unwrap();
        let logits = [0.3, -1.2, 0.8];
        let label = LabelVector::one_hot(3, 1).unwrap();
        for loss in [BaselineLoss::CrossEntropy, BaselineLoss::Forward, BaselineLoss::Backward] {
            let (_, g) = logit_ascent(&logits, &label, loss, Some(&t), Some(&inv)).unwrap();
            for j in 0..3 {
                let h = 1e-6;
                let mut up = logits;
                let mut dn = logits;
                up[j] += h;
                dn[j] -= h;
                let fu = logit_ascent(&up, &label, loss, Some(&t), Some(&inv)).unwrap().0;
                let fd = logit_ascent(&dn, &label, loss, Some(&t), Some(&inv)).unwrap().0;
                let numeric = -(fu - fd) / (2.0 * h);
                assert!((numeric - g[j]).abs() < 1e-6, "{loss:?} unit {j}: {numeric} vs {}", g[j]);
            }
        }
    }
}
