//! Helpers shared by the integration tests: random small models and a
//! brute-force reference written independently of the library's oracle.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use noisycrf::auxiliary::{AuxModel, AuxRbm};
use noisycrf::data::{LabeledDataset, Split, TrainingView};
use noisycrf::net::NetKind;
use noisycrf::oracle::{self, EnumerationLimit};
use noisycrf::trainer::{batch_gradient, Minibatch, NegativePhaseKind, TrainConfig, TrainState, Variant};
use noisycrf::{BiasPair, Dims, EnergyParams, FactorialPosterior, LabelMode, LabelVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LIMIT: EnumerationLimit = EnumerationLimit { max_total_units: 20 };

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut impl Rng, scale: f64) -> f64 {
    rng.random_range(-scale..=scale)
}

/// Parameters and biases with entries uniform in `[-scale, scale]`.
pub fn random_model(dims: Dims, mode: LabelMode, scale: f64, rng: &mut impl Rng) -> (EnergyParams, BiasPair) {
    let mut p = EnergyParams::zeros(dims, mode);
    p.c = Array1::from_shape_fn(dims.hidden, |_| uniform(rng, scale));
    p.w = Array2::from_shape_fn((dims.clean, dims.noisy), |_| uniform(rng, scale));
    p.wp = Array2::from_shape_fn((dims.hidden, dims.noisy), |_| uniform(rng, scale));
    let bias = BiasPair {
        a: (0..dims.clean).map(|_| uniform(rng, scale)).collect(),
        b: (0..dims.noisy).map(|_| uniform(rng, scale)).collect(),
    };
    (p, bias)
}

pub fn random_aux(dims: Dims, mode: LabelMode, scale: f64, rng: &mut impl Rng) -> AuxModel {
    let (energy, bias) = random_model(dims, mode, scale, rng);
    AuxModel::Rbm(AuxRbm { energy, bias })
}

/// Every admissible bit vector of a block, in no particular order.
pub fn configs(len: usize, mode: LabelMode) -> Vec<Vec<u8>> {
    match mode {
        LabelMode::Multiclass if len > 0 => (0..len)
            .map(|k| (0..len).map(|j| u8::from(j == k)).collect())
            .collect(),
        _ => (0..1usize << len)
            .map(|m| (0..len).map(|j| ((m >> j) & 1) as u8).collect())
            .collect(),
    }
}

pub fn label(bits: &[u8], mode: LabelMode) -> LabelVector {
    LabelVector::new(bits.to_vec(), mode).unwrap()
}

pub fn hidden(bits: &[u8]) -> LabelVector {
    LabelVector::hidden(bits.to_vec()).unwrap()
}

/// `E(y, ŷ, h)` by explicit loops.
pub fn ref_energy(p: &EnergyParams, bias: &BiasPair, y: &[u8], yhat: &[u8], h: &[u8]) -> f64 {
    let mut e = 0.0;
    for i in 0..yhat.len() {
        e -= bias.a[i] * yhat[i] as f64;
        for j in 0..y.len() {
            e -= yhat[i] as f64 * p.w[[i, j]] * y[j] as f64;
        }
    }
    for j in 0..y.len() {
        e -= bias.b[j] * y[j] as f64;
    }
    for k in 0..h.len() {
        e -= p.c[k] * h[k] as f64;
        for j in 0..y.len() {
            e -= h[k] as f64 * p.wp[[k, j]] * y[j] as f64;
        }
    }
    e
}

/// Exact joint table: `(y, ŷ, h, probability)` for every configuration.
pub fn joint_table(p: &EnergyParams, bias: &BiasPair) -> Vec<(Vec<u8>, Vec<u8>, Vec<u8>, f64)> {
    let d = p.dims;
    let mut rows = Vec::new();
    for y in configs(d.noisy, p.mode) {
        for c in configs(d.clean, p.mode) {
            for h in configs(d.hidden, LabelMode::Multilabel) {
                let e = ref_energy(p, bias, &y, &c, &h);
                rows.push((y.clone(), c.clone(), h, -e));
            }
        }
    }
    let m = rows.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = rows.iter().map(|r| (r.3 - m).exp()).sum();
    for r in &mut rows {
        r.3 = (r.3 - m).exp() / z;
    }
    rows
}

pub fn log_z(p: &EnergyParams, bias: &BiasPair) -> f64 {
    let d = p.dims;
    let mut terms = Vec::new();
    for y in configs(d.noisy, p.mode) {
        for c in configs(d.clean, p.mode) {
            for h in configs(d.hidden, LabelMode::Multilabel) {
                terms.push(-ref_energy(p, bias, &y, &c, &h));
            }
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Random dimensions with `N, C ≥ 1`, `H ≥ 0` and `N + C + H ≤ max_total`.
pub fn random_dims(rng: &mut impl Rng, max_total: usize) -> Dims {
    loop {
        let n = rng.random_range(1..=6);
        let c = rng.random_range(1..=5);
        let h = rng.random_range(0..=4);
        if n + c + h <= max_total {
            return Dims::new(n, c, h);
        }
    }
}

pub fn random_mode(rng: &mut impl Rng) -> LabelMode {
    if rng.random_bool(0.5) {
        LabelMode::Multilabel
    } else {
        LabelMode::Multiclass
    }
}

pub fn random_label(len: usize, mode: LabelMode, rng: &mut impl Rng) -> LabelVector {
    if len == 0 {
        return hidden(&[]);
    }
    let all = configs(len, mode);
    label(&all[rng.random_range(0..all.len())], mode)
}

/// A dataset whose first `noisy` rows form `D_N` and the next `clean` rows `D_C`.
pub fn tiny_dataset(
    dims: Dims,
    mode: LabelMode,
    input_dim: usize,
    noisy: usize,
    clean: usize,
    rng: &mut impl Rng,
) -> LabeledDataset {
    let rows = noisy + clean;
    let x = Array2::from_shape_fn((rows, input_dim), |_| rng.random_range(-1.0f32..1.0));
    let ys = (0..rows).map(|_| random_label(dims.noisy, mode, rng)).collect();
    let cs = (0..rows).map(|_| Some(random_label(dims.clean, mode, rng))).collect();
    let splits = (0..rows)
        .map(|i| if i < noisy { Split::NoisyTrain } else { Split::CleanTrain })
        .collect();
    LabeledDataset::new(mode, x, ys, cs, splits, serde_json::Value::Null).unwrap()
}

/// Mean exact bound over the noisy rows plus mean exact bound over the clean
/// rows, straight from the oracle.
pub fn exact_objective(state: &TrainState, view: &TrainingView<'_>, aux: &AuxModel, batch: &Minibatch, alpha: f64) -> f64 {
    let mut u = 0.0;
    for &id in &batch.noisy {
        let bias = state.bias(&view.features(id)).unwrap();
        u += oracle::exact_bound(&state.params, &bias, aux, view.noisy(id), alpha, LIMIT).unwrap();
    }
    let mut l = 0.0;
    for &id in &batch.clean {
        let bias = state.bias(&view.features(id)).unwrap();
        let yhat = view.clean(id).unwrap();
        l += oracle::exact_clean_bound(&state.params, &bias, aux, view.noisy(id), yhat, alpha, LIMIT).unwrap();
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    mean(u, batch.noisy.len()) + mean(l, batch.clean.len())
}

/// Largest relative deviation between the analytic gradient and central
/// differences of the exact objective, over every trainable value.
pub fn worst_relative_error(net: NetKind, mode: LabelMode, dims: Dims, alpha: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let ds = tiny_dataset(dims, mode, 4, 3, 2, &mut r);
    let view = ds.training_view();
    let aux = random_aux(dims, mode, 0.8, &mut r);
    let config = TrainConfig {
        variant: Variant::CrfHidden,
        hidden_units: dims.hidden,
        net,
        negative_phase: NegativePhaseKind::Exact,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    let mut state = TrainState::for_view(config, &view).unwrap();
    let mut flat = state.flat_params();
    for v in flat.iter_mut().skip(state.net.num_params()) {
        *v = r.random_range(-0.8..0.8);
    }
    state.set_flat_params(&flat).unwrap();
    let batch = Minibatch {
        noisy: view.noisy_ids().to_vec(),
        clean: view.clean_ids().to_vec(),
    };
    let analytic = batch_gradient(&mut state, &view, &aux, &batch, alpha).unwrap();
    assert!((analytic.bound_estimate - exact_objective(&state, &view, &aux, &batch, alpha)).abs() < 1e-10);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..flat.len() {
        let mut up = flat.clone();
        up[k] += h;
        state.set_flat_params(&up).unwrap();
        let fu = exact_objective(&state, &view, &aux, &batch, alpha);
        let mut dn = flat.clone();
        dn[k] -= h;
        state.set_flat_params(&dn).unwrap();
        let fd = exact_objective(&state, &view, &aux, &batch, alpha);
        let numeric = (fu - fd) / (2.0 * h);
        let g = analytic.values[k];
        let rel = (numeric - g).abs() / g.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    state.set_flat_params(&flat).unwrap();
    worst
}

/// Moves probability `delta` onto unit `i`: a Bernoulli shift for
/// multilabel or hidden units, a shift from the other classes for a
/// categorical block.
pub fn perturb(q: &FactorialPosterior, clean: bool, i: usize, delta: f64) -> Option<FactorialPosterior> {
    let mut out = q.clone();
    if clean && q.mode == LabelMode::Multiclass {
        let p = out.p_clean[i] + delta;
        if !(0.0..=1.0).contains(&p) || (1.0 - out.p_clean[i]) <= 0.0 {
            return None;
        }
        let rest = 1.0 - out.p_clean[i];
        let new_rest = 1.0 - p;
        for (k, v) in out.p_clean.iter_mut().enumerate() {
            *v = if k == i { p } else { *v * new_rest / rest };
        }
    } else {
        let v = if clean { &mut out.p_clean[i] } else { &mut out.p_hidden[i] };
        *v += delta;
        if !(0.0..=1.0).contains(v) {
            return None;
        }
    }
    Some(out)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
