mod common;

use common::*;
use ndarray::Array2;
use noisycrf::auxiliary::{aux_cond, fit_aux_transition, train_aux_rbm, AuxModel, AuxRbm, AuxRbmConfig};
use noisycrf::oracle;
use noisycrf::{Dims, LabelMode, LabelVector};

fn one_hot(k: usize, n: usize) -> LabelVector {
    let bits: Vec<u8> = (0..n).map(|j| u8::from(j == k)).collect();
    label(&bits, LabelMode::Multiclass)
}

#[test]
fn identity_noise_puts_mass_on_the_observed_class() {
    let pairs: Vec<_> = (0..300).map(|i| (one_hot(i % 3, 3), one_hot(i % 3, 3))).collect();
    let config = AuxRbmConfig {
        hidden: 4,
        epochs: 60,
        learning_rate: 0.05,
        seed: 3,
        ..AuxRbmConfig::default()
    };
    let rbm = train_aux_rbm(&pairs, &config).unwrap();
    let aux = AuxModel::Rbm(rbm);
    for k in 0..3 {
        let q = aux.cond(&one_hot(k, 3)).unwrap();
        assert!(q.p_clean[k] > 0.9, "class {k}: {:?}", q.p_clean);
    }
}

#[test]
fn conditional_matches_enumeration() {
    let mut r = rng(40);
    for _ in 0..50 {
        let dims = random_dims(&mut r, 12);
        let mode = random_mode(&mut r);
        let (energy, bias) = random_model(dims, mode, 2.0, &mut r);
        let rbm = AuxRbm { energy, bias };
        let y = random_label(dims.noisy, mode, &mut r);
        let fast = aux_cond(&rbm, &y).unwrap();
        let exact = oracle::exact_conditional(&rbm.energy, &rbm.bias, &y, LIMIT).unwrap();
        for (a, b) in fast.p_clean.iter().zip(&exact.p_clean).chain(fast.p_hidden.iter().zip(&exact.p_hidden)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn training_on_one_pair_raises_its_likelihood() {
    let y = label(&[1, 0, 1], LabelMode::Multilabel);
    let c = label(&[0, 1], LabelMode::Multilabel);
    let pairs = vec![(y.clone(), c.clone()); 32];
    let base = AuxRbmConfig {
        hidden: 3,
        epochs: 0,
        seed: 9,
        ..AuxRbmConfig::default()
    };
    let before = train_aux_rbm(&pairs, &base).unwrap();
    let after = train_aux_rbm(&pairs, &AuxRbmConfig { epochs: 20, ..base }).unwrap();
    let ll = |rbm: &AuxRbm| oracle::log_prob_pair(&rbm.energy, &rbm.bias, &y, &c, LIMIT).unwrap();
    assert!(ll(&after) > ll(&before) + 0.5, "{} -> {}", ll(&before), ll(&after));
}

#[test]
fn uniform_transition_gives_a_uniform_posterior() {
    let t = Array2::from_elem((4, 4), 0.25);
    let aux = AuxModel::Transition(fit_aux_transition(&t, None).unwrap());
    for k in 0..4 {
        let q = aux.cond(&one_hot(k, 4)).unwrap();
        for p in &q.p_clean {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}

#[test]
fn transition_posterior_is_bayes_rule() {
    let t = ndarray::array![[0.7, 0.3, 0.0], [0.2, 0.6, 0.2], [0.0, 0.1, 0.9]];
    let prior = [0.5, 0.3, 0.2];
    let aux = AuxModel::Transition(fit_aux_transition(&t, Some(&prior)).unwrap());
    for j in 0..3 {
        let z: f64 = (0..3).map(|i| prior[i] * t[[i, j]]).sum();
        let q = aux.cond(&one_hot(j, 3)).unwrap();
        for i in 0..3 {
            assert!((q.p_clean[i] - prior[i] * t[[i, j]] / z).abs() < 1e-12);
        }
    }
}

#[test]
fn rbm_round_trips_through_disk() {
    let mut r = rng(1);
    let dims = Dims::new(3, 2, 4);
    let aux = random_aux(dims, LabelMode::Multilabel, 1.0, &mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aux.json");
    aux.save(&path).unwrap();
    assert_eq!(AuxModel::load(&path).unwrap(), aux);
}
