use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use noisycrf::data::{LabeledDataset, Split};
use noisycrf::trainer::Variant;
use noisycrf::{AuxModel, LabelVector};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_noisycrf"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut c = bin();
    c.args(args).arg("--out").arg(out);
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.output().expect("spawn noisycrf")
}

fn ok(args: &[&str], config: &Path, out: &Path) -> Value {
    let o = run(args, Some(config), out);
    assert!(
        o.status.success(),
        "{args:?} failed ({:?}): {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is one JSON document")
}

fn code(args: &[&str], config: Option<&Path>, out: &Path) -> i32 {
    run(args, config, out).status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn examples_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn multiclass(classes: usize, train: usize, noise: Value, seed: u64) -> Value {
    json!({
        "mode": "multiclass",
        "classes": classes,
        "input_dim": 8,
        "separation": 3.0,
        "train_size": train,
        "val_size": 100,
        "test_size": 200,
        "clean_fraction": 0.2,
        "noise": noise,
        "seed": seed
    })
}

fn small_train(variant: &str, epochs: usize) -> Value {
    json!({
        "epochs": epochs,
        "minibatch_size": 32,
        "variant": variant,
        "hidden_units": 3,
        "net": { "kind": "linear" },
        "optimizer": { "kind": "adaptive_moment", "learning_rate": 0.01, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 },
        "alpha_schedule": { "start": 4.0, "end": 1.0, "anneal_epochs": 3 },
        "gibbs": { "sweeps_per_update": 3, "chains_per_instance": 2 },
        "prediction": { "chains": 2, "sweeps": 10, "burn_in": 5 }
    })
}

#[test]
fn example_configs_synthesise_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(examples_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let out = dir.path().join(path.file_stem().unwrap());
        let printed = ok(&["synth"], &path, &out);
        let ds = LabeledDataset::load(&out.join("dataset.bin")).unwrap();
        assert_eq!(printed["rows"], ds.len());
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({ "synthetic": multiclass(3, 300, json!({"kind": "uniform", "rate": 0.2}), 0) }),
    );
    let bytes = |out: &str, seed: &str| {
        let out = dir.path().join(out);
        let o = bin().args(["synth", "--seed", seed, "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
        assert!(o.status.success());
        std::fs::read(out.join("dataset.bin")).unwrap()
    };
    let a = bytes("a", "5");
    assert_eq!(a, bytes("b", "5"));
    assert_ne!(a, bytes("c", "6"));
}

#[test]
fn clean_fraction_shows_in_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({ "synthetic": multiclass(3, 1000, json!({"kind": "pair_flip", "rate": 0.3}), 1) }),
    );
    let printed = ok(&["synth"], &cfg, dir.path());
    assert_eq!(printed["splits"]["clean_train"], 200);
    assert_eq!(printed["splits"]["noisy_train"], 800);
    let ds = LabeledDataset::load(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!(ds.counts()[&Split::CleanTrain], 200);
}

#[test]
fn config_and_data_errors_have_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "u.json", &json!({ "trian": {} }));
    assert_eq!(code(&["synth"], Some(&unknown), &dir.path().join("o")), 2);
    assert!(!dir.path().join("o").exists(), "nothing is written before validation");

    let empty = write_config(dir.path(), "e.json", &json!({}));
    assert_eq!(code(&["synth"], Some(&empty), dir.path()), 2);
    assert_eq!(code(&["train-aux"], Some(&empty), dir.path()), 3);
    assert_eq!(code(&["train", "--variant", "no_such_variant"], None, dir.path()), 2);

    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({ "synthetic": multiclass(3, 200, json!({"kind": "uniform", "rate": 0.2}), 1) }),
    );
    let out = dir.path().join("d");
    ok(&["synth"], &cfg, &out);
    let path = out.join("dataset.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xFF;
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(code(&["train-aux"], Some(&cfg), &out), 3);
}

#[test]
fn a_held_lock_blocks_writers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({ "synthetic": multiclass(3, 200, json!({"kind": "uniform", "rate": 0.2}), 1) }),
    );
    std::fs::write(dir.path().join(".noisycrf.lock"), "1\n").unwrap();
    assert_eq!(code(&["synth"], Some(&cfg), dir.path()), 2);
    assert!(!dir.path().join("dataset.bin").exists());
    std::fs::remove_file(dir.path().join(".noisycrf.lock")).unwrap();
    ok(&["synth"], &cfg, dir.path());
    assert!(!dir.path().join(".noisycrf.lock").exists());
}

#[test]
fn supplied_transition_matrix_gives_bayes_posteriors() {
    let dir = tempfile::tempdir().unwrap();
    let t = vec![vec![0.7, 0.3, 0.0], vec![0.0, 0.8, 0.2], vec![0.1, 0.0, 0.9]];
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": multiclass(3, 600, json!({"kind": "transition_matrix", "t": t}), 2),
            "aux": { "transition": { "t": t } }
        }),
    );
    ok(&["synth"], &cfg, dir.path());
    ok(&["train-aux"], &cfg, dir.path());
    let ds = LabeledDataset::load(&dir.path().join("dataset.bin")).unwrap();
    let prior = ds.training_view().clean_class_prior().unwrap();
    let aux = AuxModel::load(&dir.path().join("aux.bin")).unwrap();
    for j in 0..3 {
        let z: f64 = (0..3).map(|i| prior[i] * t[i][j]).sum();
        let q = aux.cond(&LabelVector::one_hot(3, j).unwrap()).unwrap();
        for i in 0..3 {
            let want = prior[i] * t[i][j] / z;
            assert!((q.p_clean[i] - want).abs() < 1e-9, "noisy {j} clean {i}: {} vs {want}", q.p_clean[i]);
        }
    }
}

#[test]
fn rbm_aux_on_identity_noise_trusts_the_noisy_label() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": multiclass(3, 1500, json!({"kind": "uniform", "rate": 0.0}), 3),
            "aux": { "rbm": { "hidden": 4, "epochs": 60, "learning_rate": 0.05 } }
        }),
    );
    ok(&["synth"], &cfg, dir.path());
    ok(&["train-aux"], &cfg, dir.path());
    let aux = AuxModel::load(&dir.path().join("aux.bin")).unwrap();
    for k in 0..3 {
        let q = aux.cond(&LabelVector::one_hot(3, k).unwrap()).unwrap();
        assert!(q.p_clean[k] > 0.9, "class {k}: {:?}", q.p_clean);
    }
}

#[test]
fn transition_aux_refuses_multilabel_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": {
                "mode": "multilabel", "classes": 4, "input_dim": 6, "separation": 2.0,
                "train_size": 200, "clean_fraction": 0.2,
                "noise": { "kind": "multilabel_tagger", "rate": 0.2, "tags": 8 }
            },
            "aux": { "transition": {} }
        }),
    );
    ok(&["synth"], &cfg, dir.path());
    assert_eq!(code(&["train-aux"], Some(&cfg), dir.path()), 2);
    assert!(!dir.path().join("aux.bin").exists());
}

#[test]
fn smoke_pipeline_finishes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = examples_dir().join("smoke.json");
    let start = Instant::now();
    ok(&["synth"], &cfg, dir.path());
    ok(&["train-aux"], &cfg, dir.path());
    let trained = ok(&["train"], &cfg, dir.path());
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");
    assert_eq!(trained["epochs"], 2);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,alpha,bound_estimate,recovery_accuracy,val_accuracy");
    assert_eq!(lines.len(), 3);

    let report = ok(&["eval"], &cfg, dir.path());
    let acc = report["report"]["prediction_accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert_eq!(report["split"], "test");
    let saved: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

#[test]
fn train_refuses_to_overwrite_without_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": multiclass(3, 200, json!({"kind": "pair_flip", "rate": 0.2}), 4),
            "aux": { "transition": {} },
            "train": small_train("no_pairwise", 1)
        }),
    );
    ok(&["synth"], &cfg, dir.path());
    ok(&["train-aux"], &cfg, dir.path());
    ok(&["train"], &cfg, dir.path());
    let before = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(code(&["train"], Some(&cfg), dir.path()), 2);
    assert_eq!(std::fs::read(dir.path().join("checkpoint.bin")).unwrap(), before);
    // anything but the epoch count must match the checkpoint
    assert_eq!(code(&["train", "--resume", "--seed", "99"], Some(&cfg), dir.path()), 2);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let base = json!({
        "synthetic": multiclass(3, 300, json!({"kind": "pair_flip", "rate": 0.3}), 5),
        "aux": { "transition": {} },
        "dataset": data.join("dataset.bin"),
        "aux_model": data.join("aux.bin"),
        "train": small_train("crf_hidden", 4)
    });
    let cfg = write_config(dir.path(), "full.json", &base);
    ok(&["synth"], &cfg, &data);
    ok(&["train-aux"], &cfg, &data);

    let full = dir.path().join("full");
    ok(&["train"], &cfg, &full);

    let mut short = base.clone();
    short["train"]["epochs"] = json!(2);
    let short_cfg = write_config(dir.path(), "short.json", &short);
    let split = dir.path().join("split");
    ok(&["train"], &short_cfg, &split);
    let partial = std::fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert_eq!(partial.lines().count(), 3);
    ok(&["train", "--resume"], &cfg, &split);

    for file in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(full.join(file)).unwrap(),
            std::fs::read(split.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn every_variant_runs_from_config_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": multiclass(3, 200, json!({"kind": "pair_flip", "rate": 0.3}), 6),
            "aux": { "transition": {} },
            "dataset": data.join("dataset.bin"),
            "aux_model": data.join("aux.bin"),
            "train": small_train("crf_hidden", 1)
        }),
    );
    ok(&["synth"], &cfg, &data);
    ok(&["train-aux"], &cfg, &data);
    for v in Variant::ALL {
        let out = dir.path().join(v.name());
        let trained = ok(&["train", "--variant", v.name()], &cfg, &out);
        assert_eq!(trained["variant"], v.name());
        let report = ok(&["eval"], &cfg, &out);
        assert!(report["report"]["prediction_accuracy"].is_f64(), "{}: {report}", v.name());
    }
}

#[test]
fn alpha_flags_override_the_config_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "synthetic": multiclass(3, 200, json!({"kind": "pair_flip", "rate": 0.3}), 6),
            "aux": { "transition": {} },
            "train": small_train("no_pairwise", 3)
        }),
    );
    ok(&["synth"], &cfg, dir.path());
    ok(&["train-aux"], &cfg, dir.path());
    ok(&["train", "--alpha-start", "9", "--alpha-end", "3", "--alpha-epochs", "2"], &cfg, dir.path());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let alphas: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(alphas[0], 9.0);
    assert_eq!(*alphas.last().unwrap(), 3.0);
    assert_eq!(code(&["train", "--alpha-start", "1", "--alpha-end", "3"], Some(&cfg), dir.path()), 2);
}

#[test]
fn mismatched_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(
        dir.path(),
        "a.json",
        &json!({
            "synthetic": multiclass(3, 200, json!({"kind": "pair_flip", "rate": 0.3}), 7),
            "aux": { "transition": {} },
            "train": small_train("no_pairwise", 1)
        }),
    );
    ok(&["synth"], &a, dir.path());
    ok(&["train-aux"], &a, dir.path());
    ok(&["train"], &a, dir.path());
    let other = dir.path().join("other");
    let b = write_config(
        dir.path(),
        "b.json",
        &json!({
            "synthetic": multiclass(4, 200, json!({"kind": "pair_flip", "rate": 0.3}), 7),
            "checkpoint": dir.path().join("checkpoint.bin"),
            "aux_model": dir.path().join("aux.bin")
        }),
    );
    ok(&["synth"], &b, &other);
    assert_eq!(code(&["eval"], Some(&b), &other), 3);
    assert_eq!(code(&["clean"], Some(&b), &other), 3);
}

fn cleaned_pipeline(dir: &Path, noise: Value, epochs: usize) -> (LabeledDataset, Value) {
    let mut synthetic = multiclass(4, 3000, noise, 11);
    synthetic["clean_fraction"] = json!(0.1);
    let mut train = small_train("no_pairwise", epochs);
    train["alpha_schedule"] = json!({ "start": 4.0, "end": 1.0, "anneal_epochs": epochs });
    let cfg = write_config(
        dir,
        "c.json",
        &json!({ "synthetic": synthetic, "aux": { "transition": {} }, "train": train }),
    );
    ok(&["synth"], &cfg, dir);
    ok(&["train-aux"], &cfg, dir);
    ok(&["train"], &cfg, dir);
    ok(&["clean"], &cfg, dir);
    let ds = LabeledDataset::load(&dir.join("dataset.bin")).unwrap();
    let cleaned = serde_json::from_slice(&std::fs::read(dir.join("cleaned.json")).unwrap()).unwrap();
    (ds, cleaned)
}

#[test]
fn identity_noise_proposes_almost_no_changes() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, cleaned) = cleaned_pipeline(dir.path(), json!({"kind": "uniform", "rate": 0.0}), 8);
    let rows = cleaned["rows"].as_array().unwrap();
    assert_eq!(rows.len(), ds.counts()[&Split::NoisyTrain]);
    let changed = rows.iter().filter(|r| r["changed"] == true).count();
    assert!(changed * 100 <= rows.len(), "{changed} of {} rows changed", rows.len());
}

#[test]
fn most_confident_changes_fix_pair_flips() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, cleaned) = cleaned_pipeline(dir.path(), json!({"kind": "pair_flip", "rate": 0.3}), 15);
    let truth: std::collections::HashMap<usize, usize> = ds
        .evaluation_labels(Split::NoisyTrain)
        .unwrap()
        .into_iter()
        .map(|(i, c)| (i, c.class().unwrap()))
        .collect();
    let changes = cleaned["changes"].as_array().unwrap();
    assert!(changes.len() >= 100, "only {} changes proposed", changes.len());
    let confidences: Vec<f64> = changes.iter().map(|c| c["confidence"].as_f64().unwrap()).collect();
    assert!(confidences.windows(2).all(|w| w[0] >= w[1]));
    let correct = changes[..100]
        .iter()
        .filter(|c| truth[&(c["id"].as_u64().unwrap() as usize)] == c["to"].as_u64().unwrap() as usize)
        .count();
    assert!(correct >= 90, "{correct} of the top 100 changes are corrections");

    let csv = std::fs::read_to_string(dir.path().join("changes.csv")).unwrap();
    assert_eq!(csv.lines().count(), changes.len() + 1);
}

#[test]
fn cleaned_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, cleaned) = cleaned_pipeline(dir.path(), json!({"kind": "pair_flip", "rate": 0.3}), 3);
    let relabelled = LabeledDataset::load(&dir.path().join("cleaned_dataset.bin")).unwrap();
    assert_eq!(relabelled.len(), ds.len());
    assert_eq!(relabelled.features(), ds.features());
    assert_eq!(relabelled.counts(), ds.counts());
    for r in cleaned["rows"].as_array().unwrap() {
        let id = r["id"].as_u64().unwrap() as usize;
        let bits: Vec<u8> = r["label"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap() as u8).collect();
        assert_eq!(relabelled.noisy_label(id).bits(), bits.as_slice());
    }
    for id in ds.ids(Split::CleanTrain) {
        assert_eq!(relabelled.noisy_label(id), ds.noisy_label(id));
    }
    assert_eq!(
        relabelled.evaluation_labels(Split::NoisyTrain).unwrap(),
        ds.evaluation_labels(Split::NoisyTrain).unwrap()
    );
}

#[test]
fn synth_converts_cifar_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut train_files = Vec::new();
    for b in 0..5u8 {
        let mut bytes = Vec::new();
        for r in 0..40u8 {
            bytes.push((b + r) % 10);
            bytes.extend((0..3072).map(|p| ((p as u32 * 7 + r as u32) % 256) as u8));
        }
        let p = dir.path().join(format!("data_batch_{}.bin", b + 1));
        std::fs::write(&p, bytes).unwrap();
        train_files.push(p);
    }
    let test = dir.path().join("test_batch.bin");
    std::fs::write(&test, std::fs::read(&train_files[0]).unwrap()).unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "cifar": {
                "train_files": train_files,
                "test_files": [test],
                "pool": 8,
                "noise": { "kind": "pair_flip", "rate": 0.3 },
                "clean_fraction": 0.2,
                "val_size": 20
            }
        }),
    );
    let out = dir.path().join("out");
    let printed = ok(&["synth"], &cfg, &out);
    assert_eq!(printed["rows"], 240);
    let ds = LabeledDataset::load(&out.join("dataset.bin")).unwrap();
    assert_eq!(ds.input_dim(), 48);
    assert_eq!(ds.counts()[&Split::Test], 40);
    assert_eq!(ds.counts()[&Split::Val], 20);

    std::fs::write(&train_files[2], vec![0u8; 100]).unwrap();
    assert_eq!(code(&["synth"], Some(&cfg), &dir.path().join("bad")), 3);
}
