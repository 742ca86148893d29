use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use noisycrf::auxiliary::{fit_aux_transition, train_aux_rbm};
use noisycrf::data::{dataset_from_classes, make_synthetic, read_cifar10_binary, LabeledDataset, NoiseSpec, Split};
use noisycrf::eval::{
    accuracy, mean_average_precision, per_class_accuracy, per_class_average_precision, MetricReport,
};
use noisycrf::trainer::{resume, TrainState};
use noisycrf::{AuxModel, LabelMode, LabelVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{AuxSpec, CifarImport, Monitor, Paths, RunConfig};
use crate::fsutil::{save_atomic, tmp_sibling, write_atomic, OutputLock};
use crate::{fail, Failure};

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .context(Failure::Data)
}

fn load_aux(path: &Path) -> Result<AuxModel> {
    AuxModel::load(path)
        .with_context(|| format!("loading auxiliary model {}", path.display()))
        .context(Failure::Data)
}

fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .context(Failure::Data)
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn check_model_fits(state: &TrainState, ds: &LabeledDataset, aux: Option<&AuxModel>) -> Result<()> {
    let dims = state.dims();
    let mut problems = Vec::new();
    if state.net.input_dim != ds.input_dim() {
        problems.push(format!("input dim {} vs {}", state.net.input_dim, ds.input_dim()));
    }
    if dims.noisy != ds.noisy_dim() || dims.clean != ds.clean_dim() {
        problems.push(format!(
            "labels N={} C={} vs N={} C={}",
            dims.noisy,
            dims.clean,
            ds.noisy_dim(),
            ds.clean_dim()
        ));
    }
    if state.mode() != ds.mode() {
        problems.push(format!("mode {:?} vs {:?}", state.mode(), ds.mode()));
    }
    if let Some(aux) = aux {
        if aux.noisy_dim() != dims.noisy || aux.clean_dim() != dims.clean {
            problems.push(format!("auxiliary model N={} C={}", aux.noisy_dim(), aux.clean_dim()));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(fail(
            Failure::Data,
            format!("checkpoint does not fit the dataset: {}", problems.join("; ")),
        ))
    }
}

fn import_cifar(c: &CifarImport) -> Result<LabeledDataset> {
    let read = |files: &[PathBuf]| {
        let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
        read_cifar10_binary(&refs, c.pool).context("reading CIFAR-10 batches").context(Failure::Data)
    };
    if c.train_files.is_empty() {
        return Err(fail(Failure::Config, "cifar.train_files is empty"));
    }
    let train = read(&c.train_files)?;
    let test = if c.test_files.is_empty() {
        None
    } else {
        Some(read(&c.test_files)?)
    };
    Ok(dataset_from_classes(train, test, 10, &c.noise, c.clean_fraction, c.val_size, c.seed)?)
}

/// Writes a synthetic dataset or converts CIFAR-10 batches.
pub fn synth(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let ds = match (&cfg.synthetic, &cfg.cifar) {
        (Some(sc), _) => make_synthetic(sc)?,
        (None, Some(c)) => import_cifar(c)?,
        (None, None) => return Err(fail(Failure::Config, "synth needs a \"synthetic\" or \"cifar\" section")),
    };
    let bytes = ds.to_bytes()?;
    let _lock = OutputLock::acquire(&paths.out)?;
    write_atomic(&paths.dataset, &bytes)?;
    log::info!("wrote {} rows to {}", ds.len(), paths.dataset.display());
    print_json(&json!({
        "dataset": paths.dataset,
        "rows": ds.len(),
        "splits": ds.counts(),
    }));
    Ok(())
}

/// The transition matrix for the auxiliary model: given, taken from the
/// dataset's noise record, or estimated from `D_C` with add-one smoothing.
fn transition_matrix(
    given: Option<&Vec<Vec<f64>>>,
    ds: &LabeledDataset,
    pairs: &[(LabelVector, LabelVector)],
) -> Result<Array2<f64>> {
    let c = ds.clean_dim();
    if let Some(rows) = given {
        if rows.len() != c || rows.iter().any(|r| r.len() != c) {
            return Err(fail(Failure::Config, format!("aux.transition.t must be {c}x{c}")));
        }
        return Ok(Array2::from_shape_fn((c, c), |(i, j)| rows[i][j]));
    }
    if let Ok(spec) = serde_json::from_value::<NoiseSpec>(ds.provenance().clone()) {
        if spec.mode() == LabelMode::Multiclass {
            log::info!("using the transition matrix recorded with the dataset");
            return Ok(spec.transition(c)?);
        }
    }
    if pairs.is_empty() {
        return Err(fail(
            Failure::Data,
            "no transition matrix given or recorded, and no clean training rows to estimate one",
        ));
    }
    log::info!("estimating the transition matrix from {} clean pairs", pairs.len());
    let mut t = Array2::from_elem((c, c), 1.0);
    for (y, clean) in pairs {
        if let (Some(j), Some(i)) = (y.class(), clean.class()) {
            t[[i, j]] += 1.0;
        }
    }
    for mut row in t.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(t)
}

pub fn train_aux(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let ds = load_dataset(&paths.dataset)?;
    let view = ds.training_view();
    let pairs = view.clean_pairs();
    let aux = match &cfg.aux {
        AuxSpec::Rbm(c) => {
            if pairs.is_empty() {
                return Err(fail(Failure::Data, "the rbm auxiliary model needs clean training rows"));
            }
            let _lock = OutputLock::acquire(&paths.out)?;
            let aux = AuxModel::Rbm(train_aux_rbm(&pairs, c)?);
            save_atomic(&paths.aux, |p| aux.save(p))?;
            aux
        }
        AuxSpec::Transition { t } => {
            if ds.mode() != LabelMode::Multiclass {
                return Err(fail(
                    Failure::Config,
                    "the transition auxiliary model needs multiclass data; use the rbm kind",
                ));
            }
            let t = transition_matrix(t.as_ref(), &ds, &pairs)?;
            let prior = view.clean_class_prior();
            let aux = AuxModel::Transition(fit_aux_transition(&t, prior.as_deref()).context(Failure::Config)?);
            let _lock = OutputLock::acquire(&paths.out)?;
            save_atomic(&paths.aux, |p| aux.save(p))?;
            aux
        }
    };
    log::info!("wrote auxiliary model to {}", paths.aux.display());
    print_json(&json!({
        "aux_model": paths.aux,
        "clean_pairs": pairs.len(),
        "noisy_dim": aux.noisy_dim(),
        "clean_dim": aux.clean_dim(),
        "hidden_dim": aux.hidden_dim(),
    }));
    Ok(())
}

fn metric_name(mode: LabelMode) -> &'static str {
    match mode {
        LabelMode::Multiclass => "accuracy",
        LabelMode::Multilabel => "map",
    }
}

/// Accuracy or mAP of test-time predictions on one split, with the
/// per-class breakdown. `None` when the split is empty.
fn prediction_metric(state: &TrainState, ds: &LabeledDataset, split: Split) -> noisycrf::Result<Option<(f64, Vec<Option<f64>>)>> {
    let rows = ds.evaluation_labels(split)?;
    if rows.is_empty() {
        return Ok(None);
    }
    let scores = rows
        .iter()
        .map(|&(id, _)| state.predict_clean(&ds.feature_row(id), id as u64))
        .collect::<noisycrf::Result<Vec<_>>>()?;
    let labels: Vec<&LabelVector> = rows.iter().map(|r| r.1).collect();
    Ok(Some(match state.mode() {
        LabelMode::Multiclass => (accuracy(&scores, &labels)?, per_class_accuracy(&scores, &labels)?),
        LabelMode::Multilabel => (
            mean_average_precision(&scores, &labels)?,
            per_class_average_precision(&scores, &labels)?,
        ),
    }))
}

/// Clean-label scores for one noisy training row: `q` for the CRF variants,
/// the classifier's prediction for the supervised baselines.
fn recovery_row(state: &TrainState, aux: Option<&AuxModel>, ds: &LabeledDataset, id: usize) -> noisycrf::Result<Option<Vec<f64>>> {
    let x = ds.feature_row(id);
    if state.config.variant.is_supervised() {
        return state.predict_clean(&x, id as u64).map(Some);
    }
    match aux {
        Some(aux) => state
            .recovery_scores(aux, &x, ds.noisy_label(id), state.current_alpha(), id as u64)
            .map(Some),
        None => Ok(None),
    }
}

/// Recovery accuracy or mAP on `D_N`. `None` when the hidden clean labels
/// are not in the file (real noisy data) or no aux model is at hand.
fn recovery_metric(state: &TrainState, ds: &LabeledDataset, aux: Option<&AuxModel>) -> noisycrf::Result<Option<f64>> {
    let Ok(rows) = ds.evaluation_labels(Split::NoisyTrain) else {
        return Ok(None);
    };
    if rows.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(rows.len());
    for &(id, _) in &rows {
        match recovery_row(state, aux, ds, id)? {
            Some(s) => scores.push(s),
            None => return Ok(None),
        }
    }
    let labels: Vec<&LabelVector> = rows.iter().map(|r| r.1).collect();
    Ok(Some(match state.mode() {
        LabelMode::Multiclass => accuracy(&scores, &labels)?,
        LabelMode::Multilabel => mean_average_precision(&scores, &labels)?,
    }))
}

fn epoch_metrics(
    state: &TrainState,
    ds: &LabeledDataset,
    aux: Option<&AuxModel>,
    monitor: Monitor,
) -> noisycrf::Result<BTreeMap<String, f64>> {
    let name = metric_name(state.mode());
    let mut out = BTreeMap::new();
    if monitor.validation {
        if let Some((v, _)) = prediction_metric(state, ds, Split::Val)? {
            out.insert(format!("val_{name}"), v);
        }
    }
    if monitor.recovery {
        if let Some(v) = recovery_metric(state, ds, aux)? {
            out.insert(format!("recovery_{name}"), v);
        }
    }
    Ok(out)
}

fn persist(state: &TrainState, paths: &Paths) -> noisycrf::Result<()> {
    let tmp = tmp_sibling(&paths.checkpoint);
    state.save(&tmp)?;
    std::fs::rename(&tmp, &paths.checkpoint)?;
    let csv = tmp_sibling(&paths.metrics());
    std::fs::write(&csv, state.metrics_csv())?;
    std::fs::rename(&csv, paths.metrics())?;
    Ok(())
}

pub fn train(cfg: &RunConfig, paths: &Paths, resume_run: bool) -> Result<()> {
    let ds = load_dataset(&paths.dataset)?;
    let view = ds.training_view();
    let variant = cfg.train.variant;
    let aux = if variant.is_supervised() {
        None
    } else {
        Some(load_aux(&paths.aux)?)
    };

    let mut state = if resume_run {
        let mut state = load_checkpoint(&paths.checkpoint)?;
        let mut expected = cfg.train.clone();
        expected.epochs = state.config.epochs;
        if expected != state.config {
            return Err(fail(
                Failure::Config,
                "the checkpoint was trained with a different configuration; only epochs may change on resume",
            ));
        }
        state.config.epochs = cfg.train.epochs;
        log::info!("resuming after epoch {} of {}", state.epoch, state.config.epochs);
        state
    } else {
        if paths.checkpoint.exists() {
            return Err(fail(
                Failure::Config,
                format!("{} exists; pass --resume to continue it", paths.checkpoint.display()),
            ));
        }
        TrainState::for_view(cfg.train.clone(), &view)?
    };
    check_model_fits(&state, &ds, aux.as_ref())?;

    let _lock = OutputLock::acquire(&paths.out)?;
    let monitor = cfg.monitor;
    let mut observer = |s: &TrainState, a: Option<&AuxModel>| epoch_metrics(s, &ds, a, monitor);
    let mut after = |s: &TrainState| persist(s, paths);
    resume(&mut state, &view, aux.as_ref(), &mut observer, &mut after)?;
    // a resumed run that was already complete writes nothing above
    persist(&state, paths)?;

    let last = state.metrics.last();
    print_json(&json!({
        "checkpoint": paths.checkpoint,
        "metrics": paths.metrics(),
        "variant": variant.name(),
        "epochs": state.epoch,
        "last": last,
    }));
    Ok(())
}

pub fn eval(paths: &Paths) -> Result<()> {
    let ds = load_dataset(&paths.dataset)?;
    let state = load_checkpoint(&paths.checkpoint)?;
    let aux = if state.config.variant.is_supervised() || !paths.aux.exists() {
        None
    } else {
        Some(load_aux(&paths.aux)?)
    };
    check_model_fits(&state, &ds, aux.as_ref())?;

    let split = if ds.counts().get(&Split::Test).copied().unwrap_or(0) > 0 {
        Split::Test
    } else {
        Split::Val
    };
    let mut report = MetricReport::default();
    if let Some((v, per_class)) = prediction_metric(&state, &ds, split)? {
        match ds.mode() {
            LabelMode::Multiclass => report.prediction_accuracy = Some(v),
            LabelMode::Multilabel => report.map = Some(v),
        }
        report.per_class = per_class;
    }
    match (recovery_metric(&state, &ds, aux.as_ref())?, ds.mode()) {
        (Some(v), LabelMode::Multiclass) => report.recovery_accuracy = Some(v),
        (Some(v), LabelMode::Multilabel) => report.recovery_map = Some(v),
        (None, _) => log::warn!("recovery not measured: no hidden clean labels or no auxiliary model"),
    }
    if report.per_class.iter().flatten().chain(&report.prediction_accuracy).any(|v| !v.is_finite()) {
        return Err(fail(Failure::Numeric, "non-finite metric"));
    }

    let value = json!({ "split": split, "report": report });
    let _lock = OutputLock::acquire(&paths.out)?;
    write_atomic(&paths.report(), serde_json::to_string_pretty(&value)?.as_bytes())?;
    print_json(&value);
    Ok(())
}

/// One proposed relabelling. `label` is the label index for multilabel data;
/// `from`/`to` are classes (multiclass) or bits (multilabel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub id: usize,
    pub label: Option<usize>,
    pub from: usize,
    pub to: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedRow {
    pub id: usize,
    pub noisy: Vec<u8>,
    /// `q` over the clean labels.
    pub q: Vec<f64>,
    pub label: Vec<u8>,
    pub confidence: f64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedLabels {
    pub mode: LabelMode,
    pub alpha: f64,
    pub rows: Vec<CleanedRow>,
    /// Sorted by decreasing confidence.
    pub changes: Vec<Change>,
}

fn clean_row(id: usize, noisy: &LabelVector, q: Vec<f64>, mode: LabelMode, comparable: bool) -> (CleanedRow, Vec<Change>) {
    let mut changes = Vec::new();
    let (label, confidence) = match mode {
        LabelMode::Multiclass => {
            let k = q
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if let Some(from) = noisy.class().filter(|&c| c != k) {
                changes.push(Change {
                    id,
                    label: None,
                    from,
                    to: k,
                    confidence: q[k],
                });
            }
            ((0..q.len()).map(|j| u8::from(j == k)).collect::<Vec<u8>>(), q[k])
        }
        LabelMode::Multilabel => {
            let bits: Vec<u8> = q.iter().map(|&p| u8::from(p >= 0.5)).collect();
            if comparable {
                for (k, (&b, &p)) in bits.iter().zip(&q).enumerate() {
                    let from = noisy.bits()[k];
                    if b != from {
                        let confidence = if b == 1 { p } else { 1.0 - p };
                        changes.push(Change {
                            id,
                            label: Some(k),
                            from: from as usize,
                            to: b as usize,
                            confidence,
                        });
                    }
                }
            }
            let confidence = q.iter().map(|&p| p.max(1.0 - p)).fold(1.0, f64::min);
            (bits, confidence)
        }
    };
    let row = CleanedRow {
        id,
        noisy: noisy.bits().to_vec(),
        q,
        label,
        confidence,
        changed: !changes.is_empty(),
    };
    (row, changes)
}

fn changes_csv(changes: &[Change]) -> String {
    let mut out = String::from("rank,id,label,from,to,confidence\n");
    for (rank, c) in changes.iter().enumerate() {
        let label = c.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", rank + 1, c.id, label, c.from, c.to, c.confidence);
    }
    out
}

/// The dataset with the `D_N` noisy labels replaced by the cleaned ones.
fn relabelled(ds: &LabeledDataset, cleaned: &CleanedLabels) -> Result<LabeledDataset> {
    let mode = ds.mode();
    let mut noisy: Vec<LabelVector> = (0..ds.len()).map(|i| ds.noisy_label(i).clone()).collect();
    for r in &cleaned.rows {
        noisy[r.id] = LabelVector::new(r.label.clone(), mode)?;
    }
    let mut clean = vec![None; ds.len()];
    for split in Split::ALL {
        // a split without ground truth stays unlabelled
        if let Ok(rows) = ds.evaluation_labels(split) {
            for (i, c) in rows {
                clean[i] = Some(c.clone());
            }
        }
    }
    let splits = (0..ds.len()).map(|i| ds.split(i)).collect();
    let provenance = json!({ "cleaned_from": ds.provenance(), "alpha": cleaned.alpha });
    Ok(LabeledDataset::new(mode, ds.features().to_owned(), noisy, clean, splits, provenance)?)
}

pub fn clean(paths: &Paths) -> Result<()> {
    let ds = load_dataset(&paths.dataset)?;
    let state = load_checkpoint(&paths.checkpoint)?;
    let aux = if state.config.variant.is_supervised() {
        None
    } else {
        Some(load_aux(&paths.aux)?)
    };
    check_model_fits(&state, &ds, aux.as_ref())?;

    let mode = ds.mode();
    let comparable = ds.noisy_dim() == ds.clean_dim();
    if !comparable {
        log::warn!("noisy tags and clean labels differ in number; no label changes can be proposed");
    }
    let mut rows = Vec::new();
    let mut changes = Vec::new();
    for id in ds.ids(Split::NoisyTrain) {
        let q = recovery_row(&state, aux.as_ref(), &ds, id)?.expect("aux loaded for CRF variants");
        if q.iter().any(|p| !p.is_finite()) {
            return Err(fail(Failure::Numeric, format!("non-finite posterior for row {id}")));
        }
        let (row, c) = clean_row(id, ds.noisy_label(id), q, mode, comparable);
        rows.push(row);
        changes.extend(c);
    }
    changes.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.id.cmp(&b.id))
            .then(a.label.cmp(&b.label))
    });
    let cleaned = CleanedLabels {
        mode,
        alpha: state.current_alpha(),
        rows,
        changes,
    };
    let relabelled = if comparable {
        Some(relabelled(&ds, &cleaned)?.to_bytes()?)
    } else {
        None
    };

    let _lock = OutputLock::acquire(&paths.out)?;
    write_atomic(&paths.cleaned(), serde_json::to_string(&cleaned)?.as_bytes())?;
    write_atomic(&paths.changes(), changes_csv(&cleaned.changes).as_bytes())?;
    if let Some(bytes) = relabelled {
        write_atomic(&paths.cleaned_dataset(), &bytes)?;
    }
    let changed_rows = cleaned.rows.iter().filter(|r| r.changed).count();
    log::info!("{changed_rows} of {} noisy rows relabelled", cleaned.rows.len());
    print_json(&json!({
        "cleaned": paths.cleaned(),
        "changes": paths.changes(),
        "rows": cleaned.rows.len(),
        "changed_rows": changed_rows,
        "proposed_changes": cleaned.changes.len(),
    }));
    Ok(())
}
