//! Training, evaluation and the experiment protocols.
//!
//! [`train_one`] runs Adam with early stopping on validation accuracy,
//! snapshots the model at the best-validation epoch, and computes test
//! accuracy exactly once from that snapshot. Divergence (a non-finite
//! loss, stack or gradient) is recorded as a collapse, not an exception:
//! the run keeps its last good snapshot and the result carries the flag,
//! the reason and the per-degree activation telemetry that led up to it.
//!
//! [`run_kfold`] drives the cyclic fold protocol, [`sweep_k`] the
//! K-ablation grid. Sweep cells are independent jobs on a bounded worker
//! pool; identical config + seed always produces byte-identical result
//! files (wall time is kept in memory only for that reason).

use crate::autograd::{adam_step, AdamHyper, AdamState, Tape, Tensor};
use crate::checkpoint;
use crate::data::{fold_masks, DataError, Dataset, Splits};
use crate::graph::{apply_domain_mapping, csr_from_edge_list, sym_normalized_laplacian, CsrMatrix};
use crate::model::{build_named_model, ModelError, ModelKind, ModelOptions, NormPlacement};
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("dataset has fold assignments; this protocol needs fixed masks")]
    NeedMasks,
    #[error("dataset has fixed masks; the k-fold protocol needs fold assignments")]
    NeedFolds,
    #[error("{0} split selects no nodes")]
    EmptySplit(&'static str),
    #[error("model '{0}' has no trainable shape parameters to report")]
    StaticShape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything one run needs; all fields are echoed into the result file.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub k: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Learning rate for shape parameters; 0 freezes them to constants,
    /// making the run bit-identical to the static variant.
    pub shape_lr: f64,
    /// Decoupled L2 on linear weights only.
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dataset: String,
    pub record_telemetry: bool,
    pub norm_placement: NormPlacement,
    pub krawtchouk_n: Option<u32>,
}

impl TrainConfig {
    pub fn new(model: ModelKind, dataset: impl Into<String>) -> Self {
        Self {
            model,
            k: 3,
            hidden: 16,
            lr: 0.01,
            shape_lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            max_epochs: 200,
            patience: 50,
            seed: 0,
            dataset: dataset.into(),
            record_telemetry: true,
            norm_placement: NormPlacement::PerTerm,
            krawtchouk_n: None,
        }
    }
}

/// Per-epoch stack telemetry; row `e` holds layer-1 pre-normalization
/// max-abs per degree at epoch `e`.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Telemetry {
    pub layer1_max_abs: Vec<Vec<f64>>,
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Computed exactly once, from the best-validation snapshot.
    pub test_acc: f64,
    pub collapsed: bool,
    pub collapse_reason: Option<String>,
    pub shape_names: Vec<String>,
    /// Constrained shape values per epoch.
    pub shape_trajectory: Vec<Vec<f64>>,
    pub learned_shape: Vec<f64>,
    pub telemetry: Option<Telemetry>,
    /// Checkpoint bytes of the best-validation snapshot; in-memory only.
    #[serde(skip)]
    pub best_checkpoint: Vec<u8>,
    /// In-memory only: wall time must not break result-file determinism.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentResult {
    /// The largest pre-normalization activation seen anywhere in the run.
    pub fn max_activation(&self) -> f64 {
        self.telemetry
            .as_ref()
            .map(|t| {
                t.layer1_max_abs
                    .iter()
                    .flatten()
                    .fold(0.0f64, |m, &v| m.max(v))
            })
            .unwrap_or(f64::NAN)
    }
}

/// Serializes a result to its canonical JSON file form.
pub fn result_to_json(result: &ExperimentResult) -> String {
    serde_json::to_string_pretty(result).expect("result serializes") + "\n"
}

pub fn write_result_json(result: &ExperimentResult, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, result_to_json(result))?;
    Ok(())
}

/// Two-round splitmix so derived streams (model init, per-epoch dropout,
/// per-fold seeds) never collide.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Argmax-per-row accuracy over masked nodes.
pub fn accuracy(log_probs: &Tensor, labels: &[usize], mask: &[bool]) -> f64 {
    let c = log_probs.shape()[1];
    let data = log_probs.data();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, (&label, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &data[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
        total += 1;
    }
    hits as f64 / total as f64
}

fn predictions(log_probs: &Tensor) -> Vec<usize> {
    let c = log_probs.shape()[1];
    log_probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Builds the mapped operator a model kind needs for a dataset's graph.
pub fn mapped_operator(d: &Dataset, kind: ModelKind) -> Result<Arc<CsrMatrix>, TrainError> {
    let spec_mapping = match kind {
        ModelKind::Chebynet | ModelKind::SJacobinet | ModelKind::LJacobinet => {
            crate::graph::DomainMapping::finite_shift()
        }
        _ => crate::graph::DomainMapping::semi_infinite_scale(),
    };
    let a = csr_from_edge_list(&d.edges, d.n, false)?;
    let l = sym_normalized_laplacian(&a)?;
    Ok(Arc::new(apply_domain_mapping(&l, &spec_mapping)))
}

/// Trains on a dataset with fixed masks.
pub fn train_one(cfg: &TrainConfig, dataset: &Dataset) -> Result<ExperimentResult, TrainError> {
    match &dataset.splits {
        Splits::Masks { train, val, test } => {
            train_with_masks(cfg, dataset, train.clone(), val.clone(), test.clone())
        }
        Splits::Folds { .. } => Err(TrainError::NeedMasks),
    }
}

/// Core loop shared by the fixed-mask and fold protocols.
pub fn train_with_masks(
    cfg: &TrainConfig,
    dataset: &Dataset,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
) -> Result<ExperimentResult, TrainError> {
    let started = Instant::now();
    dataset.validate()?;
    for (name, mask) in [
        ("train", &train_mask),
        ("val", &val_mask),
        ("test", &test_mask),
    ] {
        if !mask.iter().any(|&b| b) {
            return Err(TrainError::EmptySplit(name));
        }
    }

    let operator = mapped_operator(dataset, cfg.model)?;
    let x = Tensor::matrix(dataset.n, dataset.feature_dim, dataset.features.clone());
    let labels = &dataset.labels;

    let mut model = build_named_model(
        cfg.model,
        cfg.k,
        cfg.hidden,
        dataset.feature_dim,
        dataset.classes,
        derive_seed(cfg.seed, 0x11),
        &ModelOptions {
            freeze_shape: cfg.shape_lr == 0.0,
            norm_placement: cfg.norm_placement,
            krawtchouk_n: cfg.krawtchouk_n,
        },
    )?;
    model.dropout = cfg.dropout;
    let shape_names: Vec<String> = model
        .shape_param_values()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();

    let mut adam: Vec<AdamState> = model
        .params
        .entries()
        .iter()
        .map(|e| AdamState::new(e.value.len()))
        .collect();

    let mut train_loss = Vec::new();
    let mut train_acc = Vec::new();
    let mut val_acc = Vec::new();
    let mut val_loss = Vec::new();
    let mut shape_trajectory = Vec::new();
    let mut telemetry = Telemetry::default();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_checkpoint = checkpoint::to_bytes(&model);
    let mut collapsed = false;
    let mut collapse_reason: Option<String> = None;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        // Train pass.
        let mut tape = Tape::new(derive_seed(cfg.seed, 0x1000 + epoch as u64));
        let trace = match model.forward(&mut tape, &operator, &x, true) {
            Ok(t) => t,
            Err(ModelError::Basis(crate::basis::BasisError::NonFiniteStack {
                degree,
                telemetry: partial,
            })) => {
                collapsed = true;
                collapse_reason = Some(format!("non-finite stack term at degree {degree}"));
                if cfg.record_telemetry {
                    telemetry.layer1_max_abs.push(partial);
                }
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if cfg.record_telemetry {
            telemetry.layer1_max_abs.push(trace.layer1_max_abs.clone());
        }
        shape_trajectory.push(trace.shape_values.clone());

        let loss = tape.nll_loss(trace.log_probs, labels, &train_mask)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            collapsed = true;
            collapse_reason = Some(format!("non-finite loss at epoch {epoch}"));
            break;
        }
        train_loss.push(loss_value);
        tape.backward(loss)?;

        let mut grad_failure = None;
        for (id, var) in &trace.bound {
            // A parameter outside the active graph has zero gradient.
            let Some(grad) = tape.grad(*var).map(|g| g.to_vec()) else {
                continue;
            };
            let entry = model.params.entry(*id);
            let hyper = if entry.shape_param {
                AdamHyper::new(cfg.shape_lr, 0.0)
            } else if entry.decay {
                AdamHyper::new(cfg.lr, cfg.weight_decay)
            } else {
                AdamHyper::new(cfg.lr, 0.0)
            };
            let value = model.params.value_mut(*id).data_mut();
            if let Err(e) = adam_step(value, &grad, &mut adam[*id], &hyper) {
                grad_failure = Some(format!("{e} at epoch {epoch}"));
                break;
            }
        }
        if let Some(reason) = grad_failure {
            collapsed = true;
            collapse_reason = Some(reason);
            break;
        }
        epochs_run = epoch + 1;

        // Eval pass (no dropout, no RNG consumption).
        let mut eval_tape = Tape::new(0);
        let eval = model.forward(&mut eval_tape, &operator, &x, false)?;
        let vl_node = eval_tape.nll_loss(eval.log_probs, labels, &val_mask)?;
        let vl = eval_tape.value(vl_node).item();
        let lp = eval_tape.value(eval.log_probs);
        train_acc.push(accuracy(lp, labels, &train_mask));
        let va = accuracy(lp, labels, &val_mask);
        val_acc.push(va);
        val_loss.push(vl);

        // Best-validation epoch: accuracy first, loss breaks ties, so a
        // saturated small validation split still tracks real progress.
        if va > best_val || (va == best_val && vl < best_val_loss) {
            best_val = va;
            best_val_loss = vl;
            best_epoch = epoch;
            best_checkpoint = checkpoint::to_bytes(&model);
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    // Test exactly once, from the best-validation snapshot.
    let best_model = checkpoint::from_bytes(&best_checkpoint)?;
    let mut test_tape = Tape::new(0);
    let test_trace = best_model.forward(&mut test_tape, &operator, &x, false)?;
    let lp = test_tape.value(test_trace.log_probs);
    let test_acc = accuracy(lp, labels, &test_mask);

    let preds = predictions(lp);
    let masked: Vec<usize> = preds
        .iter()
        .zip(&test_mask)
        .filter_map(|(&p, &m)| m.then_some(p))
        .collect();
    if masked.windows(2).all(|w| w[0] == w[1]) && dataset.classes > 1 {
        collapsed = true;
        collapse_reason
            .get_or_insert_with(|| "constant prediction over the test split".to_string());
    }

    let learned_shape: Vec<f64> = best_model
        .shape_param_values()
        .iter()
        .map(|(_, v)| *v)
        .collect();

    Ok(ExperimentResult {
        config: cfg.clone(),
        epochs_run,
        best_epoch,
        train_loss,
        train_acc,
        val_acc,
        val_loss,
        test_acc,
        collapsed,
        collapse_reason,
        shape_names,
        shape_trajectory,
        learned_shape,
        telemetry: cfg.record_telemetry.then_some(telemetry),
        best_checkpoint,
        wall_time: started.elapsed(),
    })
}

/// Aggregate of a k-fold run.
#[derive(Debug, Clone, Serialize)]
pub struct KfoldResult {
    pub per_fold: Vec<ExperimentResult>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    /// Collapsed folds still count into the mean (their raw accuracy is
    /// data), but never silently: the count is part of the aggregate.
    pub n_collapsed: usize,
}

/// Cyclic-fold protocol: fold `f` tests, fold `f+1` validates, the rest
/// trains; every fold gets its own derived seed.
pub fn run_kfold(cfg: &TrainConfig, dataset: &Dataset) -> Result<KfoldResult, TrainError> {
    let (assignment, count) = match &dataset.splits {
        Splits::Folds { assignment, count } => (assignment.clone(), *count),
        Splits::Masks { .. } => return Err(TrainError::NeedFolds),
    };
    let mut per_fold = Vec::with_capacity(count);
    for fold in 0..count {
        let (train, val, test) = fold_masks(&assignment, count, fold);
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = derive_seed(cfg.seed, 0x0f01d + fold as u64);
        per_fold.push(train_with_masks(&fold_cfg, dataset, train, val, test)?);
    }
    let accs: Vec<f64> = per_fold.iter().map(|r| r.test_acc).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    Ok(KfoldResult {
        n_collapsed: per_fold.iter().filter(|r| r.collapsed).count(),
        per_fold,
        mean_test_acc: mean,
        std_test_acc: var.sqrt(),
    })
}

/// One cell of the K-ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub k: usize,
    pub seed: u64,
    pub test_acc: f64,
    pub collapsed: bool,
    pub max_activation: f64,
    pub learned_shape: Vec<f64>,
}

/// Runs every (model, K, seed) cell on a bounded worker pool; seeds are
/// shared across models so comparisons are paired.
pub fn sweep_k(
    base: &TrainConfig,
    models: &[ModelKind],
    k_list: &[usize],
    seeds: &[u64],
    dataset: &Dataset,
    jobs: usize,
) -> Result<Vec<(SweepRow, ExperimentResult)>, TrainError> {
    let mut cells = Vec::new();
    for &model in models {
        for &k in k_list {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.model = model;
                cfg.k = k;
                cfg.seed = seed;
                cfg.record_telemetry = true;
                cells.push(cfg);
            }
        }
    }
    let results = run_pool(jobs, &cells, |cfg| train_one(cfg, dataset))?;
    Ok(cells
        .iter()
        .zip(results)
        .map(|(cfg, result)| {
            let row = SweepRow {
                model: cfg.model,
                k: cfg.k,
                seed: cfg.seed,
                test_acc: result.test_acc,
                collapsed: result.collapsed,
                max_activation: result.max_activation(),
                learned_shape: result.learned_shape.clone(),
            };
            (row, result)
        })
        .collect())
}

/// Maps jobs over a bounded rayon pool, preserving input order. `jobs <= 1`
/// runs inline.
pub fn run_pool<I, T, E, F>(jobs: usize, items: &[I], f: F) -> Result<Vec<T>, E>
where
    I: Sync,
    T: Send,
    E: Send,
    F: Fn(&I) -> Result<T, E> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("worker pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Final shape parameters with drift from initialization.
#[derive(Debug, Clone, Serialize)]
pub struct LearnedParams {
    pub names: Vec<String>,
    pub init: Vec<f64>,
    pub learned: Vec<f64>,
    /// Sum of absolute deviations from the initial values.
    pub drift: f64,
}

/// Reports the learned shape parameters of an adaptive run; rejected for
/// configurations whose shape is permanently fixed.
pub fn report_learned_params(result: &ExperimentResult) -> Result<LearnedParams, TrainError> {
    if !result.config.model.has_adaptive_shape() {
        return Err(TrainError::StaticShape(result.config.model.name().into()));
    }
    let init = shape_init_values(result.config.model, result.config.shape_lr == 0.0);
    let drift: f64 = result
        .learned_shape
        .iter()
        .zip(&init)
        .map(|(l, i)| (l - i).abs())
        .sum();
    Ok(LearnedParams {
        names: result.shape_names.clone(),
        init,
        learned: result.learned_shape.clone(),
        drift,
    })
}

/// The values a model's shape parameters actually start at. Trainable
/// parameters live behind the bounded sigmoid map, so their representable
/// start is `constrain(unconstrain(nominal))`; frozen ones are the nominal
/// constants themselves.
pub fn shape_init_values(kind: ModelKind, frozen: bool) -> Vec<f64> {
    let (spec, _) = crate::model::named_spec(kind, !frozen, 1);
    let nominal = spec.params.param_values();
    if frozen || !kind.has_adaptive_shape() {
        return nominal;
    }
    nominal
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bounds = spec.params.param_bounds(i);
            bounds.constrain(bounds.unconstrain(v))
        })
        .collect()
}
