//! Downstream evaluation: linear probing under nested cross-validation,
//! transfer and data-scaling runs.
//!
//! The outer loop splits the labelled set into stratified folds; within each
//! outer training portion, inner stratified folds choose the probe learning
//! rate. Only outer training samples ever reach probe fitting or model
//! selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::connectome::BrainGraph;
use crate::dataset::Dataset;
use crate::encoder::{embed_and_backprop, encode_all, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::{stream, Rng, TAG_FOLDS, TAG_PROBE};
use crate::tape::Mat;
use crate::trainer::{pretrain, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    Frozen,
    Unfrozen,
}

impl std::str::FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(ProbeMode::Frozen),
            "unfrozen" => Ok(ProbeMode::Unfrozen),
            other => Err(Error::InvalidConfig(format!("unknown probe mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub n_runs: usize,
    pub probe_epochs: usize,
    pub probe_lr_grid: Vec<f64>,
    pub batch_size: usize,
    /// Backbone learning rate in unfrozen mode.
    pub finetune_learning_rate: f64,
    /// Epochs without relative training-loss improvement above
    /// `plateau_tolerance` before stopping early.
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Frozen,
            outer_folds: 5,
            inner_folds: 3,
            n_runs: 10,
            probe_epochs: 100,
            probe_lr_grid: vec![1e-2, 1e-3, 1e-4],
            batch_size: 32,
            finetune_learning_rate: 1e-4,
            plateau_patience: 10,
            plateau_tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_folds < 2 || self.inner_folds < 2 {
            return Err(Error::InvalidConfig("outer_folds and inner_folds must be >= 2".into()));
        }
        if self.n_runs == 0 || self.probe_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("n_runs, probe_epochs and batch_size must be >= 1".into()));
        }
        if self.probe_lr_grid.is_empty() || self.probe_lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("probe_lr_grid must hold positive learning rates".into()));
        }
        if !(self.finetune_learning_rate > 0.0) {
            return Err(Error::InvalidConfig("finetune_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub method: String,
    /// `"transfer"` for transfer evaluations.
    pub tag: Option<String>,
    pub mode: ProbeMode,
    /// Percentages.
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub per_run: Vec<f64>,
    pub per_fold: Vec<Vec<f64>>,
    pub majority_class_accuracy: f64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub config: ProbeConfig,
}

impl ProbeReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Frequency of the most common label, in percent.
pub fn majority_class(labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no labels".into()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap();
    Ok(100.0 * best as f64 / labels.len() as f64)
}

/// Stratified partition of `labels` into `k` folds. Each class is shuffled
/// and dealt round-robin, continuing the deal across classes so fold sizes
/// differ by at most one. Indices within a fold are ascending.
pub fn stratified_folds(labels: &[u32], k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidConfig("need at least two folds".into()));
    }
    if labels.len() < k {
        return Err(Error::InvalidInput(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(rng);
        for &i in members.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Linear softmax classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `d x n_classes`.
    pub weight: Mat,
    /// `1 x n_classes`.
    pub bias: Mat,
}

impl LinearProbe {
    fn standardize(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let mut z = self.standardize(x) * &self.weight;
        for mut r in z.row_iter_mut() {
            r += &self.bias;
        }
        z
    }

    pub fn predict(&self, x: &Mat) -> Vec<u32> {
        self.logits(x)
            .row_iter()
            .map(|r| {
                // First maximum wins ties.
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

fn select_rows(x: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn column_stats(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for c in x.column_iter() {
        let m = c.sum() / n;
        let v = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        scale.push(if v > 1e-24 { v.sqrt() } else { 1.0 });
    }
    (mean, scale)
}

/// Softmax cross-entropy and its gradient with respect to the logits, both
/// averaged over rows.
fn softmax_xent(logits: &Mat, y: &[u32]) -> (f64, Mat) {
    let mut g = logits.clone();
    let mut loss = 0.0;
    let n = logits.nrows() as f64;
    for (i, mut row) in g.row_iter_mut().enumerate() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
        let c = y[i] as usize;
        loss -= row[c].max(1e-300).ln();
        row[c] -= 1.0;
        row /= n;
    }
    (loss / n, g)
}

/// Plateau tracker on per-epoch training loss.
struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
    tolerance: f64,
}

impl Plateau {
    fn new(cfg: &ProbeConfig) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            patience: cfg.plateau_patience,
            tolerance: cfg.plateau_tolerance,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.tolerance * self.best.abs().max(1e-12) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

/// Fits a linear probe on `x` (raw features) with labels `y`.
pub fn train_linear(x: &Mat, y: &[u32], n_classes: usize, lr: f64, cfg: &ProbeConfig, rng: &mut Rng) -> LinearProbe {
    let (mean, scale) = column_stats(x);
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Mat::zeros(x.ncols(), n_classes),
        bias: Mat::zeros(1, n_classes),
    };
    let xs = probe.standardize(x);
    let mut params = ParamSet::new();
    params.insert("weight", probe.weight.clone());
    params.insert("bias", probe.bias.clone());
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..Default::default()
        },
        &params,
    );
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut plateau = Plateau::new(cfg);
    for _ in 0..cfg.probe_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = select_rows(&xs, batch);
            let yb: Vec<u32> = batch.iter().map(|&i| y[i]).collect();
            let w = params.get("weight").unwrap();
            let mut z = &xb * w;
            let b = params.get("bias").unwrap();
            for mut r in z.row_iter_mut() {
                r += b;
            }
            let (loss, g) = softmax_xent(&z, &yb);
            epoch_loss += loss * batch.len() as f64;
            let mut grads = ParamSet::new();
            grads.insert("weight", xb.transpose() * &g);
            let cs = g.row_sum();
            grads.insert("bias", Mat::from_row_slice(1, cs.len(), cs.as_slice()));
            adam.update(&mut params, &grads);
        }
        if plateau.observe(epoch_loss / x.nrows() as f64) {
            break;
        }
    }
    probe.weight = params.get("weight").unwrap().clone();
    probe.bias = params.get("bias").unwrap().clone();
    probe
}

fn accuracy(pred: &[u32], y: &[u32]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64
}

/// Outcome of one (run, outer fold) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    /// Fraction of test samples classified correctly.
    pub accuracy: f64,
    pub learning_rate: f64,
    pub probe: LinearProbe,
}

fn gather(labels: &[u32], idx: &[usize]) -> Vec<u32> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Inner-fold selection of the probe learning rate followed by a fit on the
/// whole training portion. `labels` is only read at `train` indices, except
/// for scoring at `test` indices.
pub fn evaluate_cell(
    features: &Mat,
    labels: &[u32],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    run: usize,
    fold: usize,
) -> Result<CellResult> {
    let y_train = gather(labels, train);
    let x_train = select_rows(features, train);
    let lr = select_learning_rate(&y_train, cfg, run, fold, |inner_train, inner_val, lr, rng| {
        let x_tr = select_rows(&x_train, inner_train);
        let probe = train_linear(&x_tr, &gather(&y_train, inner_train), n_classes, lr, cfg, rng);
        Ok(accuracy(&probe.predict(&select_rows(&x_train, inner_val)), &gather(&y_train, inner_val)))
    })?;
    let mut rng = stream(cfg.seed, &[TAG_PROBE, run as u64, fold as u64]);
    let probe = train_linear(&x_train, &y_train, n_classes, lr, cfg, &mut rng);
    let acc = accuracy(&probe.predict(&select_rows(features, test)), &gather(labels, test));
    Ok(CellResult {
        accuracy: acc,
        learning_rate: lr,
        probe,
    })
}

/// Mean inner validation accuracy per grid entry; the first best entry wins.
fn select_learning_rate(
    y_train: &[u32],
    cfg: &ProbeConfig,
    run: usize,
    fold: usize,
    mut score: impl FnMut(&[usize], &[usize], f64, &mut Rng) -> Result<f64>,
) -> Result<f64> {
    if cfg.probe_lr_grid.len() == 1 {
        return Ok(cfg.probe_lr_grid[0]);
    }
    let inner = stratified_folds(
        y_train,
        cfg.inner_folds,
        &mut stream(cfg.seed, &[TAG_FOLDS, run as u64, 1 + fold as u64]),
    )?;
    let mut best = (f64::NEG_INFINITY, cfg.probe_lr_grid[0]);
    for (li, &lr) in cfg.probe_lr_grid.iter().enumerate() {
        let mut total = 0.0;
        for (vi, val) in inner.iter().enumerate() {
            let tr: Vec<usize> = inner
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != vi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let mut rng = stream(
                cfg.seed,
                &[TAG_PROBE, run as u64, fold as u64, 1 + li as u64, 1 + vi as u64],
            );
            total += score(&tr, val, lr, &mut rng)?;
        }
        let mean = total / inner.len() as f64;
        if mean > best.0 {
            best = (mean, lr);
        }
    }
    Ok(best.1)
}

fn check_labels(labels: &[u32], cfg: &ProbeConfig) -> Result<usize> {
    if labels.len() < cfg.outer_folds {
        return Err(Error::InvalidInput(format!(
            "{} samples are fewer than {} outer folds",
            labels.len(),
            cfg.outer_folds
        )));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::InvalidInput("dataset has a single class".into()));
    }
    Ok(*labels.iter().max().unwrap() as usize + 1)
}

fn run_protocol(
    labels: &[u32],
    task: &str,
    cfg: &ProbeConfig,
    mut cell: impl FnMut(&[usize], &[usize], usize, usize) -> Result<f64>,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let n_classes = check_labels(labels, cfg)?;
    let mut per_fold = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let folds = stratified_folds(labels, cfg.outer_folds, &mut stream(cfg.seed, &[TAG_FOLDS, run as u64, 0]))?;
        let mut accs = Vec::with_capacity(folds.len());
        for (f, test) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            accs.push(100.0 * cell(&train, test, run, f)?);
        }
        log::debug!("{task}: run {run} fold accuracies {accs:?}");
        per_fold.push(accs);
    }
    let per_run: Vec<f64> = per_fold.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&per_run);
    Ok(ProbeReport {
        task: task.to_string(),
        method: String::new(),
        tag: None,
        mode: cfg.mode,
        accuracy_mean,
        accuracy_std,
        per_run,
        per_fold,
        majority_class_accuracy: majority_class(labels)?,
        n_samples: labels.len(),
        n_classes,
        config: cfg.clone(),
    })
}

/// Frozen-mode protocol on precomputed features (one row per sample).
pub fn probe_features(features: &Mat, labels: &[u32], task: &str, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.nrows() != labels.len() {
        return Err(Error::shape(
            format!("{} feature rows", labels.len()),
            format!("{} feature rows", features.nrows()),
        ));
    }
    let n_classes = check_labels(labels, cfg)?;
    run_protocol(labels, task, cfg, |train, test, run, fold| {
        Ok(evaluate_cell(features, labels, n_classes, train, test, cfg, run, fold)?.accuracy)
    })
}

/// Probes `ckpt`'s backbone on a labelled dataset. Heads in the checkpoint
/// are ignored.
pub fn probe(ckpt: &Checkpoint, dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let labels = dataset.labels()?;
    let task = dataset.manifest.name.clone();
    match cfg.mode {
        ProbeMode::Frozen => {
            let features = encode_all(&dataset.graphs, &ckpt.encoder, &ckpt.encoder_config)?;
            probe_features(&features, &labels, &task, cfg)
        }
        ProbeMode::Unfrozen => {
            let n_classes = check_labels(&labels, cfg)?;
            run_protocol(&labels, &task, cfg, |train, test, run, fold| {
                finetune_cell(&ckpt.encoder, &ckpt.encoder_config, &dataset.graphs, &labels, n_classes, train, test, cfg, run, fold)
            })
        }
    }
}

/// Same mechanics as [`probe`]; the report is tagged as a transfer result.
pub fn transfer_eval(ckpt: &Checkpoint, unseen: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut r = probe(ckpt, unseen, cfg)?;
    r.tag = Some("transfer".into());
    Ok(r)
}

struct FineTuned {
    encoder: ParamSet,
    probe: LinearProbe,
}

/// Jointly trains backbone and linear head on `train` (indices into
/// `graphs`). Standardization statistics come from the initial embeddings
/// and stay fixed.
#[allow(clippy::too_many_arguments)]
fn finetune(
    encoder: &ParamSet,
    enc_cfg: &EncoderConfig,
    graphs: &[BrainGraph],
    labels: &[u32],
    n_classes: usize,
    train: &[usize],
    lr: f64,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<FineTuned> {
    let sub: Vec<BrainGraph> = train.iter().map(|&i| graphs[i].clone()).collect();
    let x0 = encode_all(&sub, encoder, enc_cfg)?;
    let (mean, scale) = column_stats(&x0);
    let mut params = ParamSet::new();
    params.extend_prefixed("encoder.", encoder);
    params.insert("head.weight", Mat::zeros(enc_cfg.embedding_dim, n_classes));
    params.insert("head.bias", Mat::zeros(1, n_classes));
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: 1.0,
            ..Default::default()
        },
        &params,
    );
    let d = enc_cfg.embedding_dim;
    let mut order: Vec<usize> = (0..sub.len()).collect();
    let mut plateau = Plateau::new(cfg);
    for _ in 0..cfg.probe_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let enc = params.strip_prefix("encoder.");
            let xb = encode_all(&batch.iter().map(|&i| sub[i].clone()).collect::<Vec<_>>(), &enc, enc_cfg)?;
            let xs = Mat::from_fn(xb.nrows(), d, |i, j| (xb[(i, j)] - mean[j]) / scale[j]);
            let w = params.get("head.weight").unwrap().clone();
            let mut z = &xs * &w;
            let b = params.get("head.bias").unwrap();
            for mut r in z.row_iter_mut() {
                r += b;
            }
            let yb: Vec<u32> = batch.iter().map(|&i| labels[train[i]]).collect();
            let (loss, g) = softmax_xent(&z, &yb);
            epoch_loss += loss * batch.len() as f64;
            let mut grads = params.zeros_like();
            *grads.get_mut("head.weight").unwrap() = xs.transpose() * &g;
            let cs = g.row_sum();
            *grads.get_mut("head.bias").unwrap() = Mat::from_row_slice(1, cs.len(), cs.as_slice());
            let up = &g * w.transpose();
            let mut enc_grads = enc.zeros_like();
            for (r, &i) in batch.iter().enumerate() {
                let row = Mat::from_fn(1, d, |_, j| up[(r, j)] / scale[j]);
                let (_, eg) = embed_and_backprop(&sub[i], &enc, enc_cfg, &row, None)?;
                enc_grads.add_scaled(&eg, 1.0);
            }
            grads.extend_prefixed("encoder.", &enc_grads);
            // Adam steps are linear in the learning rate: take a unit step and
            // rescale it per parameter group.
            let before = params.clone();
            adam.update(&mut params, &grads);
            for (name, p) in params.iter_mut() {
                let rate = if name.starts_with("encoder.") { cfg.finetune_learning_rate } else { lr };
                let old = before.get(name).unwrap();
                *p = old + (&*p - old) * rate;
            }
        }
        if plateau.observe(epoch_loss / sub.len() as f64) {
            break;
        }
    }
    Ok(FineTuned {
        encoder: params.strip_prefix("encoder."),
        probe: LinearProbe {
            mean,
            scale,
            weight: params.get("head.weight").unwrap().clone(),
            bias: params.get("head.bias").unwrap().clone(),
        },
    })
}

fn finetuned_accuracy(ft: &FineTuned, enc_cfg: &EncoderConfig, graphs: &[BrainGraph], labels: &[u32], idx: &[usize]) -> Result<f64> {
    let sub: Vec<BrainGraph> = idx.iter().map(|&i| graphs[i].clone()).collect();
    let x = encode_all(&sub, &ft.encoder, enc_cfg)?;
    Ok(accuracy(&ft.probe.predict(&x), &gather(labels, idx)))
}

#[allow(clippy::too_many_arguments)]
fn finetune_cell(
    encoder: &ParamSet,
    enc_cfg: &EncoderConfig,
    graphs: &[BrainGraph],
    labels: &[u32],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    run: usize,
    fold: usize,
) -> Result<f64> {
    let y_train = gather(labels, train);
    let lr = select_learning_rate(&y_train, cfg, run, fold, |inner_train, inner_val, lr, rng| {
        let tr: Vec<usize> = inner_train.iter().map(|&i| train[i]).collect();
        let va: Vec<usize> = inner_val.iter().map(|&i| train[i]).collect();
        let ft = finetune(encoder, enc_cfg, graphs, labels, n_classes, &tr, lr, cfg, rng)?;
        finetuned_accuracy(&ft, enc_cfg, graphs, labels, &va)
    })?;
    let mut rng = stream(cfg.seed, &[TAG_PROBE, run as u64, fold as u64]);
    let ft = finetune(encoder, enc_cfg, graphs, labels, n_classes, train, lr, cfg, &mut rng)?;
    finetuned_accuracy(&ft, enc_cfg, graphs, labels, test)
}

/// One point of a scaling curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_pools: usize,
    pub pool_names: Vec<String>,
    pub n_subjects: usize,
    pub reports: Vec<ProbeReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
}

/// Pretrains from scratch on every prefix union of `pools` and probes each
/// downstream task. Pretraining runs are written under
/// `run_dir/pool-<n>` when `run_dir` is given.
pub fn scaling_run(
    pools: &[Dataset],
    tasks: &[Dataset],
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    run_dir: Option<&Path>,
) -> Result<ScalingReport> {
    if pools.is_empty() {
        return Err(Error::InvalidInput("scaling run needs at least one pool".into()));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidInput("scaling run needs at least one downstream task".into()));
    }
    let mut points = Vec::with_capacity(pools.len());
    let mut union: Vec<BrainGraph> = Vec::new();
    let mut names = Vec::new();
    for (i, pool) in pools.iter().enumerate() {
        union.extend(pool.graphs.iter().cloned());
        names.push(pool.manifest.name.clone());
        let data = Dataset::new(names.join("+"), union.clone(), pool.manifest.split_seed);
        let dir = run_dir.map(|d| d.join(format!("pool-{}", i + 1)));
        log::info!("scaling: pretraining on {} subjects from {} pool(s)", union.len(), i + 1);
        let ckpt = pretrain(&data, train_cfg, dir.as_deref())?;
        let reports = tasks
            .iter()
            .map(|t| Ok(probe(&ckpt, t, probe_cfg)?.with_method(format!("pools={}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        points.push(ScalingPoint {
            n_pools: i + 1,
            pool_names: names.clone(),
            n_subjects: union.len(),
            reports,
        });
    }
    Ok(ScalingReport { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn majority_examples() {
        let mut l = vec![1u32; 516];
        l.extend(vec![0u32; 484]);
        assert!((majority_class(&l).unwrap() - 51.6).abs() < 1e-9);
        assert_eq!(majority_class(&[0, 1, 0, 1]).unwrap(), 50.0);
        assert_eq!(majority_class(&[2, 2, 2]).unwrap(), 100.0);
        assert!(majority_class(&[]).is_err());
    }

    #[test]
    fn folds_are_stratified_partitions() {
        let labels: Vec<u32> = (0..53).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
        let folds = stratified_folds(&labels, 5, &mut stream(1, &[])).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        for f in &folds {
            let ones = f.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let expect = 18.0 / 5.0;
            assert!((ones - expect).abs() <= 1.0);
        }
    }

    #[test]
    fn separable_features_probe_well() {
        let mut rng = stream(5, &[]);
        let labels: Vec<u32> = (0..60).map(|i| (i % 2) as u32).collect();
        let x = Mat::from_fn(60, 2, |i, j| {
            let s = if labels[i] == 1 { 2.0 } else { -2.0 };
            if j == 0 { s + rng.random_range(-0.5..0.5) } else { rng.random_range(-1.0..1.0) }
        });
        let cfg = ProbeConfig { n_runs: 2, probe_epochs: 30, ..Default::default() };
        let r = probe_features(&x, &labels, "toy", &cfg).unwrap();
        assert!(r.accuracy_mean > 95.0, "{}", r.accuracy_mean);
        let (m, s) = mean_std(&r.per_run);
        assert!((m - r.accuracy_mean).abs() < 1e-9 && (s - r.accuracy_std).abs() < 1e-9);
    }

    #[test]
    fn single_class_rejected() {
        let x = Mat::zeros(10, 2);
        assert!(probe_features(&x, &[1; 10], "t", &ProbeConfig::default()).is_err());
        assert!(probe_features(&Mat::zeros(3, 2), &[0, 1, 0], "t", &ProbeConfig::default()).is_err());
    }
}
