//! Self-supervised pretraining loop.
//!
//! Each step embeds every view of every batch graph on its own tape, records
//! the heads and the loss on a small batch tape, and then replays each view
//! with the upstream embedding gradient to accumulate encoder gradients. Only
//! one view's activations are alive at a time.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, step,
//! subject, view)`, so resuming from a checkpoint continues the exact same
//! sequence as an uninterrupted run.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_n_views, AugmentationConfig};
use crate::baselines::{self, BaselineConfig, Method};
use crate::checkpoint::{save_checkpoint, Checkpoint, HeadKind, Heads, OptimizerState};
use crate::connectome::BrainGraph;
use crate::dataset::Dataset;
use crate::encoder::{embed_and_backprop, embed_row, init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::objective::{condition_number, record_loss, record_projections, HfmcaConfig, ProjectionHeads};
use crate::optim::{Adam, AdamConfig};
use crate::params::{affine, insert_affine, ParamSet, ParamVars};
use crate::rng::{stream, Rng, TAG_DROPOUT, TAG_HEADS, TAG_INIT, TAG_SHUFFLE, TAG_VIEWS};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Hfmca,
    Simclr,
    BarlowTwins,
    Vicreg,
    /// No pretraining; the checkpoint is the random initialization.
    None,
}

impl Objective {
    fn baseline(self) -> Option<Method> {
        match self {
            Objective::Simclr => Some(Method::Simclr),
            Objective::BarlowTwins => Some(Method::BarlowTwins),
            Objective::Vicreg => Some(Method::Vicreg),
            Objective::Hfmca | Objective::None => None,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hfmca" => Ok(Objective::Hfmca),
            "simclr" => Ok(Objective::Simclr),
            "barlow_twins" => Ok(Objective::BarlowTwins),
            "vicreg" => Ok(Objective::Vicreg),
            "none" => Ok(Objective::None),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub hfmca: HfmcaConfig,
    pub baseline: BaselineConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            optimizer: Optimizer::Adam,
            objective: Objective::Hfmca,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationConfig::default(),
            hfmca: HfmcaConfig::default(),
            baseline: BaselineConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.encoder.validate()?;
        self.augmentation.validate()?;
        self.hfmca.validate()?;
        self.baseline.validate()?;
        Ok(())
    }

    /// Views drawn per graph: `augmentation.n_views` for HFMCA, two for the
    /// baselines.
    pub fn n_views(&self) -> usize {
        match self.objective {
            Objective::Hfmca => self.augmentation.n_views,
            _ => 2,
        }
    }

    /// Smallest batch that takes an optimizer step.
    pub fn min_batch(&self) -> usize {
        match self.objective {
            Objective::Hfmca => self.hfmca.proj_dim + 1,
            _ => 2,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

fn init_projector(cfg: &TrainConfig, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let mut width = cfg.encoder.embedding_dim;
    for (i, &d) in cfg.baseline.projector_dims.iter().enumerate() {
        insert_affine(&mut p, &format!("proj.{i}"), width, d, rng);
        width = d;
    }
    p
}

fn record_projector(tape: &mut Tape, vars: &ParamVars, n_layers: usize, x: Var) -> Var {
    let mut h = x;
    for i in 0..n_layers {
        h = affine(tape, vars, &format!("proj.{i}"), h);
        if i + 1 < n_layers {
            h = tape.relu(h);
        }
    }
    h
}

/// Initial checkpoint: encoder and heads drawn from the configured seed,
/// fresh optimizer state.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let encoder = init_params(&cfg.encoder, &mut stream(cfg.seed, &[TAG_INIT]))?;
    let mut ckpt = Checkpoint::backbone(cfg.encoder.clone(), encoder)?;
    let mut hrng = stream(cfg.seed, &[TAG_HEADS]);
    ckpt.heads = match cfg.objective {
        Objective::None => None,
        Objective::Hfmca => Some(Heads {
            kind: HeadKind::Hfmca,
            n_views: cfg.n_views(),
            params: ProjectionHeads::init(cfg.encoder.embedding_dim, cfg.n_views(), &cfg.hfmca, &mut hrng)?.params,
            discardable: false,
        }),
        _ => Some(Heads {
            kind: HeadKind::Projector,
            n_views: 2,
            params: init_projector(cfg, &mut hrng),
            discardable: false,
        }),
    };
    if let Some(h) = &ckpt.heads {
        let all = combined(&ckpt.encoder, &h.params);
        ckpt.optimizer = Some(OptimizerState::from_adam(&Adam::new(cfg.adam(), &all)));
    }
    ckpt.train_config = Some(cfg.clone());
    Ok(ckpt)
}

fn combined(encoder: &ParamSet, heads: &ParamSet) -> ParamSet {
    let mut all = ParamSet::new();
    all.extend_prefixed("encoder.", encoder);
    all.extend_prefixed("heads.", heads);
    all
}

/// Pretrains from scratch for `cfg.epochs` epochs. When `run_dir` is given,
/// checkpoints are written to `run_dir/ckpt-<epoch>` and per-step metrics
/// are appended to `run_dir/metrics.log`.
pub fn pretrain(dataset: &Dataset, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<Checkpoint> {
    let ckpt = init_checkpoint(cfg)?;
    resume(ckpt, dataset, cfg, run_dir)
}

/// Continues training `ckpt` until `cfg.epochs` total epochs.
pub fn resume(mut ckpt: Checkpoint, dataset: &Dataset, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<Checkpoint> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("pretraining dataset is empty".into()));
    }
    if ckpt.encoder_config != cfg.encoder {
        return Err(Error::InvalidConfig("checkpoint encoder config differs from the run config".into()));
    }
    if let Some(g) = dataset.graphs.iter().find(|g| g.feature_dim() != cfg.encoder.input_dim) {
        return Err(Error::InvalidConfig(format!(
            "encoder.input_dim is {} but subject `{}` has {} node features",
            cfg.encoder.input_dim,
            g.subject_id,
            g.feature_dim()
        )));
    }
    if ckpt.epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is at epoch {} beyond the configured {} epochs",
            ckpt.epoch, cfg.epochs
        )));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ckpt.train_config = Some(cfg.clone());

    let mut last_good: Option<PathBuf> = None;
    if cfg.objective != Objective::None {
        let heads = ckpt.heads.take().ok_or_else(|| Error::InvalidInput("checkpoint has no heads to train".into()))?;
        let optimizer = ckpt
            .optimizer
            .take()
            .ok_or_else(|| Error::InvalidInput("checkpoint has no optimizer state".into()))?;
        let mut state = State {
            params: combined(&ckpt.encoder, &heads.params),
            adam: optimizer.into_adam(),
            heads_meta: (heads.kind, heads.n_views),
        };
        let mut log = match run_dir {
            Some(dir) => {
                let p = dir.join("metrics.log");
                Some((OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let n = dataset.len();
        let bs = cfg.batch_size.min(n);
        for epoch in ckpt.epoch..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, cfg.augmentation.rng_seed, epoch as u64]));
            let mut losses = Vec::new();
            for (step, batch) in order.chunks(bs).enumerate() {
                if batch.len() < cfg.min_batch() {
                    log::info!(
                        "epoch {epoch}: dropping final batch of {} < {} samples",
                        batch.len(),
                        cfg.min_batch()
                    );
                    ckpt.metrics.dropped_samples += batch.len() as u64;
                    continue;
                }
                let stats = train_step(&mut state, &dataset.graphs, batch, epoch, step, cfg).map_err(|e| {
                    Error::TrainingAborted {
                        epoch,
                        reason: e.to_string(),
                        last_good: last_good.clone(),
                    }
                })?;
                ckpt.metrics.steps += 1;
                losses.push(stats.loss);
                if let Some((f, p)) = log.as_mut() {
                    let line = serde_json::json!({
                        "step": ckpt.metrics.steps,
                        "epoch": epoch,
                        "loss": stats.loss,
                        "cond_rl": stats.cond_low,
                        "cond_rh": stats.cond_high,
                    });
                    writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
                }
            }
            if losses.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "no batch reaches the minimum of {} samples ({} subjects, batch size {})",
                    cfg.min_batch(),
                    n,
                    cfg.batch_size
                )));
            }
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            log::debug!("epoch {epoch}: mean loss {mean:.6}");
            ckpt.metrics.epoch_losses.push(mean);
            ckpt.epoch = epoch + 1;
            state.write_into(&mut ckpt, false);
            if let Some(dir) = run_dir {
                if cfg.checkpoint_every > 0 && ckpt.epoch % cfg.checkpoint_every == 0 && ckpt.epoch < cfg.epochs {
                    let p = checkpoint_path(dir, ckpt.epoch);
                    save_checkpoint(&ckpt, &p)?;
                    last_good = Some(p);
                }
            }
            ckpt.heads = None;
            ckpt.optimizer = None;
        }
        state.write_into(&mut ckpt, true);
    }
    if let Some(dir) = run_dir {
        save_checkpoint(&ckpt, &checkpoint_path(dir, ckpt.epoch))?;
    }
    Ok(ckpt)
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt-{epoch}"))
}

/// Highest-epoch checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch: usize = name.strip_prefix("ckpt-")?.parse().ok()?;
            Some((epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
        .ok_or_else(|| Error::InvalidInput(format!("no checkpoints in {}", run_dir.display())))
}

struct State {
    params: ParamSet,
    adam: Adam,
    heads_meta: (HeadKind, usize),
}

impl State {
    fn write_into(&self, ckpt: &mut Checkpoint, discardable: bool) {
        ckpt.encoder = self.params.strip_prefix("encoder.");
        ckpt.heads = Some(Heads {
            kind: self.heads_meta.0,
            n_views: self.heads_meta.1,
            params: self.params.strip_prefix("heads."),
            discardable,
        });
        ckpt.optimizer = Some(OptimizerState::from_adam(&self.adam));
    }
}

struct StepStats {
    loss: f64,
    cond_low: Option<f64>,
    cond_high: Option<f64>,
}

fn dropout_stream(cfg: &TrainConfig, epoch: usize, step: usize, idx: usize, view: usize) -> Option<Rng> {
    (cfg.encoder.dropout > 0.0)
        .then(|| stream(cfg.seed, &[TAG_DROPOUT, epoch as u64, step as u64, idx as u64, view as u64]))
}

fn train_step(
    state: &mut State,
    graphs: &[BrainGraph],
    batch: &[usize],
    epoch: usize,
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let n_views = cfg.n_views();
    let encoder = state.params.strip_prefix("encoder.");
    let heads = state.params.strip_prefix("heads.");
    let d = cfg.encoder.embedding_dim;

    let views: Vec<Vec<BrainGraph>> = batch
        .iter()
        .map(|&idx| {
            let mut rng = stream(
                cfg.seed,
                &[TAG_VIEWS, cfg.augmentation.rng_seed, epoch as u64, step as u64, idx as u64],
            );
            make_n_views(&graphs[idx], &cfg.augmentation, n_views, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut embeddings = vec![Mat::zeros(batch.len(), d); n_views];
    for (i, (&idx, vs)) in batch.iter().zip(&views).enumerate() {
        for (t, g) in vs.iter().enumerate() {
            let row = embed_row(g, &encoder, &cfg.encoder, dropout_stream(cfg, epoch, step, idx, t).as_mut())?;
            embeddings[t].row_mut(i).copy_from(&row);
        }
    }

    let mut tape = Tape::new();
    let head_vars = heads.register(&mut tape);
    let view_vars: Vec<Var> = embeddings.into_iter().map(|m| tape.param(m)).collect();
    let (loss, cond_low, cond_high) = match cfg.objective.baseline() {
        None => {
            let (z_low, z_high) = record_projections(&mut tape, &head_vars, &view_vars);
            let (loss, block) = record_loss(&mut tape, z_low, z_high, cfg.hfmca.ridge())?;
            (
                loss,
                Some(condition_number(tape.value(block.r_low))),
                Some(condition_number(tape.value(block.r_high))),
            )
        }
        Some(method) => {
            let layers = cfg.baseline.projector_dims.len();
            let a = record_projector(&mut tape, &head_vars, layers, view_vars[0]);
            let b = record_projector(&mut tape, &head_vars, layers, view_vars[1]);
            (baselines::record_loss(&mut tape, method, a, b, &cfg.baseline)?, None, None)
        }
    };
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    let grads = tape.backward(loss);
    let head_grads = heads.gradients(&head_vars, &grads);

    let mut enc_grads = encoder.zeros_like();
    for (t, &v) in view_vars.iter().enumerate() {
        let upstream = grads.get_or_zeros(v, batch.len(), d);
        for (i, &idx) in batch.iter().enumerate() {
            let row = upstream.rows(i, 1).into_owned();
            if row.iter().all(|x| *x == 0.0) {
                continue;
            }
            let (_, g) = embed_and_backprop(
                &views[i][t],
                &encoder,
                &cfg.encoder,
                &row,
                dropout_stream(cfg, epoch, step, idx, t).as_mut(),
            )?;
            enc_grads.add_scaled(&g, 1.0);
        }
    }
    let all_grads = combined(&enc_grads, &head_grads);
    if !all_grads.all_finite() {
        return Err(Error::NonFinite(format!("gradients at step {step}")));
    }
    state.adam.update(&mut state.params, &all_grads);
    if !state.params.all_finite() {
        return Err(Error::NonFinite(format!("parameters after step {step}")));
    }
    Ok(StepStats {
        loss: loss_value,
        cond_low,
        cond_high,
    })
}
