//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "HFCK"
//! version      u32      CHECKPOINT_SCHEMA_VERSION
//! header_len   u64      followed by header_len bytes of JSON header
//! tensors      f64 values of every tensor listed in the header, in order
//! ```
//!
//! Tensor groups are `encoder`, `heads`, `adam.m` and `adam.v`; the adam
//! groups cover the concatenation of encoder (`encoder.` prefix) and head
//! (`heads.` prefix) parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{check_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tape::Mat;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HFCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Shared low head plus one high head per view.
    Hfmca,
    /// Projector shared by both views of a two-view baseline.
    Projector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub kind: HeadKind,
    pub n_views: usize,
    pub params: ParamSet,
    /// Set on the final checkpoint of a run: the heads are not part of the
    /// downstream model.
    pub discardable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub steps: u64,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub dropped_samples: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
}

impl OptimizerState {
    pub fn from_adam(a: &Adam) -> Self {
        Self {
            config: a.config.clone(),
            step: a.step,
            first_moment: a.first_moment.clone(),
            second_moment: a.second_moment.clone(),
        }
    }

    pub fn into_adam(self) -> Adam {
        Adam {
            config: self.config,
            step: self.step,
            first_moment: self.first_moment,
            second_moment: self.second_moment,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub encoder_config: EncoderConfig,
    pub encoder: ParamSet,
    pub heads: Option<Heads>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub metrics: MetricsSummary,
    /// Configuration that produced this checkpoint, kept for resuming.
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn backbone(encoder_config: EncoderConfig, encoder: ParamSet) -> Result<Self> {
        check_params(&encoder, &encoder_config)?;
        Ok(Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            encoder_config,
            encoder,
            heads: None,
            optimizer: None,
            epoch: 0,
            metrics: MetricsSummary::default(),
            train_config: None,
        })
    }

    pub fn has_heads(&self) -> bool {
        self.heads.is_some()
    }
}

/// Backbone-only copy: heads and optimizer state removed.
pub fn strip_heads(ckpt: &Checkpoint) -> Checkpoint {
    Checkpoint {
        heads: None,
        optimizer: None,
        ..ckpt.clone()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct HeadsHeader {
    kind: HeadKind,
    n_views: usize,
    discardable: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder_config: EncoderConfig,
    epoch: usize,
    metrics: MetricsSummary,
    heads: Option<HeadsHeader>,
    optimizer: Option<OptimizerHeader>,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

fn groups(ckpt: &Checkpoint) -> Vec<(&'static str, &ParamSet)> {
    let mut g = vec![("encoder", &ckpt.encoder)];
    if let Some(h) = &ckpt.heads {
        g.push(("heads", &h.params));
    }
    if let Some(o) = &ckpt.optimizer {
        g.push(("adam.m", &o.first_moment));
        g.push(("adam.v", &o.second_moment));
    }
    g
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let groups = groups(ckpt);
    let tensors = groups
        .iter()
        .flat_map(|(group, set)| {
            set.iter().map(move |(name, m)| TensorEntry {
                group: group.to_string(),
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
        })
        .collect();
    let header = Header {
        encoder_config: ckpt.encoder_config.clone(),
        epoch: ckpt.epoch,
        metrics: ckpt.metrics.clone(),
        heads: ckpt.heads.as_ref().map(|h| HeadsHeader {
            kind: h.kind,
            n_views: h.n_views,
            discardable: h.discardable,
        }),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config.clone(),
            step: o.step,
        }),
        train_config: ckpt.train_config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, set) in groups {
        for (_, m) in set.iter() {
            // Row-major.
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut data = &bytes[16 + header_len..];

    let mut sets: std::collections::BTreeMap<String, ParamSet> = Default::default();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        if data.len() < n * 8 {
            return Err(bad("truncated tensor data"));
        }
        let vals: Vec<f64> = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[n * 8..];
        sets.entry(t.group.clone())
            .or_default()
            .insert(t.name.clone(), Mat::from_row_slice(t.rows, t.cols, &vals));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let encoder = sets.remove("encoder").unwrap_or_default();
    check_params(&encoder, &header.encoder_config)?;
    let heads = header.heads.map(|h| Heads {
        kind: h.kind,
        n_views: h.n_views,
        discardable: h.discardable,
        params: sets.remove("heads").unwrap_or_default(),
    });
    let optimizer = header.optimizer.map(|o| OptimizerState {
        config: o.config,
        step: o.step,
        first_moment: sets.remove("adam.m").unwrap_or_default(),
        second_moment: sets.remove("adam.v").unwrap_or_default(),
    });
    Ok(Checkpoint {
        schema_version: version,
        encoder_config: header.encoder_config,
        encoder,
        heads,
        optimizer,
        epoch: header.epoch,
        metrics: header.metrics,
        train_config: header.train_config,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
