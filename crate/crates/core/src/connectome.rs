//! Time series to connectivity matrices to sparsified brain graphs.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

/// Per-region signal of one subject, `n_regions x n_timepoints`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub series: Mat,
    pub region_labels: Option<Vec<String>>,
}

impl RoiTimeSeries {
    pub fn new(subject_id: impl Into<String>, series: Mat) -> Result<Self> {
        let ts = Self {
            subject_id: subject_id.into(),
            series,
            region_labels: None,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn n_regions(&self) -> usize {
        self.series.nrows()
    }

    pub fn n_timepoints(&self) -> usize {
        self.series.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions() < 2 {
            return Err(Error::InvalidInput(format!(
                "{}: need at least 2 regions, got {}",
                self.subject_id,
                self.n_regions()
            )));
        }
        if self.n_timepoints() < 3 {
            return Err(Error::InvalidInput(format!(
                "{}: need at least 3 timepoints, got {}",
                self.subject_id,
                self.n_timepoints()
            )));
        }
        if self.series.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{}: series contains non-finite values",
                self.subject_id
            )));
        }
        if let Some(labels) = &self.region_labels {
            if labels.len() != self.n_regions() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} region labels for {} regions",
                    self.subject_id,
                    labels.len(),
                    self.n_regions()
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric Pearson correlation matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    pub subject_id: String,
    pub values: Mat,
}

impl ConnectivityMatrix {
    /// Wraps a matrix after checking symmetry, unit diagonal and range.
    pub fn new(subject_id: impl Into<String>, values: Mat) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::shape(format!("{n}x{n}"), format!("{n}x{}", values.ncols())));
        }
        for i in 0..n {
            if values[(i, i)] != 1.0 {
                return Err(Error::InvalidInput(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = values[(i, j)];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) = {v} outside [-1,1]")));
                }
                if v != values[(j, i)] {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) breaks symmetry")));
                }
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            values,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.values.nrows()
    }
}

/// Output of [`pearson_connectivity`] together with degenerate-region notes.
#[derive(Clone, Debug)]
pub struct Connectivity {
    pub matrix: ConnectivityMatrix,
    /// Regions whose series had zero variance.
    pub flat_regions: Vec<usize>,
}

/// Pearson correlation between every pair of regions.
///
/// A region with zero variance correlates 0 with every other region; its
/// index is reported in [`Connectivity::flat_regions`] and logged.
pub fn pearson_connectivity(ts: &RoiTimeSeries) -> Result<Connectivity> {
    ts.validate()?;
    let n = ts.n_regions();
    let t = ts.n_timepoints() as f64;

    let mut centered = ts.series.clone();
    let mut norms = vec![0.0; n];
    let mut flat = Vec::new();
    for (r, mut row) in centered.row_iter_mut().enumerate() {
        let mean = row.sum() / t;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        // Treat numerically-constant rows as flat.
        let scale = ts.series.row(r).amax().max(1.0);
        if norm <= 1e-12 * scale * t.sqrt() {
            flat.push(r);
            norms[r] = 0.0;
        } else {
            norms[r] = norm;
            row /= norm;
        }
    }
    if !flat.is_empty() {
        warn!(
            "{}: {} zero-variance region(s) {:?}; their correlations are set to 0",
            ts.subject_id,
            flat.len(),
            flat
        );
    }

    let gram = &centered * centered.transpose();
    let mut values = Mat::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                gram[(i, j)].clamp(-1.0, 1.0)
            };
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(Connectivity {
        matrix: ConnectivityMatrix {
            subject_id: ts.subject_id.clone(),
            values,
        },
        flat_regions: flat,
    })
}

/// `floor(n^2 / 400)` edges.
pub fn default_edge_budget(n_nodes: usize) -> usize {
    n_nodes * n_nodes / 400
}

/// How candidate edges are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSelection {
    /// Largest signed correlation first.
    #[default]
    Raw,
    /// Largest magnitude first.
    Absolute,
}

impl std::str::FromStr for EdgeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "absolute" => Ok(Self::Absolute),
            other => Err(Error::InvalidInput(format!(
                "unknown edge selection `{other}` (expected raw|absolute)"
            ))),
        }
    }
}

/// Sparsified connectivity graph of one subject.
///
/// Node features are the full correlation rows, so feature width stays equal
/// to the atlas size even after nodes are removed by augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrainGraph {
    pub subject_id: String,
    pub n_nodes: usize,
    /// `n_nodes x feature_dim`, row-major in storage.
    pub node_features: Mat,
    /// Undirected edges `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f64>,
    pub label: Option<u32>,
}

impl BrainGraph {
    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Checks the structural invariants: ordered pairs, no self-loops, no
    /// duplicates, aligned weights and feature rows.
    pub fn validate(&self) -> Result<()> {
        if self.node_features.nrows() != self.n_nodes {
            return Err(Error::shape(
                format!("{} feature rows", self.n_nodes),
                format!("{} feature rows", self.node_features.nrows()),
            ));
        }
        if self.edges.len() != self.edge_weights.len() {
            return Err(Error::shape(
                format!("{} edge weights", self.edges.len()),
                format!("{} edge weights", self.edge_weights.len()),
            ));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            if i >= j {
                return Err(Error::InvalidInput(format!("edge ({i},{j}) is not ordered i < j")));
            }
            if j >= self.n_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({i},{j}) out of range for {} nodes",
                    self.n_nodes
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::InvalidInput(format!("duplicate edge ({i},{j})")));
            }
        }
        Ok(())
    }

    /// Neighbor lists with edge indices, ordered by insertion.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            adj[i].push((j, e));
            adj[j].push((i, e));
        }
        adj
    }

    /// Subgraph induced by `keep` (node indices, any order; duplicates are
    /// ignored). Kept nodes are renumbered in ascending original order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> BrainGraph {
        let mut mask = vec![false; self.n_nodes];
        for &k in keep {
            mask[k] = true;
        }
        let mut new_index = vec![usize::MAX; self.n_nodes];
        let mut order = Vec::new();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                new_index[i] = order.len();
                order.push(i);
            }
        }
        let features = Mat::from_fn(order.len(), self.feature_dim(), |r, c| {
            self.node_features[(order[r], c)]
        });
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        for (&(i, j), &w) in self.edges.iter().zip(&self.edge_weights) {
            if mask[i] && mask[j] {
                edges.push((new_index[i], new_index[j]));
                weights.push(w);
            }
        }
        BrainGraph {
            subject_id: self.subject_id.clone(),
            n_nodes: order.len(),
            node_features: features,
            edges,
            edge_weights: weights,
            label: self.label,
        }
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> BrainGraph {
        assert_eq!(perm.len(), self.n_nodes);
        let mut features = Mat::zeros(self.n_nodes, self.feature_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from(&self.node_features.row(old));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (perm[i], perm[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        BrainGraph {
            subject_id: self.subject_id.clone(),
            n_nodes: self.n_nodes,
            node_features: features,
            edges,
            edge_weights: self.edge_weights.clone(),
            label: self.label,
        }
    }
}

/// Result of [`build_graph`]; `clamped` is set when the requested budget
/// exceeded the number of distinct pairs.
#[derive(Clone, Debug)]
pub struct BuiltGraph {
    pub graph: BrainGraph,
    pub clamped: bool,
}

/// Keeps the `edge_budget` strongest off-diagonal entries of `c` as edges.
///
/// Each unordered pair is a single candidate. Ties at the cutoff go to the
/// lexicographically smallest `(i, j)`.
pub fn build_graph(
    c: &ConnectivityMatrix,
    edge_budget: usize,
    selection: EdgeSelection,
) -> BuiltGraph {
    let n = c.n_regions();
    let max_pairs = n * n.saturating_sub(1) / 2;
    let clamped = edge_budget > max_pairs;
    if clamped {
        warn!(
            "{}: edge budget {edge_budget} exceeds {max_pairs} available pairs; clamping",
            c.subject_id
        );
    }
    let budget = edge_budget.min(max_pairs);

    let score = |i: usize, j: usize| match selection {
        EdgeSelection::Raw => c.values[(i, j)],
        EdgeSelection::Absolute => c.values[(i, j)].abs(),
    };
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(max_pairs);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    let rank = |a: &(usize, usize), b: &(usize, usize)| {
        score(b.0, b.1)
            .partial_cmp(&score(a.0, a.1))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.cmp(b))
    };
    if budget > 0 && budget < pairs.len() {
        pairs.select_nth_unstable_by(budget - 1, rank);
    }
    pairs.truncate(budget);
    pairs.sort_by(rank);

    let edge_weights = pairs.iter().map(|&(i, j)| c.values[(i, j)]).collect();
    BuiltGraph {
        graph: BrainGraph {
            subject_id: c.subject_id.clone(),
            n_nodes: n,
            node_features: c.values.clone(),
            edges: pairs,
            edge_weights,
            label: None,
        },
        clamped,
    }
}
