//! Stochastic graph views.

use log::warn;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    RandomWalk,
    NodeDrop,
    FeatureMask,
    EdgeRemove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub n_views: usize,
    pub walk_length: usize,
    pub walks_per_view: usize,
    pub node_drop_ratio: f64,
    pub feature_mask_ratio: f64,
    pub edge_remove_ratio: f64,
    pub pipeline: Vec<Transform>,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            n_views: 4,
            walk_length: 20,
            walks_per_view: 8,
            node_drop_ratio: 0.1,
            feature_mask_ratio: 0.1,
            edge_remove_ratio: 0.1,
            pipeline: vec![Transform::NodeDrop, Transform::FeatureMask, Transform::EdgeRemove],
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidConfig(format!(
                "augmentation.n_views must be >= 2, got {}",
                self.n_views
            )));
        }
        for (name, r) in [
            ("node_drop_ratio", self.node_drop_ratio),
            ("feature_mask_ratio", self.feature_mask_ratio),
            ("edge_remove_ratio", self.edge_remove_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "augmentation.{name} must lie in [0, 1), got {r}"
                )));
            }
        }
        if self.pipeline.is_empty() {
            return Err(Error::InvalidConfig("augmentation.pipeline is empty".into()));
        }
        Ok(())
    }
}

/// `floor(ratio * n)`, tolerant of representation error just below an integer.
fn count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Nodes visited by one walk of `walk_length` uniform steps from `start`.
pub fn walk_from(g: &BrainGraph, start: usize, walk_length: usize, rng: &mut Rng) -> Vec<usize> {
    let adj = g.adjacency();
    walk_with(&adj, start, walk_length, rng)
}

fn walk_with(adj: &[Vec<(usize, usize)>], start: usize, walk_length: usize, rng: &mut Rng) -> Vec<usize> {
    let mut visited = vec![start];
    let mut at = start;
    for _ in 0..walk_length {
        let nbrs = &adj[at];
        if nbrs.is_empty() {
            break;
        }
        at = nbrs[rng.random_range(0..nbrs.len())].0;
        visited.push(at);
    }
    visited
}

/// Subgraph induced by the union of `n_walks` random walks from uniformly
/// chosen start nodes.
pub fn random_walk_sample(g: &BrainGraph, walk_length: usize, n_walks: usize, rng: &mut Rng) -> BrainGraph {
    if g.edges.is_empty() {
        warn!("{}: random walk sampling on an edgeless graph; returning it unchanged", g.subject_id);
        return g.clone();
    }
    let adj = g.adjacency();
    let mut keep = Vec::new();
    for _ in 0..n_walks {
        let start = rng.random_range(0..g.n_nodes);
        keep.extend(walk_with(&adj, start, walk_length, rng));
    }
    g.induced_subgraph(&keep)
}

/// Removes `floor(ratio * |V|)` uniformly chosen nodes, always keeping one.
pub fn node_drop(g: &BrainGraph, ratio: f64, rng: &mut Rng) -> BrainGraph {
    let n_drop = count(ratio, g.n_nodes).min(g.n_nodes.saturating_sub(1));
    if n_drop == 0 {
        return g.clone();
    }
    let mut dropped = vec![false; g.n_nodes];
    for i in sample(rng, g.n_nodes, n_drop) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..g.n_nodes).filter(|&i| !dropped[i]).collect();
    g.induced_subgraph(&keep)
}

/// Zeroes `floor(ratio * n_nodes * feature_dim)` uniformly chosen feature
/// entries.
pub fn feature_mask(g: &BrainGraph, ratio: f64, rng: &mut Rng) -> BrainGraph {
    let total = g.n_nodes * g.feature_dim();
    let n_mask = count(ratio, total).min(total);
    let mut out = g.clone();
    if n_mask == 0 {
        return out;
    }
    let dim = g.feature_dim();
    for flat in sample(rng, total, n_mask) {
        out.node_features[(flat / dim, flat % dim)] = 0.0;
    }
    out
}

/// Removes `floor(ratio * |E|)` uniformly chosen edges.
pub fn edge_remove(g: &BrainGraph, ratio: f64, rng: &mut Rng) -> BrainGraph {
    let n_remove = count(ratio, g.n_edges()).min(g.n_edges());
    let mut out = g.clone();
    if n_remove == 0 {
        return out;
    }
    let mut removed = vec![false; g.n_edges()];
    for e in sample(rng, g.n_edges(), n_remove) {
        removed[e] = true;
    }
    let (edges, weights) = g
        .edges
        .iter()
        .zip(&g.edge_weights)
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|((&e, &w), _)| (e, w))
        .unzip();
    out.edges = edges;
    out.edge_weights = weights;
    out
}

fn apply(g: &BrainGraph, cfg: &AugmentationConfig, rng: &mut Rng) -> BrainGraph {
    let mut cur = g.clone();
    for t in &cfg.pipeline {
        cur = match t {
            Transform::RandomWalk => random_walk_sample(&cur, cfg.walk_length, cfg.walks_per_view, rng),
            Transform::NodeDrop => node_drop(&cur, cfg.node_drop_ratio, rng),
            Transform::FeatureMask => feature_mask(&cur, cfg.feature_mask_ratio, rng),
            Transform::EdgeRemove => edge_remove(&cur, cfg.edge_remove_ratio, rng),
        };
    }
    cur
}

/// `n_views` independent draws of the configured pipeline.
pub fn make_views(g: &BrainGraph, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<Vec<BrainGraph>> {
    make_n_views(g, cfg, cfg.n_views, rng)
}

/// Like [`make_views`] with an explicit view count (two-view objectives).
pub fn make_n_views(g: &BrainGraph, cfg: &AugmentationConfig, n_views: usize, rng: &mut Rng) -> Result<Vec<BrainGraph>> {
    cfg.validate()?;
    g.validate()?;
    Ok((0..n_views).map(|_| apply(g, cfg, rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::Mat;

    fn graph(n: usize, edges: &[(usize, usize)]) -> BrainGraph {
        BrainGraph {
            subject_id: "g".into(),
            n_nodes: n,
            node_features: Mat::from_fn(n, n, |i, j| 1.0 + (i * n + j) as f64),
            edges: edges.to_vec(),
            edge_weights: edges.iter().map(|&(i, j)| 0.1 * (i + j) as f64).collect(),
            label: Some(1),
        }
    }

    fn cycle(n: usize) -> BrainGraph {
        let mut e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        e.push((0, n - 1));
        graph(n, &e)
    }

    #[test]
    fn zero_length_walk_keeps_start_only() {
        let g = graph(3, &[(0, 1), (0, 2), (1, 2)]);
        let s = random_walk_sample(&g, 0, 1, &mut stream(1, &[]));
        assert_eq!(s.n_nodes, 1);
        assert!(s.edges.is_empty());
    }

    #[test]
    fn single_step_from_path_end() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let nodes = walk_from(&g, 0, 1, &mut stream(5, &[]));
        assert_eq!(nodes, vec![0, 1]);
        let s = g.induced_subgraph(&nodes);
        assert_eq!(s.edges, vec![(0, 1)]);
        assert_eq!(s.node_features.row(1), g.node_features.row(1));
    }

    #[test]
    fn long_walks_cover_everything() {
        let g = cycle(6);
        let s = random_walk_sample(&g, 200, 4, &mut stream(2, &[]));
        assert_eq!(s, g);
    }

    #[test]
    fn edgeless_walk_is_identity() {
        let g = graph(4, &[]);
        assert_eq!(random_walk_sample(&g, 5, 2, &mut stream(0, &[])), g);
    }

    #[test]
    fn node_drop_counts() {
        let g = cycle(116);
        assert_eq!(node_drop(&g, 0.0, &mut stream(0, &[])), g);
        let d = node_drop(&g, 0.1, &mut stream(0, &[]));
        assert_eq!(d.n_nodes, 105);
        assert_eq!(d.feature_dim(), 116);
        d.validate().unwrap();
        let tiny = graph(1, &[]);
        assert_eq!(node_drop(&tiny, 0.99, &mut stream(0, &[])).n_nodes, 1);
    }

    #[test]
    fn feature_mask_counts() {
        let g = graph(4, &[(0, 1)]);
        assert_eq!(feature_mask(&g, 0.0, &mut stream(0, &[])), g);
        let m = feature_mask(&g, 0.25, &mut stream(0, &[]));
        assert_eq!(m.node_features.iter().filter(|&&v| v == 0.0).count(), 4);
        assert_eq!(m.edges, g.edges);
        let all = feature_mask(&g, 1.0, &mut stream(0, &[]));
        assert!(all.node_features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_remove_counts() {
        let mut edges = Vec::new();
        for i in 0..12 {
            for j in (i + 1)..12 {
                if edges.len() < 33 {
                    edges.push((i, j));
                }
            }
        }
        let g = graph(12, &edges);
        assert_eq!(edge_remove(&g, 0.0, &mut stream(0, &[])), g);
        assert_eq!(edge_remove(&g, 0.2, &mut stream(0, &[])).n_edges(), 27);
        let g5 = graph(6, &edges[..5]);
        let r = edge_remove(&g5, 1.0, &mut stream(0, &[]));
        assert_eq!(r.n_edges(), 0);
        assert_eq!(r.node_features, g5.node_features);
    }

    #[test]
    fn views_arity_identity_and_determinism() {
        let g = cycle(10);
        let ident = AugmentationConfig {
            node_drop_ratio: 0.0,
            feature_mask_ratio: 0.0,
            edge_remove_ratio: 0.0,
            ..Default::default()
        };
        let v = make_views(&g, &ident, &mut stream(0, &[])).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x == &g));

        let cfg = AugmentationConfig {
            node_drop_ratio: 0.3,
            feature_mask_ratio: 0.3,
            edge_remove_ratio: 0.3,
            pipeline: vec![Transform::RandomWalk, Transform::NodeDrop, Transform::FeatureMask, Transform::EdgeRemove],
            walk_length: 4,
            walks_per_view: 2,
            ..Default::default()
        };
        let a = make_views(&g, &cfg, &mut stream(9, &[])).unwrap();
        let b = make_views(&g, &cfg, &mut stream(9, &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn config_validation() {
        let mut c = AugmentationConfig { n_views: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c.n_views = 2;
        c.node_drop_ratio = 1.0;
        assert!(c.validate().is_err());
        c.node_drop_ratio = 0.0;
        c.pipeline.clear();
        assert!(c.validate().is_err());
    }
}
