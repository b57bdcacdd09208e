//! Synthetic cohorts with a planted, class-dependent coupling between two
//! communities of regions.
//!
//! Every subject draws latent community signals whose correlation matrix has
//! unit diagonal, a designated pair coupled at `base_coupling + shift(class)`
//! and small random couplings elsewhere. Each region mixes its community
//! signal with a fixed loading and adds white noise.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::connectome::{build_graph, pearson_connectivity, ConnectivityMatrix, EdgeSelection, RoiTimeSeries};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_regions: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub community_sizes: Vec<usize>,
    /// Class-dependent shift of the designated coupling; classes are spread
    /// evenly over `[-class_effect, +class_effect]`.
    pub class_effect: f64,
    pub noise_std: f64,
    /// Coupling of the designated community pair before the class shift.
    pub base_coupling: f64,
    /// Standard deviation of per-subject random couplings between all other
    /// community pairs.
    pub coupling_jitter: f64,
    /// The two communities whose coupling carries the class signal.
    pub designated_pair: (usize, usize),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_regions: 116,
            n_timepoints: 200,
            n_classes: 2,
            community_sizes: vec![15, 15, 15, 15, 14, 14, 14, 14],
            class_effect: 0.2,
            noise_std: 1.0,
            base_coupling: 0.2,
            coupling_jitter: 0.1,
            designated_pair: (0, 1),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    /// Splits `n_regions` into `n_communities` nearly equal communities.
    pub fn with_even_communities(mut self, n_regions: usize, n_communities: usize) -> Self {
        let base = n_regions / n_communities;
        let extra = n_regions % n_communities;
        self.n_regions = n_regions;
        self.community_sizes = (0..n_communities).map(|c| base + usize::from(c < extra)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.community_sizes.iter().sum::<usize>() != self.n_regions {
            return Err(Error::InvalidConfig(format!(
                "community sizes sum to {} but n_regions is {}",
                self.community_sizes.iter().sum::<usize>(),
                self.n_regions
            )));
        }
        if self.community_sizes.contains(&0) {
            return Err(Error::InvalidConfig("community sizes must be >= 1".into()));
        }
        let (a, b) = self.designated_pair;
        if a == b || a >= self.community_sizes.len() || b >= self.community_sizes.len() {
            return Err(Error::InvalidConfig(format!("bad designated pair ({a}, {b})")));
        }
        if !(self.class_effect >= 0.0) {
            return Err(Error::InvalidConfig("class_effect must be >= 0".into()));
        }
        if self.n_classes < 1 || self.n_regions < 2 || self.n_timepoints < 3 {
            return Err(Error::InvalidConfig("need n_classes >= 1, n_regions >= 2, n_timepoints >= 3".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.coupling_jitter >= 0.0) {
            return Err(Error::InvalidConfig("noise_std and coupling_jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> CommunityLayout {
        let mut start = 0;
        let ranges = self
            .community_sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        CommunityLayout {
            ranges,
            designated: self.designated_pair,
        }
    }

    fn class_shift(&self, class: u32) -> f64 {
        if self.n_classes < 2 {
            return 0.0;
        }
        self.class_effect * (2.0 * class as f64 / (self.n_classes - 1) as f64 - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityLayout {
    pub ranges: Vec<Range<usize>>,
    pub designated: (usize, usize),
}

impl CommunityLayout {
    /// Mean correlation over all region pairs spanning the designated
    /// communities.
    pub fn statistic(&self, c: &Mat) -> f64 {
        let (a, b) = self.designated;
        let (ra, rb) = (&self.ranges[a], &self.ranges[b]);
        let mut s = 0.0;
        for i in ra.clone() {
            for j in rb.clone() {
                s += c[(i, j)];
            }
        }
        s / (ra.len() * rb.len()) as f64
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub series: Vec<RoiTimeSeries>,
    pub labels: Vec<u32>,
    pub layout: CommunityLayout,
}

fn latent_correlation(cfg: &SynthConfig, class: u32, rng: &mut crate::rng::Rng) -> Mat {
    let c = cfg.community_sizes.len();
    let (a, b) = cfg.designated_pair;
    let mut m = Mat::identity(c, c);
    for i in 0..c {
        for j in (i + 1)..c {
            let z: f64 = StandardNormal.sample(rng);
            let v = if (i, j) == (a.min(b), a.max(b)) {
                cfg.base_coupling + cfg.class_shift(class)
            } else {
                cfg.coupling_jitter * z
            };
            let v = v.clamp(-0.95, 0.95);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    // Shrink off-diagonals until positive definite.
    let mut shrink = 1.0;
    loop {
        let mut s = &m * shrink;
        s.fill_diagonal(1.0);
        if s.clone().cholesky().is_some() {
            return s;
        }
        shrink *= 0.9;
    }
}

fn subject_id(i: usize) -> String {
    format!("sub-{i:05}")
}

/// Draws a cohort; deterministic in `cfg.rng_seed`.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut labels: Vec<u32> = (0..cfg.n_subjects).map(|i| (i % cfg.n_classes) as u32).collect();
    labels.shuffle(&mut stream(cfg.rng_seed, &[0x1abe1]));

    let mut lrng = stream(cfg.rng_seed, &[0x10ad]);
    let loadings: Vec<f64> = (0..cfg.n_regions).map(|_| lrng.random_range(0.7..1.3)).collect();
    let community_of: Vec<usize> = layout
        .ranges
        .iter()
        .enumerate()
        .flat_map(|(c, r)| r.clone().map(move |_| c))
        .collect();

    let mut series = Vec::with_capacity(cfg.n_subjects);
    for (i, &label) in labels.iter().enumerate() {
        let id = subject_id(i);
        let mut rng = stream(cfg.rng_seed, &[hash_str(&id)]);
        let corr = latent_correlation(cfg, label, &mut rng);
        let chol = corr.cholesky().expect("latent correlation is positive definite");
        let k = cfg.community_sizes.len();
        let white = Mat::from_fn(k, cfg.n_timepoints, |_, _| StandardNormal.sample(&mut rng));
        let latent = chol.l() * white;
        let x = Mat::from_fn(cfg.n_regions, cfg.n_timepoints, |r, t| {
            let z: f64 = StandardNormal.sample(&mut rng);
            loadings[r] * latent[(community_of[r], t)] + cfg.noise_std * z
        });
        series.push(RoiTimeSeries::new(id, x)?);
    }
    Ok(Cohort { series, labels, layout })
}

/// Accuracy of thresholding the designated-pair statistic at the midpoints
/// between consecutive class means.
pub fn oracle_accuracy_from_stats(stats: &[f64], labels: &[u32]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InvalidInput("empty cohort".into()));
    }
    if stats.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", stats.len()), format!("{} labels", labels.len())));
    }
    let n_classes = *labels.iter().max().unwrap() as usize + 1;
    let mut sums = vec![0.0; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&s, &l) in stats.iter().zip(labels) {
        sums[l as usize] += s;
        counts[l as usize] += 1;
    }
    let mut classes: Vec<(f64, u32)> = (0..n_classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| (sums[c] / counts[c] as f64, c as u32))
        .collect();
    classes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let thresholds: Vec<f64> = classes.windows(2).map(|w| 0.5 * (w[0].0 + w[1].0)).collect();
    let correct = stats
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| {
            let bin = thresholds.iter().filter(|&&t| s > t).count();
            classes[bin].1 == l
        })
        .count();
    Ok(correct as f64 / stats.len() as f64)
}

/// Designated-pair statistic of every subject.
pub fn cohort_statistics(cohort: &Cohort) -> Result<Vec<f64>> {
    cohort
        .series
        .iter()
        .map(|ts| Ok(cohort.layout.statistic(&pearson_connectivity(ts)?.matrix.values)))
        .collect()
}

pub fn oracle_accuracy(cohort: &Cohort) -> Result<f64> {
    oracle_accuracy_from_stats(&cohort_statistics(cohort)?, &cohort.labels)
}

/// Connectivity and graphs for a cohort, labels attached.
pub fn cohort_to_dataset(
    cohort: &Cohort,
    name: &str,
    edge_budget: usize,
    selection: EdgeSelection,
    split_seed: u64,
) -> Result<Dataset> {
    let mut graphs = Vec::with_capacity(cohort.series.len());
    for (ts, &label) in cohort.series.iter().zip(&cohort.labels) {
        let conn: ConnectivityMatrix = pearson_connectivity(ts)?.matrix;
        let mut g = build_graph(&conn, edge_budget, selection).graph;
        g.label = Some(label);
        graphs.push(g);
    }
    let mut ds = Dataset::new(name, graphs, split_seed);
    ds.manifest.provenance = "synthetic latent-factor cohort".into();
    Ok(ds)
}
