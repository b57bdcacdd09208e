//! Fast self-check suite run by `hfmca verify`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::connectome::{build_graph, pearson_connectivity, BrainGraph, ConnectivityMatrix, EdgeSelection, RoiTimeSeries};
use crate::encoder::{embed_and_backprop, encode, init_params, EncoderConfig};
use crate::error::Result;
use crate::objective::{correlation_block, hfmca_loss, hfmca_loss_and_grad, CorrelationBlock, Ridge};
use crate::rng::{stream, Rng};
use crate::tape::Mat;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn gaussian(r: usize, c: usize, rng: &mut Rng) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn random_connectivity(n: usize, rng: &mut Rng) -> Result<ConnectivityMatrix> {
    let ts = RoiTimeSeries::new("r", gaussian(n, 3 * n, rng))?;
    Ok(pearson_connectivity(&ts)?.matrix)
}

pub fn random_graph(n: usize, budget: usize, rng: &mut Rng) -> Result<BrainGraph> {
    Ok(build_graph(&random_connectivity(n, rng)?, budget, EdgeSelection::Raw).graph)
}

fn non_positivity(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let t = [2, 4][rng.random_range(0..2)];
        let k = [2, 8][rng.random_range(0..2)];
        let n = rng.random_range(t * k + 2..t * k + 40);
        let block = correlation_block(&gaussian(n, t * k, rng), &gaussian(n, k, rng), Ridge::default())?;
        worst = worst.max(hfmca_loss(&block)?);
    }
    Ok((worst <= 1e-9, format!("max loss over 200 blocks {worst:.3e}")))
}

fn closed_form() -> Result<(bool, String)> {
    let i2 = Mat::identity(2, 2);
    let block = CorrelationBlock {
        r_low: i2.clone(),
        r_high: i2.clone(),
        p_cross: i2 * 0.5,
        ridge: Ridge::absolute(0.0),
    };
    let loss = hfmca_loss(&block)?;
    let expect = 2.0 * 0.75f64.ln();
    Ok(((loss - expect).abs() < 1e-10, format!("loss {loss:.12} vs {expect:.12}")))
}

fn loss_gradient(rng: &mut Rng) -> Result<(bool, String)> {
    let (n, t, k) = (12, 2, 3);
    let zl = gaussian(n, t * k, rng);
    let zh = gaussian(n, k, rng);
    let ridge = Ridge::default();
    let (_, gl, _) = hfmca_loss_and_grad(&zl, &zh, ridge)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..zl.len() {
        let mut p = zl.clone();
        p[idx] += h;
        let mut m = zl.clone();
        m[idx] -= h;
        let fd = (hfmca_loss_and_grad(&p, &zh, ridge)?.0 - hfmca_loss_and_grad(&m, &zh, ridge)?.0) / (2.0 * h);
        worst = worst.max(rel_err(fd, gl[idx]));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn encoder_gradient(rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = EncoderConfig {
        input_dim: 6,
        hidden_dim: 4,
        n_layers: 2,
        n_attention_heads: 2,
        rwpe_steps: 3,
        embedding_dim: 3,
        use_edge_weights: true,
        dropout: 0.0,
    };
    let g = random_graph(6, 7, rng)?;
    let params = init_params(&cfg, rng)?;
    let up = gaussian(1, 3, rng);
    let (_, grads) = embed_and_backprop(&g, &params, &cfg, &up, None)?;
    let f = |p: &crate::params::ParamSet| -> Result<f64> {
        let e = encode(&g, p, &cfg)?.graph_embedding;
        Ok((0..3).map(|j| up[(0, j)] * e[j]).sum())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, w) in params.iter() {
        let gw = grads.get(name).unwrap();
        for idx in 0..w.len().min(6) {
            let mut p = params.clone();
            p.get_mut(name).unwrap()[idx] += h;
            let mut m = params.clone();
            m.get_mut(name).unwrap()[idx] -= h;
            let fd = (f(&p)? - f(&m)?) / (2.0 * h);
            if fd.abs().max(gw[idx].abs()) > 1e-7 {
                worst = worst.max(rel_err(fd, gw[idx]));
            }
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn brute_top_k(c: &Mat, k: usize, selection: EdgeSelection) -> Vec<(usize, usize)> {
    let n = c.nrows();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = match selection {
                EdgeSelection::Raw => c[(i, j)],
                EdgeSelection::Absolute => c[(i, j)].abs(),
            };
            all.push((v, i, j));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut e: Vec<(usize, usize)> = all.into_iter().take(k).map(|(_, i, j)| (i, j)).collect();
    e.sort_unstable();
    e
}

fn top_k_oracle(rng: &mut Rng) -> Result<(bool, String)> {
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(3..20);
        let c = random_connectivity(n, rng)?;
        let k = rng.random_range(0..=n * (n - 1) / 2);
        for sel in [EdgeSelection::Raw, EdgeSelection::Absolute] {
            let mut got = build_graph(&c, k, sel).graph.edges;
            got.sort_unstable();
            if got != brute_top_k(&c.values, k, sel) {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 100 cases")))
}

fn permutation_invariance(rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = EncoderConfig {
        input_dim: 10,
        hidden_dim: 8,
        n_layers: 2,
        n_attention_heads: 2,
        rwpe_steps: 4,
        embedding_dim: 5,
        dropout: 0.0,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = random_graph(10, 12, rng)?;
        let params = init_params(&cfg, rng)?;
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(rng);
        let a = encode(&g, &params, &cfg)?.graph_embedding;
        let b = encode(&g.permuted(&perm), &params, &cfg)?.graph_embedding;
        worst = worst.max((a - b).amax());
    }
    Ok((worst < 1e-5, format!("max deviation {worst:.2e}")))
}

/// Runs every check; errors inside a check count as failures.
pub fn run_checks(seed: u64) -> Vec<Check> {
    type CheckFn = fn(&mut Rng) -> Result<(bool, String)>;
    let checks: [(&'static str, CheckFn); 6] = [
        ("loss_non_positive", non_positivity),
        ("closed_form", |_| closed_form()),
        ("loss_gradient", loss_gradient),
        ("encoder_gradient", encoder_gradient),
        ("top_k_oracle", top_k_oracle),
        ("permutation_invariance", permutation_invariance),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let start = Instant::now();
            let (passed, detail) = match f(&mut stream(seed, &[0x7e51, i as u64])) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Check {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_checks(0) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
