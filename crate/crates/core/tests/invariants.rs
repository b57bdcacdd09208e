use std::path::Path;

use hfmca::augment::{edge_remove, feature_mask, node_drop};
use hfmca::checkpoint::{from_bytes, strip_heads, to_bytes};
use hfmca::connectome::{build_graph, EdgeSelection};
use hfmca::encoder::{encode, init_params, EncoderConfig};
use hfmca::evalharness::{mean_std, probe_features, stratified_folds, ProbeConfig};
use hfmca::objective::{correlation_block, fmca_spectrum, hfmca_loss, Ridge};
use hfmca::rng::{stream, Rng};
use hfmca::tape::Mat;
use hfmca::trainer::{init_checkpoint, TrainConfig};
use hfmca::verify::{random_connectivity, random_graph};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: usize, c: usize, rng: &mut Rng) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_never_positive(seed in any::<u64>(), t in 2usize..5, k in 1usize..6, extra in 1usize..30, eps in 0.0f64..1e-2) {
        let mut rng = stream(seed, &[]);
        let n = t * k + extra;
        let zl = gaussian(n, t * k, &mut rng);
        // Correlated high-level features make the cross block non-trivial.
        let zh = zl.columns(0, k) * 0.8 + gaussian(n, k, &mut rng) * 0.2;
        let block = correlation_block(&zl, &zh, Ridge::trace_scaled(eps.max(1e-8))).unwrap();
        prop_assert!(hfmca_loss(&block).unwrap() <= 1e-9);
    }

    #[test]
    fn spectrum_lies_in_unit_interval(seed in any::<u64>(), k in 1usize..5, n in 12usize..40) {
        let mut rng = stream(seed, &[]);
        let f = gaussian(n, k, &mut rng);
        let g = &f * 0.5 + gaussian(n, k, &mut rng);
        for s in fmca_spectrum(&f, &g, Ridge::absolute(1e-9)).unwrap() {
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&s));
        }
    }

    #[test]
    fn top_k_keeps_the_strongest_pairs(seed in any::<u64>(), n in 2usize..25, frac in 0.0f64..1.2, absolute in any::<bool>()) {
        let mut rng = stream(seed, &[]);
        let c = random_connectivity(n, &mut rng).unwrap();
        let pairs = n * (n - 1) / 2;
        let budget = (frac * pairs as f64) as usize;
        let sel = if absolute { EdgeSelection::Absolute } else { EdgeSelection::Raw };
        let built = build_graph(&c, budget, sel);
        let g = built.graph;
        prop_assert_eq!(g.n_edges(), budget.min(pairs));
        prop_assert_eq!(built.clamped, budget > pairs);
        g.validate().unwrap();
        let score = |i: usize, j: usize| if absolute { c.values[(i, j)].abs() } else { c.values[(i, j)] };
        let kept: std::collections::HashSet<_> = g.edges.iter().copied().collect();
        let weakest_kept = g.edges.iter().map(|&(i, j)| score(i, j)).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            for j in (i + 1)..n {
                if !kept.contains(&(i, j)) {
                    prop_assert!(score(i, j) <= weakest_kept);
                }
            }
        }
        for (&(i, j), &w) in g.edges.iter().zip(&g.edge_weights) {
            prop_assert_eq!(w, c.values[(i, j)]);
        }
    }

    #[test]
    fn folds_partition_and_stratify(seed in any::<u64>(), counts in prop::collection::vec(1usize..40, 1..4), k in 2usize..7) {
        let mut labels: Vec<u32> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat(c as u32).take(m)).collect();
        prop_assume!(labels.len() >= k);
        let mut rng = stream(seed, &[]);
        labels.shuffle(&mut rng);
        let folds = stratified_folds(&labels, k, &mut rng).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0; labels.len()];
        for f in &folds {
            for &i in f {
                seen[i] += 1;
            }
            for (c, &m) in counts.iter().enumerate() {
                let expect = m as f64 * f.len() as f64 / labels.len() as f64;
                let got = f.iter().filter(|&&i| labels[i] == c as u32).count() as f64;
                prop_assert!((got - expect).abs() <= 1.0, "class {} fold size {} got {} expect {}", c, f.len(), got, expect);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn embeddings_ignore_node_order(seed in any::<u64>(), n in 3usize..14, layers in 1usize..3) {
        let mut rng = stream(seed, &[]);
        let cfg = EncoderConfig {
            input_dim: n,
            hidden_dim: 4,
            n_layers: layers,
            n_attention_heads: 2,
            rwpe_steps: 3,
            embedding_dim: 3,
            use_edge_weights: seed % 2 == 0,
            dropout: 0.0,
        };
        let g = random_graph(n, n, &mut rng).unwrap();
        let params = init_params(&cfg, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = encode(&g, &params, &cfg).unwrap().graph_embedding;
        let b = encode(&g.permuted(&perm), &params, &cfg).unwrap().graph_embedding;
        prop_assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn augmentations_remove_exact_counts(seed in any::<u64>(), n in 2usize..20, ratio in 0.0f64..0.95) {
        let mut rng = stream(seed, &[]);
        let g = random_graph(n, n, &mut rng).unwrap();
        let dropped = node_drop(&g, ratio, &mut rng);
        let expect_drop = ((ratio * n as f64) + 1e-9).floor() as usize;
        prop_assert_eq!(dropped.n_nodes, n - expect_drop.min(n - 1));
        prop_assert_eq!(dropped.feature_dim(), n);
        dropped.validate().unwrap();

        let masked = feature_mask(&g, ratio, &mut rng);
        let zeros_before = g.node_features.iter().filter(|&&v| v == 0.0).count();
        let zeros_after = masked.node_features.iter().filter(|&&v| v == 0.0).count();
        let expect_mask = ((ratio * (n * n) as f64) + 1e-9).floor() as usize;
        prop_assert!(zeros_after >= expect_mask && zeros_after <= expect_mask + zeros_before);

        let pruned = edge_remove(&g, ratio, &mut rng);
        let expect_rm = ((ratio * g.n_edges() as f64) + 1e-9).floor() as usize;
        prop_assert_eq!(pruned.n_edges(), g.n_edges() - expect_rm);
        prop_assert!(pruned.edges.iter().all(|e| g.edges.contains(e)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), objective in prop::sample::select(vec!["hfmca", "simclr", "vicreg", "none"])) {
        let cfg = TrainConfig {
            seed,
            objective: objective.parse().unwrap(),
            encoder: EncoderConfig { input_dim: 10, hidden_dim: 4, n_layers: 1, n_attention_heads: 2, rwpe_steps: 2, embedding_dim: 3, ..Default::default() },
            ..Default::default()
        };
        let ckpt = init_checkpoint(&cfg).unwrap();
        let bytes = to_bytes(&ckpt).unwrap();
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
        let stripped = strip_heads(&back);
        prop_assert!(!stripped.has_heads());
        prop_assert_eq!(to_bytes(&strip_heads(&stripped)).unwrap(), to_bytes(&stripped).unwrap());
    }

    #[test]
    fn report_statistics_recompute_from_runs(seed in any::<u64>(), runs in 2usize..4) {
        let mut rng = stream(seed, &[]);
        let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        let noise = gaussian(40, 3, &mut rng);
        let features = Mat::from_fn(40, 3, |i, j| if j == 0 { labels[i] as f64 } else { 0.0 } + noise[(i, j)]);
        let cfg = ProbeConfig { n_runs: runs, outer_folds: 4, inner_folds: 2, probe_epochs: 20, seed, ..Default::default() };
        let r = probe_features(&features, &labels, "t", &cfg).unwrap();
        let (m, s) = mean_std(&r.per_run);
        prop_assert!((m - r.accuracy_mean).abs() < 1e-12);
        prop_assert!((s - r.accuracy_std).abs() < 1e-12);
        prop_assert_eq!(r.per_fold.len(), runs);
        for (run, folds) in r.per_run.iter().zip(&r.per_fold) {
            prop_assert_eq!(folds.len(), 4);
            prop_assert!((mean_std(folds).0 - run).abs() < 1e-12);
        }
    }
}
