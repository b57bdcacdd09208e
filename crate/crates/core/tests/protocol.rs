mod common;

use hfmca::checkpoint::to_bytes;
use hfmca::evalharness::{evaluate_cell, majority_class, probe, probe_features, stratified_folds, transfer_eval, ProbeConfig, ProbeMode};
use hfmca::rng::stream;
use hfmca::synthgen::{cohort_statistics, generate_cohort, oracle_accuracy};
use hfmca::tape::Mat;
use hfmca::trainer::{init_checkpoint, Objective, TrainConfig};
use rand_distr::{Distribution, StandardNormal};

#[test]
fn test_labels_never_reach_training() {
    let mut rng = stream(1, &[]);
    let n = 90;
    let noise: Vec<f64> = (0..n * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let features = Mat::from_fn(n, 4, |i, j| if j == labels[i] as usize { 1.0 } else { 0.0 } + 0.7 * noise[i * 4 + j]);
    let folds = stratified_folds(&labels, 5, &mut stream(2, &[])).unwrap();
    let test = folds[0].clone();
    let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
    let cfg = ProbeConfig {
        probe_epochs: 40,
        ..Default::default()
    };
    let clean = evaluate_cell(&features, &labels, 3, &train, &test, &cfg, 0, 0).unwrap();

    let mut poisoned = labels.clone();
    for &i in &test {
        poisoned[i] = (poisoned[i] + 1) % 3;
    }
    let dirty = evaluate_cell(&features, &poisoned, 3, &train, &test, &cfg, 0, 0).unwrap();
    assert_eq!(clean.learning_rate.to_bits(), dirty.learning_rate.to_bits());
    assert_eq!(clean.probe, dirty.probe);
    let bits = |m: &Mat| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&clean.probe.weight), bits(&dirty.probe.weight));
    assert_ne!(clean.accuracy, dirty.accuracy);
}

#[test]
fn transfer_matches_probe_except_tag() {
    let ds = common::small_dataset("unseen", 40, 0.3, 3);
    let ckpt = init_checkpoint(&common::small_train(1)).unwrap();
    let cfg = common::small_probe();
    let p = probe(&ckpt, &ds, &cfg).unwrap();
    let t = transfer_eval(&ckpt, &ds, &cfg).unwrap();
    assert_eq!(p.tag, None);
    assert_eq!(t.tag.as_deref(), Some("transfer"));
    assert_eq!(p.per_fold, t.per_fold);
    assert_eq!(p.accuracy_mean, t.accuracy_mean);
}

#[test]
fn unfrozen_probe_leaves_checkpoint_and_is_reproducible() {
    let ds = common::small_dataset("ft", 30, 0.3, 4);
    let ckpt = init_checkpoint(&common::small_train(1)).unwrap();
    let before = to_bytes(&ckpt).unwrap();
    let cfg = ProbeConfig {
        mode: ProbeMode::Unfrozen,
        n_runs: 1,
        outer_folds: 2,
        inner_folds: 2,
        probe_epochs: 3,
        ..Default::default()
    };
    let a = probe(&ckpt, &ds, &cfg).unwrap();
    let b = probe(&ckpt, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mode, ProbeMode::Unfrozen);
    assert_eq!(to_bytes(&ckpt).unwrap(), before);
}

#[test]
fn oracle_grows_with_class_effect() {
    let accs: Vec<f64> = [0.0, 0.1, 0.2, 0.4]
        .iter()
        .map(|&d| oracle_accuracy(&generate_cohort(&common::small_synth(1000, d, 5)).unwrap()).unwrap())
        .collect();
    for w in accs.windows(2) {
        assert!(w[1] > w[0], "{accs:?}");
    }
    assert!((accs[0] - 0.5).abs() < 0.05, "{accs:?}");
    assert!(accs[3] > 0.9, "{accs:?}");
}

#[test]
fn probe_on_oracle_statistic_reaches_oracle() {
    let cohort = generate_cohort(&common::small_synth(600, 0.1, 6)).unwrap();
    let stats = cohort_statistics(&cohort).unwrap();
    let oracle = 100.0 * oracle_accuracy(&cohort).unwrap();
    let features = Mat::from_column_slice(stats.len(), 1, &stats);
    let r = probe_features(&features, &cohort.labels, "oracle", &common::small_probe()).unwrap();
    assert!((r.accuracy_mean - oracle).abs() < 4.0, "probe {} vs oracle {oracle}", r.accuracy_mean);
}

#[test]
fn no_signal_probes_near_majority() {
    let ds = common::small_dataset("null", 300, 0.0, 7);
    let labels = ds.labels().unwrap();
    let ckpt = init_checkpoint(&TrainConfig {
        objective: Objective::None,
        ..common::small_train(0)
    })
    .unwrap();
    let r = probe(&ckpt, &ds, &common::small_probe()).unwrap();
    let majority = majority_class(&labels).unwrap();
    assert_eq!(r.majority_class_accuracy, majority);
    assert!((r.accuracy_mean - majority).abs() <= 3.0, "{} vs {majority}", r.accuracy_mean);
}
