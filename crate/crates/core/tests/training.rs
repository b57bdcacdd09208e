mod common;

use std::fs;

use hfmca::checkpoint::{load_checkpoint, strip_heads, to_bytes};
use hfmca::trainer::{checkpoint_path, latest_checkpoint, pretrain, resume, Objective, TrainConfig};

#[test]
fn hfmca_loss_decreases_and_artifacts_are_written() {
    let ds = common::small_dataset("pool", 64, 0.3, 21);
    let cfg = TrainConfig {
        checkpoint_every: 25,
        ..common::small_train(50)
    };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrain(&ds, &cfg, Some(dir.path())).unwrap();
    let losses = &ckpt.metrics.epoch_losses;
    assert_eq!(losses.len(), 50);
    assert!(losses.iter().all(|l| l.is_finite() && *l <= 1e-9));
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss did not decrease: first {head}, last {tail}");

    for epoch in [25, 50] {
        assert!(checkpoint_path(dir.path(), epoch).exists());
    }
    assert_eq!(latest_checkpoint(dir.path()).unwrap(), checkpoint_path(dir.path(), 50));
    let on_disk = load_checkpoint(&checkpoint_path(dir.path(), 50)).unwrap();
    assert_eq!(to_bytes(&on_disk).unwrap(), to_bytes(&ckpt).unwrap());

    let log = fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "loss", "cond_rl", "cond_rh"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}: {first}");
    }
    assert_eq!(log.lines().count() as u64, ckpt.metrics.steps);
}

#[test]
fn resume_from_disk_continues_the_same_trajectory() {
    let ds = common::small_dataset("pool", 40, 0.3, 22);
    let cfg = common::small_train(4);
    let straight = pretrain(&ds, &cfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig { epochs: 2, ..cfg.clone() };
    pretrain(&ds, &half, Some(dir.path())).unwrap();
    let restored = load_checkpoint(&latest_checkpoint(dir.path()).unwrap()).unwrap();
    let finished = resume(restored, &ds, &cfg, None).unwrap();
    assert_eq!(to_bytes(&finished).unwrap(), to_bytes(&straight).unwrap());
}

#[test]
fn stripped_backbone_drops_heads_and_optimizer() {
    let ds = common::small_dataset("pool", 24, 0.3, 23);
    for objective in [Objective::Hfmca, Objective::BarlowTwins] {
        let ckpt = pretrain(&ds, &TrainConfig { objective, ..common::small_train(1) }, None).unwrap();
        assert!(ckpt.has_heads());
        assert!(ckpt.heads.as_ref().unwrap().discardable);
        let stripped = strip_heads(&ckpt);
        assert!(!stripped.has_heads());
        assert!(stripped.optimizer.is_none());
        assert_eq!(stripped.encoder, ckpt.encoder);
    }
}
