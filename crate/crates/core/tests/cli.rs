use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "tiny"

[synth]
n_subjects = 40
n_regions = 20
n_timepoints = 60
community_sizes = [5, 5, 5, 5]
class_effect = 0.4

[graphs]
edge_budget = 20

[train]
epochs = 2
batch_size = 16

[train.encoder]
input_dim = 20
hidden_dim = 8
n_layers = 1
n_attention_heads = 2
rwpe_steps = 3
embedding_dim = 6
dropout = 0.0

[train.augmentation]
n_views = 2

[train.hfmca]
proj_dim = 4

[probe]
n_runs = 2
outer_folds = 3
inner_folds = 2
probe_epochs = 20
"#;

fn hfmca(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfmca")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hfmca(&[], dir.path()).status.code(), Some(2));
    let out = hfmca(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(hfmca(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = hfmca(&["probe", "--checkpoint", "missing", "--data", "missing", "-o", "out"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let record: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(record["error"].is_string() && record["message"].is_string());

    let out = hfmca(&["verify", "--set", "train.batch_size=1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid_config"));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hfmca(&["verify", "-o", "v"], dir.path());
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 3 && stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn synth_pretrain_probe_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("tiny.toml"), CONFIG).unwrap();
    let cfg = ["--config", "tiny.toml"];

    ok(&hfmca(&[&cfg[..], &["synth", "-o", "data", "--write-series"]].concat(), root));
    assert!(root.join("data/config.resolved.toml").exists());
    assert!(root.join("data/series/labels.csv").exists());

    ok(&hfmca(&[&cfg[..], &["build-graphs", "--input", "data/series", "--edge-budget", "auto", "-o", "rebuilt"]].concat(), root));

    ok(&hfmca(&[&cfg[..], &["pretrain", "--data", "data", "-o", "pre", "--deterministic"]].concat(), root));
    let frozen = fs::read_to_string(root.join("pre/config.resolved.toml")).unwrap();
    assert!(frozen.contains("command = \"pretrain\""), "{frozen}");
    assert!(root.join("pre/metrics.log").exists());

    // The frozen config alone reproduces the run.
    ok(&hfmca(&["--config", "pre/config.resolved.toml", "pretrain", "--data", "data", "-o", "again"], root));
    let ckpt = |d: &str| {
        let name = fs::read_dir(root.join(d))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .find(|n| n.starts_with("ckpt-"))
            .unwrap();
        fs::read(root.join(d).join(name)).unwrap()
    };
    assert_eq!(ckpt("pre"), ckpt("again"));

    let out = hfmca(&[&cfg[..], &["probe", "--checkpoint", "pre", "--data", "data", "-o", "pre"]].concat(), root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("HFMCA_F"));
    let report = root.join("pre/eval/tiny-HFMCA_F.json");
    assert!(report.exists());
    assert!(root.join("pre/eval/tiny-HFMCA_F/results.md").exists());

    ok(&hfmca(&[&cfg[..], &["transfer", "--checkpoint", "pre", "--data", "rebuilt", "-o", "pre", "--method", "Mine"]].concat(), root));
    assert!(root.join("pre/eval/tiny-Mine-transfer.json").exists());

    ok(&hfmca(&["report", "--inputs", "pre/eval/tiny-HFMCA_F.json", "pre/eval/tiny-Mine-transfer.json", "-o", "rep"], root));
    for f in ["results.csv", "results.md", "results.json", "results.svg"] {
        assert!(root.join("rep/eval").join(f).exists(), "{f} missing");
    }
    let md = fs::read_to_string(root.join("rep/eval/results.md")).unwrap();
    assert!(md.contains("HFMCA_F") && md.contains("Majority class"), "{md}");
}
