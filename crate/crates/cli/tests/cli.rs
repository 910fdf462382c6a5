use std::fs;
use std::path::Path;

use livenet_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_THRESHOLD, EXIT_USAGE};
use livenet_core::policy::{Checkpoint, EncodingConfig, NetworkParams, NetworkShape};
use livenet_core::KinodynamicLimits;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["livenet"];
    v.extend_from_slice(args);
    run(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// An untrained but well-formed checkpoint.
fn random_checkpoint(path: &Path) {
    let encoding = EncodingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = NetworkParams::init(
        NetworkShape::new(encoding.input_dim()),
        &KinodynamicLimits::default(),
        1.0,
        1.0,
        &mut rng,
    );
    Checkpoint { params, encoding }.save(path).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(cli(&["eval", "--controller", "bogus"]), EXIT_USAGE);
    // Network controllers need a checkpoint.
    assert_eq!(cli(&["eval", "--controller", "livenet"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn missing_dataset_is_a_usage_or_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "train",
        "--dataset",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert!(code == EXIT_USAGE || code == EXIT_RUNTIME, "{code}");
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.lvnt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let code = cli(&["run", "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn run_writes_parseable_plots_with_one_series_per_agent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        cli(&[
            "run",
            "--controller",
            "mpc-cbf-live",
            "--scenario",
            "intersection",
            "--out",
            s(&out)
        ]),
        EXIT_OK
    );
    for name in ["trajectories.svg", "velocity.svg", "barrier.svg"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let series = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline") && n.attribute("class") == Some("series"))
            .count();
        assert_eq!(series, 2, "{name}");
    }
    let barrier = fs::read_to_string(out.join("barrier.svg")).unwrap();
    assert!(barrier.contains("(safe)"));
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("step,t,agent,"));
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("log.json")).unwrap()).unwrap();
    assert_eq!(log["metrics"]["collisions"], 0);
}

#[test]
fn run_checksums_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.lvnt");
    random_checkpoint(&ckpt);
    let mut sums = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        assert_eq!(
            cli(&["run", "--checkpoint", s(&ckpt), "--seed", "5", "--out", s(&out)]),
            EXIT_OK
        );
        sums.push(fs::read_to_string(out.join("SHA256SUMS")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
    assert_eq!(sums[0].lines().count(), 5);
    let other = dir.path().join("r-other");
    assert_eq!(
        cli(&["run", "--checkpoint", s(&ckpt), "--seed", "6", "--out", s(&other)]),
        EXIT_OK
    );
    assert_ne!(fs::read_to_string(other.join("SHA256SUMS")).unwrap(), sums[0]);
}

#[test]
fn missed_threshold_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    // The baseline deadlocks in the doorway, so zero deadlocks cannot hold.
    fs::write(&cfg, "[thresholds]\nmax_deadlocks = 0\n").unwrap();
    let code = cli(&[
        "eval",
        "--controller",
        "mpc-cbf",
        "--scenario",
        "doorway",
        "--runs",
        "2",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code, EXIT_THRESHOLD);
    let summary = fs::read_to_string(dir.path().join("e/summary.json")).unwrap();
    assert!(summary.contains("\"deadlocks\": 2"));
}
