use std::path::Path;
use std::process::Command;

use dmh_cli::{Manifest, CHECKPOINT_FILE, CONFIG_FILE, DATASET_FILE, HELDOUT_FILE, MANIFEST_FILE};

fn dmh(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dmh"))
        .args(args)
        .env("DMH_THREADS", "1")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.mamba_layers=1",
    "--set",
    "model.transformer_layers=1",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.iterations=3",
    "--set",
    "train.n=3",
];

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (d0, t0, e0) = (tmp.path().join("d0"), tmp.path().join("t0"), tmp.path().join("e0"));
    let (code, _, err) = dmh(&[
        "gen-data", "--env", "darkroom", "--tasks", "3", "--steps", "200", "--seed", "7", "--out", s(&d0), "--set",
        "data.heldout=2",
    ]);
    assert_eq!(code, 0, "{err}");
    for f in [DATASET_FILE, HELDOUT_FILE, CONFIG_FILE, MANIFEST_FILE] {
        assert!(d0.join(f).exists(), "{f}");
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(d0.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert!(manifest.outputs.iter().any(|o| o.path == DATASET_FILE && o.sha256.len() == 64));
    let config = std::fs::read_to_string(d0.join(CONFIG_FILE)).unwrap();
    assert!(config.contains("seed = 7") && config.contains("env = \"darkroom\""), "{config}");

    let mut args = vec!["train", "--model", "dmh", "--data", s(&d0), "--out", s(&t0)];
    args.extend_from_slice(TINY);
    let (code, _, err) = dmh(&args);
    assert_eq!(code, 0, "{err}");
    assert!(t0.join(CHECKPOINT_FILE).exists());
    assert_eq!(std::fs::read_to_string(t0.join("loss.ndjson")).unwrap().lines().count(), 3);

    let (code, _, err) = dmh(&["eval", "--checkpoint", s(&t0), "--episodes", "3", "--tasks", "heldout", "--out", s(&e0)]);
    assert_eq!(code, 0, "{err}");
    let lines = std::fs::read_to_string(e0.join("metrics.ndjson")).unwrap();
    assert_eq!(lines.lines().count(), 2 * 3);
    assert!(e0.join("metrics.csv").exists());

    // sampled actions run once per evaluation seed
    let e1 = tmp.path().join("e1");
    let (code, _, err) = dmh(&[
        "eval", "--checkpoint", s(&t0), "--episodes", "3", "--out", s(&e1), "--set", "eval.action_selection=sample",
        "--set", "eval.seeds=2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read_to_string(e1.join("metrics.ndjson")).unwrap().lines().count(), 2 * 2 * 3);

    // re-running from the echoed config reproduces the checkpoint bit for bit
    let t1 = tmp.path().join("t1");
    let (code, _, err) = dmh(&["train", "--data", s(&d0), "--config", s(&t0.join(CONFIG_FILE)), "--out", s(&t1)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(t0.join(CHECKPOINT_FILE)).unwrap(), std::fs::read(t1.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn configuration_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let (code, _, err) = dmh(&["gen-data", "--bogus", "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, err) = dmh(&["gen-data", "--out", s(&out), "--set", "train.cc=1"]);
    assert_eq!(code, 1);
    assert!(err.contains("train.cc"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
    let (code, _, err) = dmh(&["gen-data", "--out", s(&out), "--set", "train.c=five"]);
    assert_eq!(code, 1);
    assert!(err.contains("train.c"), "{err}");
    let (code, _, _) = dmh(&["frobnicate"]);
    assert_eq!(code, 1);
    let (code, out_text, _) = dmh(&["--help"]);
    assert_eq!(code, 0);
    assert!(out_text.contains("gen-data"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join(DATASET_FILE), "{not json}\n").unwrap();
    let (code, _, err) = dmh(&["train", "--data", s(&data), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn bench_rejects_short_horizon_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = dmh(&["bench", "--horizons", "10,20,40", "--out", s(&tmp.path().join("b"))]);
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = dmh(&[
        "bench", "--horizons", "8,16,24,32", "--out", s(&tmp.path().join("b")), "--set", "model.embed_dim=8",
        "--set", "model.heads=2", "--set", "eval.timing_reps=1",
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(tmp.path().join("b/timing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}
