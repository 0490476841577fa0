use std::path::Path;
use std::process::{Command, Output};

fn mspt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mspt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(code(&mspt(&[])), 1);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&mspt(&["--help"])), 0);
    let out = mspt(&["--version"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mspt"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&mspt(&["gradcheck", "--bogus"])), 1);
}

#[test]
fn gradcheck_passes_on_toy_model() {
    let out = mspt(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mspt(&[
        "eval",
        "--checkpoint",
        &s(&dir.path().join("none.ckpt")),
        "--data",
        &s(dir.path()),
        "--report",
        &s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_without_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mspt(&["gen", "--task", "darcy", "--n-samples", "2", "--out", &s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn partition_writes_a_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let coords = dir.path().join("pts.json");
    let pts: Vec<[f64; 2]> = (0..37).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    std::fs::write(&coords, serde_json::to_string(&pts).unwrap()).unwrap();
    let out = mspt(&["partition", "--coords", &s(&coords), "--patches", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut perm: Vec<u64> = doc["perm"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    perm.sort_unstable();
    assert_eq!(perm, (0..37).collect::<Vec<u64>>());
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mspt(&["gen", "--task", "darcy", "--n-samples", "6", "--grid", "8x8", "--seed", "1", "--out", &s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let config = dir.path().join("run.json");
    let json = serde_json::json!({
        "model": {"blocks": 1, "width": 8, "heads": 2, "patches": 2, "supernodes": 1, "pooling": "mean",
                  "in_dim": 0, "out_dim": 0},
        "train": {"epochs": 2, "val_fraction": 0.34}
    });
    std::fs::write(&config, json.to_string()).unwrap();
    let run = dir.path().join("run");
    let out = mspt(&["train", "--config", &s(&config), "--data", &s(&data), "--out", &s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);

    let report = dir.path().join("eval.csv");
    let out = mspt(&[
        "eval",
        "--checkpoint",
        &s(&run.join("best.ckpt")),
        "--data",
        &s(&data),
        "--report",
        &s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["samples"], 6);
    assert!(summary["mean_rel_l2"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read_to_string(report).unwrap().lines().count(), 7);
}

#[test]
fn tradeoff_table_prints_analytic_costs() {
    let out = mspt(&["bench", "--n", "1024", "--k", "1,4,16", "--tradeoff"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().next(), Some("N,K,L,Q,F,flops_analytic"));
    assert_eq!(text.lines().count(), 4);
}
