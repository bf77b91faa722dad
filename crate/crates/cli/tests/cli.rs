use std::path::Path;
use std::process::{Command, Output};

fn flowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = flowcast(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A 20-window dataset of 64-flow windows under `dir/ds`.
fn dataset(dir: &Path) {
    ok(dir, &["synth", "--set", "n_flows=1280", "--set", "seed=3", "--out", "t.csv"]);
    ok(dir, &["windows", "--flows", "t.csv", "--out", "ds", "--length", "64", "--stride", "64"]);
}

const TINY_GNN: [&str; 8] = ["--set", "epochs=1", "--set", "hidden_dim=8", "--set", "latent_dim=4", "--set", "n_layers=1"];

#[test]
fn windows_on_short_trace_caches_three_graphs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--set", "n_flows=1536", "--out", "t.csv"]);
    assert!(d.join("t.csv.manifest.txt").exists());
    ok(d, &["windows", "--flows", "t.csv", "--out", "ds"]);
    let graphs = std::fs::read_dir(d.join("ds/graphs"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "fgw"))
        .count();
    assert_eq!(graphs, 3);
    assert!(d.join("ds/graphs/manifest.csv").exists());
    assert!(d.join("ds/manifest.txt").exists());
    // Unsplit data cannot be trained on.
    assert_eq!(code(&flowcast(d, &["train", "--model", "gnn", "--data", "ds", "--out", "run"])), 3);
}

#[test]
fn train_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    let mut args = vec!["train", "--model", "gnn", "--data", "ds", "--out", "run_g"];
    args.extend(TINY_GNN);
    ok(d, &args);
    for f in ["model.ckpt", "model.txt", "history.csv", "manifest.txt"] {
        assert!(d.join("run_g").join(f).exists(), "{f}");
    }
    ok(
        d,
        &["train", "--model", "dlinear", "--data", "ds", "--set", "epochs=1", "--set", "hidden_dim=8", "--out", "run_d"],
    );
    ok(d, &["eval", "--run", "run_g", "--data", "ds", "--split", "test", "--out", "rep_g"]);
    ok(d, &["eval", "--run", "run_g", "--data", "ds", "--split", "test", "--out", "rep_g2"]);
    for f in ["metrics.txt", "degree_ip.csv", "degree_src_ip.csv", "degree_dst_port.csv", "degree_port.csv"] {
        let a = std::fs::read(d.join("rep_g").join(f)).unwrap();
        let b = std::fs::read(d.join("rep_g2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between evaluations");
    }
    ok(d, &["eval", "--run", "run_d", "--data", "ds", "--out", "rep_d"]);
    ok(d, &["report", "--runs", "rep_g,rep_d", "--out", "table.csv"]);
    let table = std::fs::read_to_string(d.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,MAE,MSE,Accuracy,AUROC,Precision");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("gnn,"));
    assert!(lines[2].starts_with("dlinear,"));
    assert_eq!(lines[1].split(',').count(), 6);
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    for out in ["a", "b"] {
        let mut args = vec!["train", "--model", "gnn", "--data", "ds", "--out", out];
        args.extend(TINY_GNN);
        ok(d, &args);
    }
    assert_eq!(std::fs::read(d.join("a/model.ckpt")).unwrap(), std::fs::read(d.join("b/model.ckpt")).unwrap());
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("trace.txt"), "n_flows = 640\nseed = 9\n").unwrap();
    ok(d, &["synth", "--config", "trace.txt", "--set", "n_flows=128", "--out", "t.csv"]);
    let rows = std::fs::read_to_string(d.join("t.csv")).unwrap().lines().count();
    assert_eq!(rows, 129);
    let manifest = std::fs::read_to_string(d.join("t.csv.manifest.txt")).unwrap();
    assert!(manifest.contains("param.n_flows = 128"));
    assert!(manifest.contains("seed.trace = 9"));
}

#[test]
fn failure_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&flowcast(d, &["train", "--model", "nope", "--data", "x", "--out", "y"])), 2);
    assert_eq!(code(&flowcast(d, &["synth", "--set", "colour=red", "--out", "t.csv"])), 2);
    assert_eq!(code(&flowcast(d, &["synth", "--set", "n_flows=many", "--out", "t.csv"])), 2);
    assert_eq!(code(&flowcast(d, &["windows", "--flows", "missing.csv", "--out", "ds"])), 3);
    assert_eq!(code(&flowcast(d, &["train", "--model", "gnn", "--data", "missing", "--out", "r"])), 3);
    let out = flowcast(d, &["synth", "--config", "absent.txt", "--out", "t.csv"]);
    assert_eq!(code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");

    dataset(d);
    std::fs::write(d.join("bad.csv"), "src_ip,dst_ip\n1.2.3.4,5.6.7.8\n").unwrap();
    assert_eq!(code(&flowcast(d, &["windows", "--flows", "bad.csv", "--out", "ds2"])), 3);
    // A run whose checkpoint was trained on a different vocabulary size.
    let mut args = vec!["train", "--model", "gnn", "--data", "ds", "--out", "run"];
    args.extend(TINY_GNN);
    ok(d, &args);
    let sidecar = std::fs::read_to_string(d.join("run/model.txt")).unwrap();
    std::fs::write(d.join("run/model.txt"), sidecar.replace("hidden_dim = 8", "hidden_dim = 9")).unwrap();
    assert_eq!(code(&flowcast(d, &["eval", "--run", "run", "--data", "ds", "--out", "rep"])), 3);
}

#[test]
fn tune_writes_journal_and_best_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(
        d,
        &["tune", "--model", "dlinear", "--data", "ds", "--trials", "2", "--set", "epochs=8", "--set", "hidden_dim=8", "--out", "study"],
    );
    let journal = std::fs::read_to_string(d.join("study/journal.csv")).unwrap();
    assert!(journal.starts_with("trial_id,"));
    let best = std::fs::read_to_string(d.join("study/best.txt")).unwrap();
    assert!(best.contains("trial_id = "));
    assert!(best.contains("learning_rate = "));
}
