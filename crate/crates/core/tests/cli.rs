use std::fs;
use std::path::{Path, PathBuf};

use attngen::cli::{run, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("attngen").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

const SMALL: [&str; 10] = [
    "--set", "embed_dim=8", "--set", "channels=4,4,4", "--set", "fc_hidden=8", "--set", "max_epochs=1", "--set",
    "batch_size=32",
];

fn corpus(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    let count = format!("count={count}");
    assert_eq!(cli(&["gen-synthetic", "--out-dir", &s(&out), "--set", &count]), 0);
    out.join("corpus.csv")
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = corpus(dir, 120);
    let run_dir = dir.join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", run_dir.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(cli(&args), 0);
    (data, run_dir)
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("o"));
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(cli(&["train", "--out-dir", &out, "--set", "learning_rate=0.1"]), EXIT_CONFIG);
    assert_eq!(cli(&["train", "--out-dir", &out, "--set", "alpha=1.5"]), EXIT_CONFIG);
    assert_eq!(cli(&["train", "--out-dir", &out]), EXIT_CONFIG);
    assert_eq!(cli(&["--help"]), 0);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_corpus_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = s(&dir.path().join("nope.csv"));
    assert_eq!(cli(&["train", "--data", &missing, "--out-dir", &s(&out)]), EXIT_DATA);
    assert!(!out.exists());
}

#[test]
fn malformed_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "sequence,label\nACGTXACGT,0\n").unwrap();
    assert_eq!(cli(&["train", "--data", &s(&bad), "--out-dir", &s(&dir.path().join("o"))]), EXIT_DATA);
}

#[test]
fn generated_corpus_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 1000);
    let text = fs::read_to_string(&data).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(labels.len(), 1000);
    assert_eq!(labels.iter().filter(|&&l| l == "0").count(), 500);
    let truth = fs::read_to_string(data.with_file_name("ground_truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1001);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 120);
    let out = dir.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(["--set", "lr=1e30", "--set", "clip_norm=1e30"]);
    assert_eq!(cli(&args), EXIT_NUMERIC);
}

#[test]
fn train_eval_perturb_viz_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir) = trained(dir.path());
    for f in ["config.resolved.txt", "metrics.csv", "checkpoint.atng", "summary.txt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = s(&run_dir.join("checkpoint.atng"));
    let eval_dir = dir.path().join("eval");
    assert_eq!(cli(&["eval", "--checkpoint", &ckpt, "--out-dir", &s(&eval_dir)]), 0);
    assert!(eval_dir.join("predictions.csv").exists());

    let pert = dir.path().join("pert");
    let truth = s(&data.with_file_name("ground_truth.csv"));
    let code = cli(&["perturb", "--checkpoint", &ckpt, "--out-dir", &s(&pert), "--ground-truth", &truth]);
    assert_eq!(code, 0);
    let curve = fs::read_to_string(pert.join("curve_high.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "m,mean_acc,std,drop,order");
    assert_eq!(lines.len(), 10);
    assert!(pert.join("curve_high.svg").exists());
    assert!(pert.join("localization.txt").exists());

    let viz = dir.path().join("viz");
    let curve_path = s(&pert.join("curve_high.csv"));
    assert_eq!(cli(&["viz", "--checkpoint", &ckpt, "--out-dir", &s(&viz), "--curve", &curve_path]), 0);
    let ppm = fs::read(viz.join("masks.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
    assert!(viz.join("masks.csv").exists());
}

#[test]
fn bad_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run_dir) = trained(dir.path());
    let ckpt = s(&run_dir.join("checkpoint.atng"));
    let out = s(&dir.path().join("p"));
    assert_eq!(cli(&["perturb", "--checkpoint", &ckpt, "--out-dir", &out, "--schedule", "0,300"]), EXIT_CONFIG);
}

#[test]
fn ablate_writes_all_arms() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 80);
    let cfg = dir.path().join("ablate.txt");
    fs::write(&cfg, "embed_dim = 8\nchannels = 4,4,4\nfc_hidden = 8\nmax_epochs = 1\n").unwrap();
    let out = dir.path().join("ab");
    assert_eq!(cli(&["ablate", "--config", &s(&cfg), "--data", &s(&data), "--out-dir", &s(&out)]), 0);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let arms: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["Full", "RandomMask+KL", "AttentionNoKL", "Baseline"]);
}
