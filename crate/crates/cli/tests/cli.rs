use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tcprune::commands::{read_compare_summary, EVAL_FILE, MERGED_FILE};
use tcprune_core::driver::Method;

const TINY: &str = "channel_plan = [6, 8]\nfc_widths = [8, 6]\ndata = \"n=96,size=8,classes=3\"\n\
    [prune]\nk = 2\niters = 4\nbase_epochs = 1\nshort_ft_epochs = 1\nlong_ft_epochs = 1\n";

fn tcprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcprune")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    tcprune(args).status.code().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(code(&["--help"]), 0);
    for sub in ["gen-data", "train-base", "prune", "eval", "report", "compare"] {
        assert_eq!(code(&[sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["prune", "--out", "x", "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["prune"]), 2);
    assert_eq!(code(&["compare", "--seeds", "a,b", "--out", "x"]), 2);
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&["prune", "--method", "magic", "--out", s(&out)]), 3);
    assert_eq!(code(&["prune", "--mmd", "fixed:-1", "--out", s(&out)]), 3);
    assert_eq!(code(&["prune", "--flops-target", "1.5", "--out", s(&out)]), 3);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["prune", "--config", s(&bad), "--out", s(&out)]), 3);
    assert_eq!(code(&["prune", "--config", s(&dir.path().join("missing.toml")), "--out", s(&out)]), 3);
    assert!(!out.exists());
}

#[test]
fn pipeline_from_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "flops_target = 0.7\n");
    let data = dir.path().join("data");
    let base = dir.path().join("base");
    let run = dir.path().join("run");
    assert_eq!(code(&["gen-data", "--config", &cfg, "--seed", "3", "--out", s(&data)]), 0);
    let data_arg = ["--data", s(&data)];
    let mut a = vec!["train-base", "--config", &cfg, "--seed", "3", "--out", s(&base)];
    a.extend(data_arg);
    assert_eq!(code(&a), 0);
    assert!(base.join("model/graph.json").is_file());
    let mut a = vec!["prune", "--config", &cfg, "--seed", "3", "--base", s(&base), "--out", s(&run)];
    a.extend(data_arg);
    let o = tcprune(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.toml", "report.csv", "summary.json", "model/params.tcpc"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // the run stops only once the FLOPs target is met or iterations run out
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let rows = fs::read_to_string(run.join("report.csv")).unwrap().lines().count() - 1;
    assert!(rows >= 1);
    assert!(summary["flops_down"].as_f64().unwrap() >= 0.3 || rows == 4, "{summary}");

    let mut a = vec!["eval", "--model", s(&run), "--out", s(&run)];
    a.extend(data_arg);
    assert_eq!(code(&a), 0);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(EVAL_FILE)).unwrap()).unwrap();
    let acc = eval["target_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let merged = dir.path().join("merged.csv");
    assert_eq!(code(&["report", s(&run), "--out", s(&merged)]), 0);
    assert_eq!(fs::read_to_string(&merged).unwrap().lines().count(), 2);
}

#[test]
fn manifest_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&["gen-data", "--config", &cfg, "--out", s(&data)]), 0);
    assert_eq!(code(&["prune", "--config", &cfg, "--data", s(&data), "--out", s(&run)]), 0);
    let victim = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_file())
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    let again = dir.path().join("again");
    assert_eq!(code(&["prune", "--manifest", s(&run), "--out", s(&again)]), 1);
}

#[test]
fn full_flops_target_prunes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "flops_target = 1.0\n");
    let run = dir.path().join("run");
    assert_eq!(code(&["prune", "--config", &cfg, "--out", s(&run)]), 0);
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1, "{report}");
}

#[test]
fn compare_fans_out_every_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "flops_target = 0.8\n");
    let out = dir.path().join("cmp");
    let o = tcprune(&["compare", "--config", &cfg, "--seeds", "1,2,3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 1..=3 {
        for m in Method::ALL {
            let run = out.join(format!("{m}-seed{seed}"));
            assert!(run.join("report.csv").is_file(), "{}", run.display());
            assert!(run.join(EVAL_FILE).is_file());
        }
    }
    let merged = fs::read_to_string(out.join(MERGED_FILE)).unwrap();
    assert_eq!(merged.lines().count(), 13);
    let summary = read_compare_summary(&out).unwrap();
    assert_eq!(summary.len(), 5);
    assert!(summary.iter().all(|r| r.runs == 3));
}
