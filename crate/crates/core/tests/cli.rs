mod common;

use std::fs;
use std::process::Command;

fn units(args: &[&str], cwd: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_units"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(units(&["no-such-command"], tmp.path()).status.code(), Some(1));
    assert_eq!(units(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(units(&["ablate", "tables"], tmp.path()).status.code(), Some(1));
    fs::write(tmp.path().join("bad.json"), r#"{"sedes": [1]}"#).unwrap();
    assert_eq!(units(&["--config", "bad.json", "show-config"], tmp.path()).status.code(), Some(1));
    assert_eq!(units(&["stage", "units"], tmp.path()).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.json"), common::tiny_config().to_json()).unwrap();
    let out = units(&["--config", "tiny.json", "--quiet", "eval", "--checkpoint", "nope.ckpt"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_then_eval_reproduces_the_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.json"), common::tiny_config().to_json()).unwrap();
    let cfg = ["--config", "tiny.json", "--quiet"];
    let gen = units(&[&cfg[..], &["gen-data"]].concat(), tmp.path());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(tmp.path().join("out/data/real_test/manifest.json").exists());
    let run = units(&[&cfg[..], &["run"]].concat(), tmp.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = fs::read_to_string(tmp.path().join("out/run-3/metrics.csv")).unwrap();
    let finetune = metrics.lines().find(|l| l.contains(",finetune,")).unwrap();
    let eval = units(&[&cfg[..], &["eval", "--checkpoint", "out/run-3/finetune.ckpt"]].concat(), tmp.path());
    assert!(eval.status.success());
    let row = String::from_utf8(eval.stdout).unwrap();
    let tail = |l: &str| l.split(',').skip(4).collect::<Vec<_>>().join(",");
    assert_eq!(tail(row.lines().nth(1).unwrap()), tail(finetune));
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = units(&["show-config", "--seed", "4"], tmp.path());
    assert!(out.status.success());
    let cfg = units_core::pipeline::ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds, vec![4]);
}
