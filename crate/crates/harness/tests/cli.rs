//! The `emm` binary end to end.

use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
name = "tiny-cli"
seeds = [0, 1]
checkpoint = true
[stream]
modes = 2
dim = 8
per_mode = 300
test_per_mode = 100
[model]
capacity = 200
hsic_samples = 64
latent_dim = 4
vae_hidden = [16]
classifier_hidden = [16]
"#;

fn emm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emm"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let status = emm()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for file in ["events.jsonl", "report.json", "checkpoint-seed1.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    assert!(!out.join("checkpoint-seed0.json").exists());

    let log = std::fs::read_to_string(out.join("events.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_some());
    }

    let eval = emm()
        .args(["eval", "--checkpoint"])
        .arg(out.join("checkpoint-seed1.json"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("accuracy "));
}

#[test]
fn sweep_prints_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", &TINY.replace("seeds = [0, 1]", "seeds = [0]"));
    let out = emm()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--lambda", "0.01,0.5"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    assert!(dir.path().join("sweep.json").exists());
}

#[test]
fn bad_inputs_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "bad.toml", "[model]\nlamda = 0.1\n");
    let negative = write(dir.path(), "neg.toml", "[model]\nlambda = -0.1\n");
    for cfg in [&unknown, &negative, &dir.path().join("missing.toml")] {
        let out = emm().args(["run", "--config"]).arg(cfg).output().unwrap();
        assert!(!out.status.success());
        assert!(!out.stderr.is_empty());
    }
    let descending = emm()
        .args(["sweep", "--config"])
        .arg(write(dir.path(), "ok.toml", TINY))
        .args(["--lambda", "0.5,0.1"])
        .output()
        .unwrap();
    assert!(!descending.status.success());
}
