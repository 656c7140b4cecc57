//! End-to-end runs of the `sedcl` binary over a miniature corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sedcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sedcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary spawns")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"
method = "ft"
output_dir = "{}"
seeds = [1]

[train]
epochs_per_task = 2
batch_size = 8

[corpus]
num_semantic_classes = 2
num_acoustic_classes = 1
clips_per_class = 10
seed = 11

[[corpus.tasks]]
semantic = [0, 1]
acoustic = [0]
"#,
        out.display()
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_subcommand_writes_and_verifies_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = sedcl(&["run", config.to_str().unwrap()], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("run ok"), "{stdout}");
    assert!(stdout.contains("forgetting 0.00"), "{stdout}");
    let seed_dir = dir.path().join("out").join("seed1");
    for file in ["r_matrix.csv", "metrics.json", "train_log.jsonl", "plot_data.csv"] {
        assert!(seed_dir.join(file).exists(), "{file} missing");
    }
    assert!(dir.path().join("out").join("config.toml").exists());
}

#[test]
fn run_rejects_unknown_method_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = sedcl(
        &["run", config.to_str().unwrap(), "--method", "cleverer_ft"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn report_aggregates_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert!(sedcl(&["run", config.to_str().unwrap()], dir.path()).status.success());
    let out = sedcl(&["report", dir.path().join("out").to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("method,dataset,avg_acc_mean"), "{stdout}");
    assert!(stdout.contains("ft,sem2_ac1_t1,"), "{stdout}");
}

#[test]
fn gen_corpus_writes_wavs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("corpus.toml");
    fs::write(
        &spec,
        r#"
num_semantic_classes = 1
num_acoustic_classes = 1
clips_per_class = 10
seed = 3

[[tasks]]
semantic = [0]
acoustic = [0]
"#,
    )
    .unwrap();
    let corpus_dir = dir.path().join("corpus");
    let out = sedcl(
        &["gen-corpus", spec.to_str().unwrap(), "--out", corpus_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(corpus_dir.join("manifest.jsonl")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 20);
    // Every manifest path resolves to a real WAV file.
    for line in lines {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel = record["path"].as_str().unwrap();
        assert!(corpus_dir.join(rel).exists(), "{rel} missing");
    }
}

#[test]
fn grad_check_passes_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = sedcl(&["grad-check", "--seed", "7"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradients ok"));
}
