use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cohortsynth"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    fs::write(
        &path,
        format!(
            "out = {:?}\nseed = 3\nsample_size = 30\nresamples = 2\n\n[surrogate]\nn_participants = 40\n\n[hivae]\nepochs = 2\n\n[bn]\nrestarts = 1\n",
            out.display().to_string()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn full_stage_sequence_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for verb in ["simulate", "prepare", "train", "encode", "bn-learn", "sample", "evaluate", "trend"] {
        let o = run(&[verb, "--config", &cfg]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["sample", "--config", &cfg, "--overwrite", "--postprocess"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["postprocess", "--config", &cfg, "--overwrite"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/manifest.json").exists());
    assert!(dir.path().join("out/timings.json").exists());
}

#[test]
fn identical_seeds_give_identical_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["simulate", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(a.join("cohort.csv")).unwrap(), fs::read(b.join("cohort.csv")).unwrap());
}

#[test]
fn unknown_config_keys_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\nunknown_key = 2\n").unwrap();
    let o = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn existing_output_without_overwrite_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let args = ["simulate", "--out", out.to_str().unwrap()];
    assert!(run(&args).status.success());
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["prepare", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_outcome_column_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert!(run(&["simulate", "--out", out.to_str().unwrap()]).status.success());
    let cohort = out.join("cohort.csv");
    let text = fs::read_to_string(&cohort).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let drop = header.iter().position(|h| *h == "ZUZU_p").unwrap();
    let mut stripped = String::new();
    for line in std::iter::once(header.join(",")).chain(lines.map(str::to_string)) {
        let cells: Vec<&str> = line.split(',').enumerate().filter(|(i, _)| *i != drop).map(|(_, c)| c).collect();
        stripped.push_str(&cells.join(","));
        stripped.push('\n');
    }
    fs::write(&cohort, stripped).unwrap();
    let o = run(&["prepare", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let o = run(&["simulate", "--method", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--size", "0", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(2));
}
