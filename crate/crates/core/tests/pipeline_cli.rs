use std::path::Path;
use std::process::{Command, Output};

fn mrp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MRP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, n: usize) {
    ok(mrp(&["simulate", "--n", &n.to_string(), "--seed", "3", "--out-dir", "sim"], dir));
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn write_config(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

#[test]
fn map_run_writes_point_estimates_without_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 3000);
    write_config(
        dir,
        "run.json",
        r#"{"survey": "sim/survey.csv", "cells": "sim/cells.csv", "output_dir": "out", "method": "map"}"#,
    );
    ok(mrp(&["run", "--config", "run.json"], dir));
    let out = dir.join("out");
    assert_eq!(csv_rows(&out.join("estimates.csv")), 510);
    assert!(!out.join("draws.csv").exists());
    assert!(out.join("figure.svg").exists() && out.join("fit.json").exists());
    assert!(!out.join(".mrp.lock").exists());
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["kind"], "MAP");
}

#[test]
fn hmc_run_through_separate_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 1500);
    write_config(dir, "sampler.json", r#"{"chains": 2, "warmup": 200, "samples": 200, "seed": 5}"#);
    ok(mrp(
        &[
            "fit",
            "--survey",
            "sim/survey.csv",
            "--cells",
            "sim/cells.csv",
            "--sampler-config",
            "sampler.json",
            "--method",
            "hmc",
            "--out-dir",
            "fit",
            "--allow-unconverged",
        ],
        dir,
    ));
    assert_eq!(csv_rows(&dir.join("fit/draws.csv")), 400);
    ok(mrp(
        &[
            "poststratify",
            "--fit-dir",
            "fit",
            "--cells",
            "sim/cells.csv",
            "--survey",
            "sim/survey.csv",
            "--out",
            "estimates.csv",
        ],
        dir,
    ));
    assert_eq!(csv_rows(&dir.join("estimates.csv")), 510);
    let header = std::fs::read_to_string(dir.join("estimates.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("q975"));
    ok(mrp(
        &[
            "figure",
            "--estimates",
            "estimates.csv",
            "--cells",
            "sim/cells.csv",
            "--filter",
            "contiguous-48",
            "--out",
            "fig.svg",
        ],
        dir,
    ));
    let svg = std::fs::read_to_string(dir.join("fig.svg")).unwrap();
    assert_eq!(svg.matches("class=\"panel\"").count(), 48);
    ok(mrp(
        &["compare", "--a", "estimates.csv", "--b", "sim/truth.csv", "--cells", "sim/cells.csv", "--out-dir", "cmp"],
        dir,
    ));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("cmp/comparison.json")).unwrap()).unwrap();
    assert!(report["mean_abs_diff"].as_f64().unwrap() < 0.1);
}

#[test]
fn missing_cell_table_fails_in_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 500);
    write_config(
        dir,
        "run.json",
        r#"{"survey": "sim/survey.csv", "cells": "nowhere.csv", "output_dir": "out", "method": "map"}"#,
    );
    let out = mrp(&["run", "--config", "run.json"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ingest") && err.contains("nowhere.csv"), "{err}");
    assert!(!dir.join("out/estimates.csv").exists());
}

#[test]
fn manifest_round_trip_and_tamper_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 800);
    write_config(
        dir,
        "run.json",
        r#"{"survey": "sim/survey.csv", "cells": "sim/cells.csv", "output_dir": "out", "method": "map",
            "pre_manifest": "pre.json"}"#,
    );
    ok(mrp(
        &[
            "manifest",
            "pre",
            "--input",
            "pipeline=run.json",
            "--data",
            "survey=sim/survey.csv",
            "--statement",
            "income gradient by state",
            "--out",
            "pre.json",
        ],
        dir,
    ));
    ok(mrp(&["run", "--config", "run.json"], dir));
    assert!(ok(mrp(&["manifest", "verify", "out/manifest.json"], dir)).contains("verified"));

    std::fs::write(dir.join("out/estimates.csv"), "tampered\n").unwrap();
    let out = mrp(&["manifest", "verify", "out/manifest.json"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimates.csv"));
}

#[test]
fn seed_from_environment_reaches_the_simulator() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mrp"))
            .args(["simulate", "--n", "200", "--out-dir", out])
            .env("MRP_SEED", seed)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(dir.join(out).join("survey.csv")).unwrap()
    };
    assert_eq!(run("8", "a"), run("8", "b"));
    assert_ne!(run("8", "a"), run("9", "c"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mrp(&["simulate", "--preset", "gallup", "--out-dir", "x"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    let out = mrp(&["figure", "--estimates", "e.csv", "--out", "f.svg", "--filter", "states-49"], tmp.path());
    assert!(!out.status.success());
}
