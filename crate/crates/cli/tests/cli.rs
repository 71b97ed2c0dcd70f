use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pflow_lab::experiments::finite_rule;
use pflow_lab::report::Table;
use pflow_lab::{run_experiment, ExperimentConfig, SCHEMA};

fn lab(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lab"));
    cmd.args(args).env_remove("LAB_JOBS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const DECAY: &str = r#"{
  "experiment": "prior-decay",
  "seed": 21,
  "cloud": { "atoms": [[0.0], [2.0]] },
  "prior_decay": { "cases": [ { "forward": "ve", "T": [2, 4, 8, 16], "acceptance": { "slope": SLOPE, "tolerance": 0.05 } } ], "cells": 200 }
}"#;

#[test]
fn validate_accepts_every_fixture() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = lab(&["validate", path.to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}: {}", path.display(), text(&out.stderr));
        count += 1;
    }
    assert!(count >= 10);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"experiment": "schedule-info", "seed": 1, "schedule": {"T": 4, "delta": 0.1, "eta": 0.2, "colour": 1}}"#,
    );
    let out = lab(&["validate", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("colour"), "{}", text(&out.stderr));
}

#[test]
fn validation_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{
          "experiment": "convergence",
          "seed": 1,
          "cloud": {"atoms": [[0.0], [1.0]]},
          "convergence": {"forward": "ve", "scheme": "ei", "T": 0.5, "delta": 2.0, "steps": [8, 4]},
          "schedule": {"T": 4, "delta": 0.1, "eta": 0.2}
        }"#,
    );
    let out = lab(&["validate", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for needle in ["schedule", "T must exceed 1", "delta must be below 1", "four entries", "ascending", "needs the VP"] {
        assert!(err.contains(needle), "missing `{needle}` in:\n{err}");
    }
}

#[test]
fn run_writes_outputs_and_honours_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = lab(
        &["run", &fixture("schedule.json"), "--out", out_dir.to_str().unwrap(), "--seed", "99"],
        &[],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "seed,k,t_k,t_next,step,remaining");
    assert!(lines.all(|l| l.starts_with("99,")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["config"]["seed"], 99);
    assert!(out_dir.join("grid.json").exists());
}

#[test]
fn failing_rule_gives_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.json", &DECAY.replace("SLOPE", "-0.5"));
    let bad = write_config(dir.path(), "bad.json", &DECAY.replace("SLOPE", "3.0"));
    let o = dir.path().join("o");
    let ok = lab(&["run", &good, "--out", o.to_str().unwrap()], &[]);
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok.stdout));
    assert!(o.join("plot.svg").exists());
    let fail = lab(&["run", &bad, "--out", o.to_str().unwrap()], &[]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(text(&fail.stdout).contains("FAIL ve_log_tv_vs_log_T_slope"));
}

#[test]
fn lab_jobs_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &DECAY.replace("SLOPE", "-0.5"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let one = lab(&["run", &cfg, "--out", a.to_str().unwrap(), "--jobs", "1"], &[]);
    let many = lab(&["run", &cfg, "--out", b.to_str().unwrap(), "--jobs", "1"], &[("LAB_JOBS", "3")]);
    assert!(one.status.success() && many.status.success());
    for f in ["metrics.csv", "report.json", "plot.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // An invalid override is an error even when the flag is valid.
    let bad = lab(&["run", &cfg, "--out", a.to_str().unwrap(), "--jobs", "2"], &[("LAB_JOBS", "none")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(text(&bad.stderr).contains("LAB_JOBS"));
}

#[test]
fn plot_command() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "scheme,N,tv\nei,64,0.05\nei,128,0.025\nddim,64,0.03\nddim,128,0.015\n").unwrap();
    let svg = dir.path().join("p.svg");
    let args = ["plot", csv.to_str().unwrap(), "--x", "N", "--y", "tv", "--log-log", "--group", "scheme", "--out", svg.to_str().unwrap()];
    assert!(lab(&args, &[]).status.success());
    let first = std::fs::read(&svg).unwrap();
    assert_eq!(text(&first).matches("<polyline").count(), 2);
    assert!(lab(&args, &[]).status.success());
    assert_eq!(first, std::fs::read(&svg).unwrap());

    std::fs::write(&csv, "N,tv\n").unwrap();
    let empty = dir.path().join("empty.svg");
    let out = lab(&["plot", csv.to_str().unwrap(), "--x", "N", "--y", "tv", "--out", empty.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!empty.exists());
}

#[test]
fn schema_is_json_and_covers_fixture_keys() {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let out = lab(&["schema"], &[]);
    assert_eq!(text(&out.stdout), SCHEMA);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    for entry in std::fs::read_dir(dir).unwrap() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(entry.unwrap().path()).unwrap()).unwrap();
        for (key, section) in v.as_object().unwrap() {
            let p = props.get(key).unwrap_or_else(|| panic!("`{key}` missing from schema"));
            if let (Some(inner), Some(sp)) = (section.as_object(), p.get("properties")) {
                for k in inner.keys() {
                    assert!(sp.get(k).is_some(), "`{key}.{k}` missing from schema");
                }
            }
        }
    }
}

#[test]
fn two_dimensional_convergence_uses_weighted_monte_carlo() {
    let config = ExperimentConfig::from_json(
        r#"{
          "experiment": "convergence",
          "seed": 5,
          "cloud": {"atoms": [[-1.0, 0.0], [1.0, 0.5]]},
          "convergence": {"forward": "vp", "scheme": "ei", "T": 3.0, "delta": 0.1, "steps": [8, 16, 32, 64], "samples": 400}
        }"#,
    )
    .unwrap();
    let a = run_experiment(&config, Path::new("."), 1).unwrap();
    let b = run_experiment(&config, Path::new("."), 3).unwrap();
    assert_eq!(a.report.metrics.to_csv().unwrap(), b.report.metrics.to_csv().unwrap());
    let fit = &a.report.fits[0].fit;
    assert_eq!(fit.points, 4);
    assert!(fit.slope < -0.5 && fit.slope > -1.5, "{fit:?}");
    assert!(a.report.pass);
}

#[test]
fn nan_fails_the_run() {
    let mut table = Table::new(&["seed", "tv"]);
    table.push(vec![1u64.into(), 0.5.into()]);
    assert!(finite_rule(&table, &[]).pass);
    table.push(vec![1u64.into(), f64::NAN.into()]);
    assert!(!finite_rule(&table, &[]).pass);
    assert!(table.to_csv().unwrap().ends_with("1,NaN\n"));
}

#[test]
fn continuous_bound_fixture_passes() {
    let path = PathBuf::from(fixture("continuous_bound.json"));
    let config = ExperimentConfig::from_file(&path).unwrap();
    let out = run_experiment(&config, path.parent().unwrap(), 2).unwrap();
    assert!(out.report.pass, "{:?}", out.report.rules);
    assert!(out.report.metrics.rows.iter().any(|r| r[2] == "score_term_doubling".into()));
}
