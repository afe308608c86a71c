use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ldml(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldml"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn ldml")
}

/// 400 rows with two covariates, a confounded treatment and a random instrument.
fn write_csv(dir: &Path) -> PathBuf {
    let path = dir.join("d.csv");
    let mut s = String::from("x1,x2,T,Y,W\n");
    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut unif = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..400 {
        let x1 = unif() * 2.0 - 1.0;
        let x2 = unif();
        let w = u8::from(unif() < 0.5);
        let t = u8::from(unif() < 0.3 + 0.4 * (x1 + 1.0) / 2.0);
        let y = x1 + x2 + f64::from(t) + (unif() - 0.5) * 2.0;
        s.push_str(&format!("{x1},{x2},{t},{y},{w}\n"));
    }
    fs::write(&path, s).unwrap();
    path
}

fn error_code(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stdout).expect("error object");
    assert_eq!(v["schema_version"], 1);
    v["error"]["code"].as_str().unwrap().to_owned()
}

const ESTIMATE: [&str; 19] = [
    "estimate",
    "--data",
    "d.csv",
    "--estimand",
    "quantile",
    "--gamma",
    "0.5",
    "--treatment",
    "T",
    "--outcome",
    "Y",
    "--covariates",
    "x1,x2",
    "--k",
    "5",
    "--kprime",
    "2",
    "--learners",
    "logistic",
];

#[test]
fn estimate_report_has_every_key_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args.extend(["--splits", "3", "--seed", "7", "--output", "r.json"]);
    let out = ldml(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));

    let text = fs::read_to_string(dir.path().join("r.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    for key in [
        "schema_version",
        "config_echo",
        "theta",
        "jacobian",
        "sigma",
        "stderr",
        "ci",
        "splits",
        "warnings",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    for key in ["lower", "upper", "alpha"] {
        assert!(v["ci"].get(key).is_some(), "missing ci.{key}");
    }
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["splits"].as_array().unwrap().len(), 3);
    assert_eq!(v["config_echo"]["seed"], 7);
    let lo = v["ci"]["lower"][0].as_f64().unwrap();
    let hi = v["ci"]["upper"][0].as_f64().unwrap();
    let theta = v["theta"][0].as_f64().unwrap();
    assert!(lo < theta && theta < hi);

    let again: Value = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(v, again);
    assert!(!dir.path().join("r.json.partial").exists());
}

#[test]
fn omitted_seed_is_drawn_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args.extend(["--splits", "1"]);
    let out = ldml(&args, dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["config_echo"]["seed"].is_u64());
}

#[test]
fn echoed_config_reproduces_the_estimate_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args.extend(["--splits", "1", "--seed", "3", "--output", "a.json"]);
    assert!(ldml(&args, dir.path()).status.success());
    let a: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    fs::write(dir.path().join("cfg.json"), a["config_echo"].to_string()).unwrap();

    assert!(
        ldml(&["estimate", "--config", "cfg.json", "--output", "b.json"], dir.path())
            .status
            .success()
    );
    let b: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(a["theta"], b["theta"]);
    assert_eq!(a["sigma"], b["sigma"]);

    let out = ldml(&["estimate", "--config", "cfg.json", "--splits", "2"], dir.path());
    let c: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(c["splits"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_outcome_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let out = ldml(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--estimand",
            "quantile",
            "--gamma",
            "0.5",
            "--treatment",
            "T",
            "--output",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "ConfigError");
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn lqte_without_instrument_fails_with_its_code() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args[4] = "lqte";
    let out = ldml(&args, dir.path());
    assert!(!out.status.success());
    assert_eq!(error_code(&out), "MissingInstrument");
}

#[test]
fn data_errors_carry_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args[10] = "nope";
    let out = ldml(&args, dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_code(&out), "MissingColumn");

    let mut args = ESTIMATE.to_vec();
    args[6] = "1.5";
    assert_eq!(error_code(&ldml(&args, dir.path())), "InvalidGamma");

    let mut args = ESTIMATE.to_vec();
    args[16] = "4";
    assert_eq!(error_code(&ldml(&args, dir.path())), "InvalidKPrime");
}

#[test]
fn effect_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(dir.path());
    let mut args = ESTIMATE.to_vec();
    args.extend(["--splits", "1", "--seed", "2", "--effect"]);
    let out = ldml(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = v["arms"]["treated"]["theta"][0].as_f64().unwrap();
    let c = v["arms"]["control"]["theta"][0].as_f64().unwrap();
    let e = v["theta"][0].as_f64().unwrap();
    assert!((e - (t - c)).abs() < 1e-12);
}

#[test]
fn simulate_reports_one_entry_per_method_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--study",
        "paper-sim",
        "--n",
        "300",
        "--reps",
        "2",
        "--methods",
        "ldml,ipw",
        "--runs",
        "1",
        "--seed",
        "1",
        "--output",
        "s.json",
    ];
    let out = ldml(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let first = fs::read(dir.path().join("s.json")).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["schema_version"], 1);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["method"], "ldml");
    assert_eq!(reports[1]["method"], "ipw");
    assert_eq!(reports[0]["replications"].as_array().unwrap().len(), 2);

    assert!(ldml(&args, dir.path()).status.success());
    assert_eq!(first, fs::read(dir.path().join("s.json")).unwrap());
}

#[test]
fn simulate_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--n", "300", "--reps", "1"];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend(extra);
        ldml(&a, dir.path())
    };
    let out = run(&["--methods", "ldml,bogus", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "ConfigError");
    assert_eq!(error_code(&run(&["--methods", "ldml"])), "ConfigError");
    assert_eq!(error_code(&run(&["--study", "other", "--seed", "1"])), "ConfigError");
    assert_eq!(
        error_code(&run(&["--seed", "1", "--learners", "forest"])),
        "ConfigError"
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let out = ldml(&["simulate", "--config", "c.json"], dir.path());
    assert_eq!(error_code(&out), "ConfigError");
}
