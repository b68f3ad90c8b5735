use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gvu_cli::emit::{
    KappaSummary, PotentialRow, Record, StepRow, TrajectoryRow, DECOMPOSITION_HEADER,
};
use gvu_cli::{parse_config, parse_csv, Field, Format, RunManifest, Tabular};
use gvu_core::diagnostics::{DecompositionReport, InequalityReport, SlopReport};
use gvu_core::kappa::KappaPoint;
use gvu_core::representation::NecessityReport;
use gvu_core::stats::{log_log_slope, Estimate};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn gvu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvu"))
        .args(args)
        .output()
        .unwrap()
}

fn run(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        verb,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    gvu(&args)
}

fn run_ok(verb: &str, config: &str, out: &Path) -> RunManifest {
    let o = run(verb, &configs().join(config), out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn error_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn with_inline_battery(name: &str) -> Value {
    let mut v: Value =
        serde_json::from_str(&fs::read_to_string(configs().join(name)).unwrap()).unwrap();
    v["battery"] =
        serde_json::from_str(&fs::read_to_string(configs().join("battery.json")).unwrap()).unwrap();
    v
}

const ALL: &[(&str, &str)] = &[
    ("run", "run_argmin.json"),
    ("decompose", "decompose_oracle.json"),
    ("slop", "slop_noisy.json"),
    ("represent", "represent_cold.json"),
    ("kappa", "kappa_frozen.json"),
    ("kappa", "kappa_goodhart.json"),
    ("sweep", "sweep_judges.json"),
];

#[test]
fn reruns_are_byte_identical() {
    for (verb, config) in ALL {
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let ma = run_ok(verb, config, a.path());
        let o = run(verb, &configs().join(config), b.path(), &["--threads", "1"]);
        assert!(o.status.success());
        let mb: RunManifest =
            serde_json::from_slice(&fs::read(b.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(ma.outputs, mb.outputs);
        assert_eq!(ma.config_hash, mb.config_hash);
        assert!(!ma.outputs.is_empty());
        for file in &ma.outputs {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{config}: {file}"
            );
        }
    }
}

#[test]
fn manifest_hashes_the_canonical_config() {
    let out = TempDir::new().unwrap();
    let m = run_ok("decompose", "decompose_oracle.json", out.path());
    assert_eq!(m.seed, 7);
    assert_eq!(m.kind, "decompose");
    assert_eq!(m.tool_version, env!("CARGO_PKG_VERSION"));
    assert!(m.started_unix_ms <= m.finished_unix_ms);
    let config: Value = serde_json::from_str(&read(out.path(), "config.json")).unwrap();
    assert!(config["battery"].is_object(), "battery path is inlined");
    let digest: String = Sha256::digest(serde_json::to_string(&config).unwrap().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(m.config_hash, digest);

    let cfg = parse_config(&configs().join("decompose_oracle.json")).unwrap();
    assert_eq!(gvu_cli::experiment::config_hash(&cfg), m.config_hash);
    let inline = TempDir::new().unwrap();
    let path = write_config(inline.path(), &with_inline_battery("decompose_oracle.json"));
    assert_eq!(
        gvu_cli::experiment::config_hash(&parse_config(&path).unwrap()),
        m.config_hash
    );
}

#[test]
fn oracle_decomposition_is_aligned() {
    let out = TempDir::new().unwrap();
    run_ok("decompose", "decompose_oracle.json", out.path());
    let text = read(out.path(), "decomposition.csv");
    assert_eq!(text.lines().next().unwrap(), DECOMPOSITION_HEADER);
    let report = &parse_csv::<DecompositionReport>(&text).unwrap()[0];
    let stats = &parse_csv::<Record>(&read(out.path(), "decomposition_stats.csv")).unwrap()[0];
    let Some(Field::Float(se)) = stats.get("rho_stderr") else {
        panic!("rho_stderr missing");
    };
    assert!(
        (report.rho - 1.0).abs() <= 4.0 * se,
        "rho {} se {se}",
        report.rho
    );
    assert_eq!(report.sigma_v2, 0.0);
    let json: DecompositionReport =
        serde_json::from_str(&read(out.path(), "decomposition.json")).unwrap();
    assert_eq!(&json, report);
}

#[test]
fn frozen_updater_has_zero_kappa() {
    let out = TempDir::new().unwrap();
    run_ok("kappa", "kappa_frozen.json", out.path());
    let summary = &parse_csv::<KappaSummary>(&read(out.path(), "kappa.csv")).unwrap()[0];
    assert!(summary.kappa_hat.abs() <= 1e-12, "{summary:?}");
    assert_eq!(summary.consumed, 400);
    let rows = parse_csv::<TrajectoryRow>(&read(out.path(), "trajectory.csv")).unwrap();
    assert_eq!(rows.len() as u64, summary.checkpoints);
    assert!(read(out.path(), "trajectory.csv")
        .starts_with("consumed,F,strict_rate,family:math,family:code,flags\n"));
}

#[test]
fn every_csv_round_trips() {
    fn check<T: Tabular + PartialEq + std::fmt::Debug>(dir: &Path, name: &str) {
        let text = read(dir, name);
        let rows = parse_csv::<T>(&text).unwrap();
        assert_eq!(
            gvu_cli::emit::render(&rows, Format::Csv).unwrap(),
            text,
            "{name}"
        );
    }
    let dirs: Vec<(TempDir, &str)> = ALL
        .iter()
        .chain(&[("inequality", "sweep_eta.json")])
        .map(|(verb, config)| {
            let d = TempDir::new().unwrap();
            let cfg = if *verb == "inequality" {
                let mut v = with_inline_battery("sweep_eta.json");
                v["experiment"]["replicas"] = json!(200);
                write_config(d.path(), &v)
            } else {
                configs().join(config)
            };
            assert!(run(verb, &cfg, &d.path().join("out"), &[]).status.success());
            (d, *verb)
        })
        .collect();
    for (d, verb) in &dirs {
        let out = d.path().join("out");
        match *verb {
            "run" => check::<StepRow>(&out, "run.csv"),
            "decompose" => check::<DecompositionReport>(&out, "decomposition.csv"),
            "slop" => check::<SlopReport>(&out, "slop.csv"),
            "represent" => {
                check::<PotentialRow>(&out, "implied_potential.csv");
                check::<NecessityReport>(&out, "necessity.csv");
                check::<Record>(&out, "representation.csv");
            }
            "kappa" => {
                check::<TrajectoryRow>(&out, "trajectory.csv");
                check::<KappaSummary>(&out, "kappa.csv");
                check::<KappaPoint>(&out, "kappa_curve.csv");
            }
            "sweep" => check::<Record>(&out, "sweep.csv"),
            "inequality" => {
                check::<InequalityReport>(&out, "inequality.csv");
                check::<Estimate>(&out, "gain.csv");
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn judge_sweep_scales_inversely() {
    let out = TempDir::new().unwrap();
    run_ok("sweep", "sweep_judges.json", out.path());
    let rows = parse_csv::<Record>(&read(out.path(), "sweep.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    let float = |r: &Record, k: &str| match r.get(k) {
        Some(Field::Float(x)) => *x,
        other => panic!("{k}: {other:?}"),
    };
    let m: Vec<f64> = rows.iter().map(|r| float(r, "value")).collect();
    let sv: Vec<f64> = rows.iter().map(|r| float(r, "sigma_v2")).collect();
    let slope = log_log_slope(&m, &sv);
    assert!((slope + 1.0).abs() <= 0.1, "slope {slope}");
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(
            r.get("seed"),
            Some(&Field::Int(gvu_core::rng::derive_seed(40, i as u64)))
        );
        assert!(out
            .path()
            .join(format!("point_{i:04}/decomposition.csv"))
            .exists());
    }
}

#[test]
fn eta_sweep_reports_gain_and_prediction() {
    let dir = TempDir::new().unwrap();
    let mut v = with_inline_battery("sweep_eta.json");
    v["experiment"]["replicas"] = json!(200);
    let path = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    assert!(run("sweep", &path, &out, &[]).status.success());
    let rows = parse_csv::<Record>(&read(&out, "sweep.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!(matches!(r.get("gain_mean"), Some(Field::Float(_))));
        assert!(matches!(r.get("holds"), Some(Field::Bool(_))));
    }
    assert_eq!(rows[0].get("holds"), Some(&Field::Bool(true)));
    assert_eq!(rows[11].get("holds"), Some(&Field::Bool(false)));
}

#[test]
fn validation_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("/verifier/kind", json!("magic"), "verifier.kind"),
        ("/experiment/replicas", json!(3), "experiment.replicas"),
        ("/updater/eta", json!(0.0), "updater.eta"),
        ("/experiment/frobnicate", json!(1), "experiment.frobnicate"),
    ];
    for (pointer, value, field) in cases {
        let mut v = with_inline_battery("decompose_oracle.json");
        let (parent, key) = pointer.rsplit_once('/').unwrap();
        v.pointer_mut(parent).unwrap()[key] = value;
        let o = run("decompose", &write_config(dir.path(), &v), &out, &[]);
        assert_eq!(o.status.code(), Some(2));
        let err = error_json(&o);
        assert_eq!(err["error"], "ValidationError");
        assert_eq!(err["field"], field);
    }
    assert!(!out.exists(), "nothing is written for invalid configs");
}

#[test]
fn seed_is_never_implicit() {
    let dir = TempDir::new().unwrap();
    let mut v = with_inline_battery("decompose_oracle.json");
    v["experiment"].as_object_mut().unwrap().remove("seed");
    let path = write_config(dir.path(), &v);
    let o = run("decompose", &path, &dir.path().join("a"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["field"], "experiment.seed");

    let o = run("decompose", &path, &dir.path().join("b"), &["--seed", "7"]);
    assert!(o.status.success());
    let reference = TempDir::new().unwrap();
    run_ok("decompose", "decompose_oracle.json", reference.path());
    assert_eq!(
        read(&dir.path().join("b"), "decomposition.csv"),
        read(reference.path(), "decomposition.csv")
    );
}

#[test]
fn sweep_rejects_bad_paths_and_empty_values() {
    let dir = TempDir::new().unwrap();
    let mut v = with_inline_battery("sweep_judges.json");
    v["experiment"]["sweep_param"] = json!("verifier.jduges");
    let o = run(
        "sweep",
        &write_config(dir.path(), &v),
        &dir.path().join("o"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "BadParamPath");

    v["experiment"]["sweep_param"] = json!("verifier.judges");
    v["experiment"]["sweep_values"] = json!([]);
    let o = run(
        "sweep",
        &write_config(dir.path(), &v),
        &dir.path().join("o"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["field"], "experiment.sweep_values");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("broken.json"), "{\n  \"battery\": [1, 2,\n").unwrap();
    let o = run(
        "run",
        &dir.path().join("broken.json"),
        &dir.path().join("o"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = error_json(&o);
    assert_eq!(err["error"], "ParseError");
    assert_eq!(err["line"], 3);

    let mut v = with_inline_battery("run_argmin.json");
    v["verifier"] = json!({"kind": "constant", "const_value": 1e6, "beta": 1.0});
    v["updater"] = json!({"mode": "reinforce", "eta": 1.0});
    let o = run(
        "run",
        &write_config(dir.path(), &v),
        &dir.path().join("o"),
        &[],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "NumericError");

    let file = dir.path().join("not_a_dir");
    fs::write(&file, "").unwrap();
    let o = run(
        "decompose",
        &configs().join("decompose_oracle.json"),
        &file,
        &[],
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"], "IoError");

    let o = run(
        "decompose",
        &dir.path().join("missing.json"),
        &dir.path().join("o"),
        &[],
    );
    assert_eq!(o.status.code(), Some(4));
}
