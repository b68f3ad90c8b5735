//! Dispatch from a validated config to the numerical pipelines, artifact
//! writing and the run manifest.
//!
//! Every kind draws from independent named streams of the experiment seed,
//! so reruns with the same config and seed write identical data files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gvu_core::battery::{capability_exact, external_score};
use gvu_core::diagnostics::{
    check_inequality, decay_verifier, decompose, estimate_curvature, measure_gain, slop,
};
use gvu_core::gvu::gvu_step;
use gvu_core::kappa::{kappa_curve, kappa_hat, run_trajectory};
use gvu_core::representation::{
    implied_potential, necessity_probe, reconstruct_field, DEFAULT_DAMPING,
};
use gvu_core::{Stream, Theta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{sweep_point, ExperimentConfig, ExperimentKind, SweepSpec};
use crate::emit::{
    render, Field, Format, KappaSummary, PotentialRow, Record, StepRow, Tabular, TrajectoryRow,
};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the canonical config JSON, hex encoded.
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub kind: String,
    /// Data files relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// Hex SHA-256 of the sorted-key compact JSON of the resolved config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.canonical_json().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Files written under one directory, named relative to the run root.
struct Artifacts {
    dir: PathBuf,
    prefix: String,
    files: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path, prefix: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            prefix: prefix.to_string(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(format!("{}{name}", self.prefix));
        Ok(())
    }

    fn table<T: Tabular>(&mut self, stem: &str, rows: &[T]) -> Result<()> {
        self.write(&format!("{stem}.csv"), &render(rows, Format::Csv)?)
    }

    fn report<T: Tabular>(&mut self, stem: &str, report: &T) -> Result<()> {
        let mut json = Vec::new();
        crate::emit::emit(report, Format::Json, &mut json)?;
        self.write(
            &format!("{stem}.json"),
            std::str::from_utf8(&json).expect("UTF-8"),
        )?;
        self.table(stem, std::slice::from_ref(report))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }
}

/// Headline numbers of one experiment, used as a sweep aggregate row.
type Summary = Vec<(String, Field)>;

fn push(summary: &mut Summary, record: &impl Tabular) {
    summary.extend(record.header().into_iter().zip(record.fields()));
}

fn finite_theta(theta: &Theta) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(CliError::Io("non-finite".into()))
    }
}

/// Runs the configured experiment and writes its artifacts and manifest
/// into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    match &cfg.experiment.sweep {
        Some(s) if cfg.experiment.kind == ExperimentKind::Sweep => {
            sweep(cfg, &s.param, &s.values, out_dir)
        }
        _ => {
            let started = now_ms();
            let mut art = Artifacts::new(out_dir, "")?;
            write_config(cfg, &mut art)?;
            execute(cfg, cfg.experiment.kind, &mut art)?;
            finish(cfg, cfg.experiment.kind, art, started, out_dir)
        }
    }
}

/// One sub-run per value of the numeric field at `param_path`, each with
/// seed `derive_seed(seed, index)`, plus an aggregate `sweep.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    param_path: &str,
    values: &[f64],
    out_dir: &Path,
) -> Result<RunManifest> {
    if values.is_empty() {
        return Err(CliError::validation(
            "experiment.sweep_values",
            "must not be empty",
        ));
    }
    let inner = match &cfg.experiment.sweep {
        Some(s) => s.kind,
        None => cfg.experiment.kind,
    };
    let spec = SweepSpec {
        param: param_path.to_string(),
        values: values.to_vec(),
        kind: inner,
    };
    let points = (0..values.len())
        .map(|i| sweep_point(cfg, &spec, i))
        .collect::<Result<Vec<_>>>()?;

    let started = now_ms();
    let mut art = Artifacts::new(out_dir, "")?;
    write_config(cfg, &mut art)?;
    let results = points
        .par_iter()
        .enumerate()
        .map(|(i, point)| {
            let name = format!("point_{i:04}");
            let mut sub = Artifacts::new(&out_dir.join(&name), &format!("{name}/"))?;
            let summary = execute(point, inner, &mut sub)?;
            Ok((summary, sub.files))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(values.len());
    for (i, ((summary, files), point)) in results.into_iter().zip(&points).enumerate() {
        let mut columns = vec![
            ("index".to_string(), Field::Int(i as u64)),
            ("value".to_string(), Field::Float(values[i])),
            ("seed".to_string(), Field::Int(point.experiment.seed)),
        ];
        columns.extend(summary);
        rows.push(Record { columns });
        art.files.extend(files);
    }
    art.table("sweep", &rows)?;
    finish(cfg, ExperimentKind::Sweep, art, started, out_dir)
}

fn write_config(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    art.json("config.json", &cfg.raw)
}

fn finish(
    cfg: &ExperimentConfig,
    kind: ExperimentKind,
    art: Artifacts,
    started: u64,
    out_dir: &Path,
) -> Result<RunManifest> {
    let mut outputs = art.files;
    outputs.sort();
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.experiment.seed,
        kind: kind.as_str().to_string(),
        outputs,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

fn execute(cfg: &ExperimentConfig, kind: ExperimentKind, art: &mut Artifacts) -> Result<Summary> {
    match kind {
        ExperimentKind::Run => run_steps(cfg, art),
        ExperimentKind::Decompose => run_decompose(cfg, art),
        ExperimentKind::Inequality => run_inequality(cfg, art),
        ExperimentKind::Slop => run_slop(cfg, art),
        ExperimentKind::Representation => run_representation(cfg, art),
        ExperimentKind::Kappa => run_kappa(cfg, art),
        ExperimentKind::Sweep => Err(CliError::validation(
            "experiment.sweep_kind",
            "sweeps do not nest",
        )),
    }
}

fn stream(cfg: &ExperimentConfig, name: &str) -> Stream {
    Stream::new(cfg.experiment.seed).named(name)
}

fn replicas(cfg: &ExperimentConfig) -> usize {
    cfg.experiment.replicas.expect("validated replicas")
}

fn run_steps(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let e = &cfg.experiment;
    let b = &cfg.battery;
    let mut rng = stream(cfg, "run");
    let mut theta = cfg.theta0.clone();
    let mut vspec = cfg.verifier.clone();
    let f_initial = capability_exact(b, &theta)?;
    let mut rows = Vec::new();
    let mut consumed = 0;
    for step in 1..=e.steps.expect("validated steps") as u64 {
        let (next, rec) = gvu_step(b, &theta, e.n, &vspec, &cfg.updater, &mut rng)?;
        decay_verifier(&mut vspec, rec.step_norm);
        theta = next;
        consumed += rec.consumed;
        rows.push(StepRow {
            step,
            consumed,
            f: capability_exact(b, &theta)?,
            potential_mean: rec.potential_mean,
            potential_std: rec.potential_std,
            potential_min: rec.potential_min,
            potential_max: rec.potential_max,
            step_norm: rec.step_norm,
            ghat_norm: rec.ghat_norm(),
            max_weight: rec.max_weight(),
            converged: rec.converged,
        });
    }
    art.table("run", &rows)?;
    finite_theta(&theta)?;
    art.json("final_theta.json", &theta)?;
    let last = rows.last().expect("at least one step");
    Ok(vec![
        ("f_initial".into(), Field::Float(f_initial)),
        ("f_final".into(), Field::Float(last.f)),
        ("consumed".into(), Field::Int(last.consumed)),
    ])
}

fn run_decompose(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let d = decompose(
        &cfg.battery,
        &cfg.theta0,
        &cfg.verifier,
        cfg.experiment.n,
        replicas(cfg),
        &mut stream(cfg, "decompose"),
    )?;
    art.report("decomposition", &d.report)?;
    let stats = Record {
        columns: vec![("rho_stderr".into(), Field::Float(d.rho_stderr))],
    };
    art.table("decomposition_stats", std::slice::from_ref(&stats))?;
    let mut summary = Summary::new();
    push(&mut summary, &d.report);
    push(&mut summary, &stats);
    Ok(summary)
}

fn run_inequality(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let e = &cfg.experiment;
    let (b, theta) = (&cfg.battery, &cfg.theta0);
    let d = decompose(
        b,
        theta,
        &cfg.verifier,
        e.n,
        replicas(cfg),
        &mut stream(cfg, "decompose"),
    )?;
    let l = match e.curvature {
        Some(l) => l,
        None => estimate_curvature(
            b,
            theta,
            e.curvature_probes,
            e.curvature_radius,
            &mut stream(cfg, "curvature"),
        )?,
    };
    let r = &d.report;
    let ineq = check_inequality(
        r.rho,
        r.g_star_norm2,
        r.sigma_g2,
        r.sigma_v2,
        l,
        cfg.updater.eta,
    );
    let gain = measure_gain(
        b,
        theta,
        &cfg.verifier,
        &cfg.updater,
        e.n,
        replicas(cfg),
        &mut stream(cfg, "gain"),
    )?;
    art.report("decomposition", &d.report)?;
    art.report("inequality", &ineq)?;
    art.report("gain", &gain)?;
    let mut summary = vec![("eta".to_string(), Field::Float(cfg.updater.eta))];
    push(&mut summary, &ineq);
    summary.push(("gain_mean".into(), Field::Float(gain.mean)));
    summary.push(("gain_stderr".into(), Field::Float(gain.stderr)));
    summary.push(("rho".into(), Field::Float(r.rho)));
    summary.push(("sigma_v2".into(), Field::Float(r.sigma_v2)));
    Ok(summary)
}

fn run_slop(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let e = &cfg.experiment;
    let r = slop(
        &cfg.battery,
        &cfg.theta0,
        &cfg.verifier,
        e.alpha.expect("validated alpha"),
        e.beta_q.expect("validated beta_q"),
        e.n,
        &mut stream(cfg, "slop"),
    )?;
    art.report("slop", &r)?;
    let mut summary = Summary::new();
    push(&mut summary, &r);
    Ok(summary)
}

fn run_representation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let e = &cfg.experiment;
    let (b, theta) = (&cfg.battery, &cfg.theta0);
    let d = decompose(
        b,
        theta,
        &cfg.verifier,
        e.n,
        replicas(cfg),
        &mut stream(cfg, "decompose"),
    )?;
    let phi = implied_potential(b, theta, &d.mean_update, DEFAULT_DAMPING)?;
    let back = reconstruct_field(b, theta, &phi)?;
    let error = back.sub(&d.mean_update).max_abs();
    let rows: Vec<PotentialRow> = b
        .interactions()
        .zip(&phi)
        .map(|(i, &potential)| {
            Ok(PotentialRow {
                task: i.task as u64,
                output: i.output as u64,
                prompt_id: b.task(i.task).prompt_id.clone(),
                score: external_score(b, i)?,
                potential,
            })
        })
        .collect::<Result<_>>()?;
    art.table("implied_potential", &rows)?;
    let mut columns = vec![
        (
            "mean_update_norm".to_string(),
            Field::Float(d.mean_update.norm()),
        ),
        ("reconstruction_error".to_string(), Field::Float(error)),
    ];
    if let Some(c) = e.const_value {
        let probe = necessity_probe(
            b,
            theta,
            c,
            e.n,
            replicas(cfg),
            &mut stream(cfg, "necessity"),
        )?;
        art.report("necessity", &probe)?;
        columns.push(("necessity_mean_norm".into(), Field::Float(probe.mean_norm)));
        columns.push(("necessity_stderr".into(), Field::Float(probe.stderr)));
    }
    let record = Record { columns };
    art.report("representation", &record)?;
    Ok(record.columns)
}

fn run_kappa(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Summary> {
    let e = &cfg.experiment;
    let traj = run_trajectory(
        &cfg.battery,
        &cfg.theta0,
        &cfg.verifier,
        &cfg.updater,
        e.n,
        e.budget.expect("validated budget"),
        e.checkpoint_every.expect("validated checkpoint_every"),
        &mut stream(cfg, "kappa"),
    )?;
    art.table("trajectory", &TrajectoryRow::from_trajectory(&traj))?;
    for c in &traj.checkpoints {
        finite_theta(&c.theta)?;
    }
    art.json("trajectory.json", &traj)?;
    let first = traj.checkpoints.first().expect("initial checkpoint");
    let last = traj.checkpoints.last().expect("initial checkpoint");
    let summary = KappaSummary {
        kappa_hat: kappa_hat(&traj)?,
        consumed: traj.consumed_final(),
        f_initial: first.f,
        f_final: last.f,
        checkpoints: traj.checkpoints.len() as u64,
        overflow: traj.terminated_by_overflow(),
    };
    art.report("kappa", &summary)?;
    if let Some(w) = e.window {
        art.table("kappa_curve", &kappa_curve(&traj, w)?)?;
    }
    let mut out = Summary::new();
    push(&mut out, &summary);
    Ok(out)
}
