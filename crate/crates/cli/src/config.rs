//! Experiment configuration: parsing, eager validation and dot-path edits.
//!
//! A config is one JSON object with five sections:
//!
//! ```json
//! {
//!   "battery": {"tasks": [...], "weights": [...]},
//!   "theta0": "zeros",
//!   "verifier": {"kind": "oracle", "beta": 1.0},
//!   "updater": {"mode": "reinforce", "eta": 0.1},
//!   "experiment": {"kind": "decompose", "n": 16, "replicas": 1000, "seed": 7}
//! }
//! ```
//!
//! `battery` may also be a path, resolved against the config file's
//! directory and inlined before hashing. `theta0` is `"zeros"` (the default
//! when absent), `{"logits": [[...]]}` or `{"uniform": {"c": .., "seed": ..}}`.
//! The seed, step size, temperature and batch size never have defaults.

use std::fs;
use std::path::Path;

use gvu_core::diagnostics::MIN_REPLICAS;
use gvu_core::gvu::{UpdateMode, LOGIT_LIMIT};
use gvu_core::manifold::Policy;
use gvu_core::representation::MIN_PROBE_REPLICAS;
use gvu_core::{Battery, BatteryDescription, Error, Stream, Theta, UpdaterSpec, VerifierSpec};
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result};

const SECTIONS: &[&str] = &["battery", "theta0", "verifier", "updater", "experiment"];

const EXPERIMENT_KEYS: &[&str] = &[
    "kind",
    "n",
    "replicas",
    "budget",
    "checkpoint_every",
    "seed",
    "sweep_param",
    "sweep_values",
    "sweep_kind",
    "steps",
    "window",
    "alpha",
    "beta_q",
    "const_value",
    "curvature",
    "curvature_probes",
    "curvature_radius",
];

/// Probes used by the curvature estimate when `curvature` is not given.
pub const DEFAULT_CURVATURE_PROBES: usize = 64;
pub const DEFAULT_CURVATURE_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Run,
    Sweep,
    Decompose,
    Inequality,
    Slop,
    Representation,
    Kappa,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Run,
        Self::Sweep,
        Self::Decompose,
        Self::Inequality,
        Self::Slop,
        Self::Representation,
        Self::Kappa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Sweep => "sweep",
            Self::Decompose => "decompose",
            Self::Inequality => "inequality",
            Self::Slop => "slop",
            Self::Representation => "representation",
            Self::Kappa => "kappa",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Dot-path of a numeric config field, e.g. `updater.eta`.
    pub param: String,
    pub values: Vec<f64>,
    /// Experiment run at every sweep point.
    pub kind: ExperimentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Batch size `N`.
    pub n: usize,
    pub seed: u64,
    pub replicas: Option<usize>,
    pub budget: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub steps: Option<usize>,
    pub window: Option<usize>,
    pub alpha: Option<f64>,
    pub beta_q: Option<f64>,
    pub const_value: Option<f64>,
    /// Explicit curvature bound; estimated at `theta0` when absent.
    pub curvature: Option<f64>,
    pub curvature_probes: usize,
    pub curvature_radius: f64,
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub battery: Battery,
    pub theta0: Theta,
    pub verifier: VerifierSpec,
    pub updater: UpdaterSpec,
    pub experiment: ExperimentSpec,
    /// The config with the battery inlined and overrides applied.
    pub raw: Value,
}

impl ExperimentConfig {
    /// Sorted-key compact JSON of `raw`, the input to the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.raw).expect("config JSON serializes")
    }
}

/// Edits applied to the raw config before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub kind: Option<ExperimentKind>,
}

/// Reads, overrides and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with(path, &Overrides::default())
}

pub fn parse_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut raw = parse_json(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    inline_battery(&mut raw, base)?;
    apply_overrides(&mut raw, overrides)?;
    from_value(raw)
}

/// Parses JSON text, reporting the position of syntax errors.
pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn inline_battery(raw: &mut Value, base: &Path) -> Result<()> {
    let Some(Value::String(rel)) = raw.get("battery") else {
        return Ok(());
    };
    let path = base.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::validation("battery", format!("cannot read {}: {e}", path.display()))
    })?;
    raw["battery"] = parse_json(&text)?;
    Ok(())
}

fn apply_overrides(raw: &mut Value, overrides: &Overrides) -> Result<()> {
    if overrides.seed.is_none() && overrides.kind.is_none() {
        return Ok(());
    }
    let exp = raw
        .as_object_mut()
        .ok_or_else(|| CliError::validation("config", "expected a JSON object"))?
        .entry("experiment")
        .or_insert_with(|| json!({}));
    let exp = exp
        .as_object_mut()
        .ok_or_else(|| CliError::validation("experiment", "expected a JSON object"))?;
    if let Some(seed) = overrides.seed {
        exp.insert("seed".into(), json!(seed));
    }
    if let Some(kind) = overrides.kind {
        exp.insert("kind".into(), json!(kind.as_str()));
    }
    Ok(())
}

/// Validates a config whose battery is already inline.
pub fn from_value(raw: Value) -> Result<ExperimentConfig> {
    let obj = raw
        .as_object()
        .ok_or_else(|| CliError::validation("config", "expected a JSON object"))?;
    reject_unknown(obj, SECTIONS, "")?;

    let bval = obj
        .get("battery")
        .ok_or_else(|| CliError::validation("battery", "missing"))?;
    let desc: BatteryDescription = serde_json::from_value(bval.clone())
        .map_err(|e| CliError::validation("battery", e.to_string()))?;
    let battery =
        Battery::new(&desc).map_err(|e| CliError::validation("battery", e.to_string()))?;

    let theta0 = parse_theta0(obj.get("theta0"), &battery)?;
    let verifier = parse_verifier(obj.get("verifier"), &battery)?;
    let updater = parse_updater(obj.get("updater"))?;
    let experiment = parse_experiment(obj.get("experiment"))?;
    let cfg = ExperimentConfig {
        battery,
        theta0,
        verifier,
        updater,
        experiment,
        raw,
    };
    check_kind(&cfg, cfg.experiment.kind)?;
    Ok(cfg)
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str], prefix: &str) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(CliError::validation(
            format!("{prefix}{k}"),
            "unknown field",
        )),
        None => Ok(()),
    }
}

fn parse_theta0(v: Option<&Value>, b: &Battery) -> Result<Theta> {
    let bad = |field: &str, msg: String| CliError::validation(field, msg);
    let theta = match v {
        None => Theta::zeros(b),
        Some(Value::String(s)) if s == "zeros" => Theta::zeros(b),
        Some(Value::Object(m)) if m.contains_key("uniform") => {
            reject_unknown(m, &["uniform"], "theta0.")?;
            let u = m["uniform"]
                .as_object()
                .ok_or_else(|| bad("theta0.uniform", "expected an object".into()))?;
            reject_unknown(u, &["c", "seed"], "theta0.uniform.")?;
            let c = u
                .get("c")
                .and_then(Value::as_f64)
                .filter(|c| *c > 0.0 && *c <= LOGIT_LIMIT)
                .ok_or_else(|| {
                    bad(
                        "theta0.uniform.c",
                        format!("required, in (0, {LOGIT_LIMIT}]"),
                    )
                })?;
            let seed = u.get("seed").and_then(Value::as_u64).ok_or_else(|| {
                bad(
                    "theta0.uniform.seed",
                    "required unsigned 64-bit integer".into(),
                )
            })?;
            Theta::uniform(b, c, &mut Stream::new(seed).named("theta0"))
        }
        Some(other @ Value::Object(_)) => {
            let theta: Theta =
                serde_json::from_value(other.clone()).map_err(|e| bad("theta0", e.to_string()))?;
            Policy::new(b, &theta).map_err(|e| bad("theta0", e.to_string()))?;
            theta
        }
        Some(_) => {
            return Err(bad(
                "theta0",
                "expected \"zeros\", {\"logits\": ..} or {\"uniform\": ..}".into(),
            ))
        }
    };
    if theta.as_slice().iter().any(|x| x.abs() > LOGIT_LIMIT) {
        return Err(bad(
            "theta0",
            format!("logits must lie in [-{LOGIT_LIMIT}, {LOGIT_LIMIT}]"),
        ));
    }
    Ok(theta)
}

fn parse_verifier(v: Option<&Value>, b: &Battery) -> Result<VerifierSpec> {
    let v = v.ok_or_else(|| CliError::validation("verifier", "missing"))?;
    let spec = VerifierSpec::from_json(v).map_err(|e| match e {
        Error::UnknownKind(_) => CliError::validation("verifier.kind", e.to_string()),
        Error::MissingParameter(ref f) => {
            CliError::validation(format!("verifier.{f}"), e.to_string())
        }
        other => CliError::validation("verifier", other.to_string()),
    })?;
    if let gvu_core::VerifierKind::Discriminator { reference } = &spec.kind {
        Policy::new(b, reference)
            .map_err(|e| CliError::validation("verifier.ref_theta", e.to_string()))?;
    }
    Ok(spec)
}

fn parse_updater(v: Option<&Value>) -> Result<UpdaterSpec> {
    let obj = v
        .ok_or_else(|| CliError::validation("updater", "missing"))?
        .as_object()
        .ok_or_else(|| CliError::validation("updater", "expected a JSON object"))?;
    reject_unknown(
        obj,
        &["mode", "eta", "lambda", "inner_steps", "inner_tol"],
        "updater.",
    )?;
    let mode = match obj.get("mode").and_then(Value::as_str) {
        Some("reinforce") => UpdateMode::Reinforce,
        Some("argmin") => UpdateMode::Argmin,
        _ => {
            return Err(CliError::validation(
                "updater.mode",
                "expected \"reinforce\" or \"argmin\"",
            ))
        }
    };
    let num = |key: &str| -> Result<Option<f64>> {
        match obj.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| CliError::validation(format!("updater.{key}"), "expected a number")),
        }
    };
    let eta = num("eta")?.ok_or_else(|| CliError::validation("updater.eta", "required"))?;
    let lambda = match (mode, num("lambda")?) {
        (_, Some(l)) => l,
        (UpdateMode::Reinforce, None) => 0.0,
        (UpdateMode::Argmin, None) => {
            return Err(CliError::validation(
                "updater.lambda",
                "required in argmin mode",
            ))
        }
    };
    let inner_steps = match obj.get("inner_steps") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            CliError::validation("updater.inner_steps", "expected an unsigned integer")
        })? as usize),
    };
    let spec = UpdaterSpec {
        mode,
        eta,
        lambda,
        inner_steps,
        inner_tol: num("inner_tol")?,
    };
    spec.validate().map_err(|e| match e {
        Error::MissingParameter(ref f) => {
            CliError::validation(format!("updater.{f}"), e.to_string())
        }
        other => CliError::validation("updater", other.to_string()),
    })?;
    Ok(spec)
}

fn parse_experiment(v: Option<&Value>) -> Result<ExperimentSpec> {
    let obj = v
        .ok_or_else(|| CliError::validation("experiment", "missing"))?
        .as_object()
        .ok_or_else(|| CliError::validation("experiment", "expected a JSON object"))?;
    reject_unknown(obj, EXPERIMENT_KEYS, "experiment.")?;
    let field = |key: &str| format!("experiment.{key}");
    let uint = |key: &str| -> Result<Option<u64>> {
        match obj.get(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| {
                CliError::validation(field(key), "expected an unsigned 64-bit integer")
            }),
        }
    };
    let num = |key: &str| -> Result<Option<f64>> {
        match obj.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| CliError::validation(field(key), "expected a finite number")),
        }
    };
    let kind_of = |key: &str| -> Result<Option<ExperimentKind>> {
        match obj.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .and_then(ExperimentKind::parse)
                .map(Some)
                .ok_or_else(|| CliError::validation(field(key), "unknown experiment kind")),
        }
    };
    let kind =
        kind_of("kind")?.ok_or_else(|| CliError::validation("experiment.kind", "required"))?;
    let seed = uint("seed")?.ok_or_else(|| {
        CliError::validation("experiment.seed", "required; there is no implicit seed")
    })?;
    let n = uint("n")?.ok_or_else(|| CliError::validation("experiment.n", "required"))? as usize;
    if n == 0 {
        return Err(CliError::validation("experiment.n", "must be >= 1"));
    }
    let sweep = if kind == ExperimentKind::Sweep {
        let param = obj
            .get("sweep_param")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::validation("experiment.sweep_param", "required for sweeps"))?
            .to_string();
        let values: Vec<f64> = match obj.get("sweep_values") {
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_f64().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| {
                    CliError::validation("experiment.sweep_values", "expected finite numbers")
                })?,
            _ => {
                return Err(CliError::validation(
                    "experiment.sweep_values",
                    "required for sweeps",
                ))
            }
        };
        if values.is_empty() {
            return Err(CliError::validation(
                "experiment.sweep_values",
                "must not be empty",
            ));
        }
        let inner = kind_of("sweep_kind")?
            .ok_or_else(|| CliError::validation("experiment.sweep_kind", "required for sweeps"))?;
        if inner == ExperimentKind::Sweep {
            return Err(CliError::validation(
                "experiment.sweep_kind",
                "sweeps do not nest",
            ));
        }
        Some(SweepSpec {
            param,
            values,
            kind: inner,
        })
    } else {
        None
    };
    Ok(ExperimentSpec {
        kind,
        n,
        seed,
        replicas: uint("replicas")?.map(|r| r as usize),
        budget: uint("budget")?,
        checkpoint_every: uint("checkpoint_every")?.map(|k| k as usize),
        steps: uint("steps")?.map(|s| s as usize),
        window: uint("window")?.map(|w| w as usize),
        alpha: num("alpha")?,
        beta_q: num("beta_q")?,
        const_value: num("const_value")?,
        curvature: num("curvature")?,
        curvature_probes: uint("curvature_probes")?
            .map_or(DEFAULT_CURVATURE_PROBES, |p| p as usize),
        curvature_radius: num("curvature_radius")?.unwrap_or(DEFAULT_CURVATURE_RADIUS),
        sweep,
    })
}

/// Per-kind requirements, checked before anything runs.
fn check_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    let e = &cfg.experiment;
    let need = |key: &str, present: bool| {
        if present {
            Ok(())
        } else {
            Err(CliError::validation(
                format!("experiment.{key}"),
                format!("required for kind `{}`", kind.as_str()),
            ))
        }
    };
    let replicas_at_least = |min: usize| -> Result<()> {
        need("replicas", e.replicas.is_some())?;
        if e.replicas.unwrap() < min {
            return Err(CliError::validation(
                "experiment.replicas",
                format!("must be >= {min}"),
            ));
        }
        Ok(())
    };
    match kind {
        ExperimentKind::Run => {
            need("steps", e.steps.is_some_and(|s| s >= 1))?;
        }
        ExperimentKind::Decompose => replicas_at_least(MIN_REPLICAS)?,
        ExperimentKind::Inequality => {
            replicas_at_least(MIN_REPLICAS)?;
            if cfg.updater.mode != UpdateMode::Reinforce {
                return Err(CliError::validation(
                    "updater.mode",
                    "the inequality check needs reinforce mode",
                ));
            }
            if let Some(l) = e.curvature {
                if l <= 0.0 {
                    return Err(CliError::validation("experiment.curvature", "must be > 0"));
                }
            } else {
                if e.curvature_probes < 8 {
                    return Err(CliError::validation(
                        "experiment.curvature_probes",
                        "must be >= 8",
                    ));
                }
                if e.curvature_radius <= 0.0 {
                    return Err(CliError::validation(
                        "experiment.curvature_radius",
                        "must be > 0",
                    ));
                }
            }
        }
        ExperimentKind::Slop => {
            for (key, q) in [("alpha", e.alpha), ("beta_q", e.beta_q)] {
                need(key, q.is_some())?;
                if !q.is_some_and(|q| q > 0.0 && q <= 1.0) {
                    return Err(CliError::validation(
                        format!("experiment.{key}"),
                        "must lie in (0, 1]",
                    ));
                }
            }
            if e.n < 100 {
                return Err(CliError::validation("experiment.n", "slop needs n >= 100"));
            }
        }
        ExperimentKind::Representation => {
            let min = if e.const_value.is_some() {
                MIN_PROBE_REPLICAS
            } else {
                MIN_REPLICAS
            };
            replicas_at_least(min)?;
        }
        ExperimentKind::Kappa => {
            need("budget", e.budget.is_some())?;
            need(
                "checkpoint_every",
                e.checkpoint_every.is_some_and(|k| k >= 1),
            )?;
            let budget = e.budget.unwrap();
            if budget < e.n as u64 {
                return Err(CliError::validation(
                    "experiment.budget",
                    "must cover at least one batch",
                ));
            }
            if let Some(w) = e.window {
                let steps = budget / e.n as u64;
                let k = e.checkpoint_every.unwrap() as u64;
                let checkpoints = 1 + steps / k + u64::from(!steps.is_multiple_of(k));
                if w < 2 || w as u64 > checkpoints {
                    return Err(CliError::validation(
                        "experiment.window",
                        format!("must lie in [2, {checkpoints}]"),
                    ));
                }
            }
        }
        ExperimentKind::Sweep => {
            let sweep = e.sweep.as_ref().expect("sweep spec parsed with the kind");
            for index in 0..sweep.values.len() {
                sweep_point(cfg, sweep, index)?;
            }
        }
    }
    Ok(())
}

/// Config for one sweep point: the parameter set, the inner kind selected
/// and the seed derived from the base seed and the point's index.
pub fn sweep_point(
    cfg: &ExperimentConfig,
    sweep: &SweepSpec,
    index: usize,
) -> Result<ExperimentConfig> {
    let mut raw = cfg.raw.clone();
    set_path(&mut raw, &sweep.param, sweep.values[index])?;
    let exp = raw["experiment"]
        .as_object_mut()
        .expect("validated experiment section");
    for key in ["sweep_param", "sweep_values", "sweep_kind"] {
        exp.remove(key);
    }
    exp.insert("kind".into(), json!(sweep.kind.as_str()));
    exp.insert(
        "seed".into(),
        json!(gvu_core::rng::derive_seed(
            cfg.experiment.seed,
            index as u64
        )),
    );
    from_value(raw)
}

/// Replaces the number at a dot-path (`updater.eta`, `battery.weights.0`).
///
/// Integer fields accept only integral values. The seed and the sweep
/// fields themselves are not addressable.
pub fn set_path(root: &mut Value, path: &str, value: f64) -> Result<()> {
    let bad = || CliError::BadParamPath(path.to_string());
    if path.starts_with("experiment.seed") || path.starts_with("experiment.sweep") {
        return Err(bad());
    }
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg),
            Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(bad)?;
    }
    let Value::Number(old) = cur else {
        return Err(bad());
    };
    *cur = if old.is_f64() {
        json!(value)
    } else if value.fract() == 0.0 && value >= 0.0 && value < u64::MAX as f64 {
        json!(value as u64)
    } else {
        return Err(CliError::validation(
            path,
            format!("{value} is not a valid unsigned integer"),
        ));
    };
    Ok(())
}
