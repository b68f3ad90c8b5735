//! Bit-stable CSV and JSON emission.
//!
//! Every report is flattened into named [`Field`]s in a fixed order. Floats
//! are written in scientific notation with 17 significant digits, which
//! round-trips every finite `f64`; non-finite values are refused. Output is
//! newline-terminated.

use std::io::Write;

use gvu_core::diagnostics::{DecompositionReport, InequalityReport, SlopReport, SnrThreshold};
use gvu_core::kappa::{CheckpointFlag, KappaPoint, Trajectory};
use gvu_core::representation::NecessityReport;
use gvu_core::stats::Estimate;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Float(f64),
    Int(u64),
    Bool(bool),
    Text(String),
}

impl Field {
    fn render(&self) -> Result<String> {
        match self {
            Field::Float(x) if !x.is_finite() => Err(CliError::Io("non-finite".into())),
            Field::Float(x) => Ok(format!("{x:.16e}")),
            Field::Int(v) => Ok(v.to_string()),
            Field::Bool(b) => Ok(b.to_string()),
            Field::Text(s) => Ok(s.clone()),
        }
    }

    fn render_json(&self) -> Result<String> {
        match self {
            Field::Text(s) => Ok(serde_json::to_string(s).expect("strings serialize")),
            other => other.render(),
        }
    }

    /// Recovers a field from its rendered text. Unambiguous for emitted
    /// values: floats always carry a `.` and an exponent, integers never do.
    pub fn infer(text: &str) -> Field {
        match text {
            "true" => Field::Bool(true),
            "false" => Field::Bool(false),
            _ => {
                if let Ok(v) = text.parse::<u64>() {
                    Field::Int(v)
                } else if let Ok(x) = text.parse::<f64>() {
                    Field::Float(x)
                } else {
                    Field::Text(text.to_string())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// A record with a fixed column schema.
pub trait Tabular: Sized {
    fn header(&self) -> Vec<String>;
    fn fields(&self) -> Vec<Field>;
    fn from_fields(row: &Row) -> Result<Self>;
}

/// One parsed CSV row with by-name access.
pub struct Row<'a> {
    pub header: &'a [String],
    pub values: &'a [String],
}

impl Row<'_> {
    pub fn text(&self, name: &str) -> Result<&str> {
        self.header
            .iter()
            .position(|h| h == name)
            .and_then(|i| self.values.get(i))
            .map(String::as_str)
            .ok_or_else(|| CliError::Io(format!("missing column `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let t = self.text(name)?;
        t.parse()
            .map_err(|_| CliError::Io(format!("column `{name}`: `{t}` is not a number")))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let t = self.text(name)?;
        t.parse()
            .map_err(|_| CliError::Io(format!("column `{name}`: `{t}` is not an integer")))
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        let t = self.text(name)?;
        t.parse()
            .map_err(|_| CliError::Io(format!("column `{name}`: `{t}` is not a boolean")))
    }
}

fn names(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Writes one report.
pub fn emit<T: Tabular, W: Write>(report: &T, format: Format, sink: &mut W) -> Result<()> {
    let text = match format {
        Format::Csv => render_csv(std::slice::from_ref(report))?,
        Format::Json => render_json_object(report)? + "\n",
    };
    sink.write_all(text.as_bytes())?;
    Ok(())
}

/// Writes a table of reports sharing one schema.
pub fn emit_rows<T: Tabular, W: Write>(rows: &[T], format: Format, sink: &mut W) -> Result<()> {
    let text = match format {
        Format::Csv => render_csv(rows)?,
        Format::Json => {
            let objects = rows
                .iter()
                .map(render_json_object)
                .collect::<Result<Vec<_>>>()?;
            if objects.is_empty() {
                "[]\n".to_string()
            } else {
                format!("[\n{}\n]\n", objects.join(",\n"))
            }
        }
    };
    sink.write_all(text.as_bytes())?;
    Ok(())
}

/// Renders into memory so that a refused value leaves the sink untouched.
pub fn render<T: Tabular>(rows: &[T], format: Format) -> Result<String> {
    let mut out = Vec::new();
    emit_rows(rows, format, &mut out)?;
    Ok(String::from_utf8(out).expect("emitted text is UTF-8"))
}

fn render_csv<T: Tabular>(rows: &[T]) -> Result<String> {
    let Some(first) = rows.first() else {
        return Err(CliError::Io("nothing to emit".into()));
    };
    let header = first.header();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(&header)
        .map_err(|e| CliError::Io(e.to_string()))?;
    for row in rows {
        if row.header() != header {
            return Err(CliError::Io("rows do not share a schema".into()));
        }
        let cells = row
            .fields()
            .iter()
            .map(Field::render)
            .collect::<Result<Vec<_>>>()?;
        w.write_record(&cells)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("emitted text is UTF-8"))
}

fn render_json_object<T: Tabular>(report: &T) -> Result<String> {
    let parts = report
        .header()
        .iter()
        .zip(report.fields())
        .map(|(k, f)| {
            Ok(format!(
                "  {}: {}",
                serde_json::to_string(k).expect("keys serialize"),
                f.render_json()?
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(format!("{{\n{}\n}}", parts.join(",\n")))
}

/// Parses emitted CSV back into records.
pub fn parse_csv<T: Tabular>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Io(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
            let values: Vec<String> = rec.iter().map(str::to_string).collect();
            T::from_fields(&Row {
                header: &header,
                values: &values,
            })
        })
        .collect()
}

/// Schema-free row, used for sweep aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub columns: Vec<(String, Field)>,
}

impl Record {
    pub fn get(&self, name: &str) -> Option<&Field> {
        self.columns.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }
}

impl Tabular for Record {
    fn header(&self) -> Vec<String> {
        self.columns.iter().map(|(k, _)| k.clone()).collect()
    }

    fn fields(&self) -> Vec<Field> {
        self.columns.iter().map(|(_, v)| v.clone()).collect()
    }

    fn from_fields(row: &Row) -> Result<Self> {
        Ok(Self {
            columns: row
                .header
                .iter()
                .zip(row.values)
                .map(|(k, v)| (k.clone(), Field::infer(v)))
                .collect(),
        })
    }
}

pub const DECOMPOSITION_HEADER: &str =
    "rho,sigma_g2,sigma_v2,bias_norm,g_star_norm2,snr_g,snr_v,fisher_angle,replicas";

impl Tabular for DecompositionReport {
    fn header(&self) -> Vec<String> {
        names(&DECOMPOSITION_HEADER.split(',').collect::<Vec<_>>())
    }

    fn fields(&self) -> Vec<Field> {
        use Field::Float as F;
        vec![
            F(self.rho),
            F(self.sigma_g2),
            F(self.sigma_v2),
            F(self.bias_norm),
            F(self.g_star_norm2),
            F(self.snr_g),
            F(self.snr_v),
            F(self.fisher_angle),
            Field::Int(self.replicas),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            rho: r.f64("rho")?,
            sigma_g2: r.f64("sigma_g2")?,
            sigma_v2: r.f64("sigma_v2")?,
            bias_norm: r.f64("bias_norm")?,
            g_star_norm2: r.f64("g_star_norm2")?,
            snr_g: r.f64("snr_g")?,
            snr_v: r.f64("snr_v")?,
            fisher_angle: r.f64("fisher_angle")?,
            replicas: r.u64("replicas")?,
        })
    }
}

fn snr_field(s: SnrThreshold) -> Field {
    match s {
        SnrThreshold::Value(x) => Field::Float(x),
        SnrThreshold::Unattainable => Field::Text("unattainable".into()),
    }
}

fn snr_parse(r: &Row, name: &str) -> Result<SnrThreshold> {
    match r.text(name)? {
        "unattainable" => Ok(SnrThreshold::Unattainable),
        _ => r.f64(name).map(SnrThreshold::Value),
    }
}

impl Tabular for InequalityReport {
    fn header(&self) -> Vec<String> {
        names(&[
            "lhs",
            "rhs",
            "holds",
            "eta_max",
            "snr_v_star",
            "L",
            "gain_bound",
        ])
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Float(self.lhs),
            Field::Float(self.rhs),
            Field::Bool(self.holds),
            Field::Float(self.eta_max),
            snr_field(self.snr_v_star),
            Field::Float(self.curvature),
            Field::Float(self.gain_bound),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            lhs: r.f64("lhs")?,
            rhs: r.f64("rhs")?,
            holds: r.bool("holds")?,
            eta_max: r.f64("eta_max")?,
            snr_v_star: snr_parse(r, "snr_v_star")?,
            curvature: r.f64("L")?,
            gain_bound: r.f64("gain_bound")?,
        })
    }
}

impl Tabular for SlopReport {
    fn header(&self) -> Vec<String> {
        names(&["v_hi", "s_lo", "slop_mass", "alpha", "beta_q", "n"])
    }

    fn fields(&self) -> Vec<Field> {
        use Field::Float as F;
        vec![
            F(self.v_hi),
            F(self.s_lo),
            F(self.slop_mass),
            F(self.alpha),
            F(self.beta_q),
            Field::Int(self.n),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            v_hi: r.f64("v_hi")?,
            s_lo: r.f64("s_lo")?,
            slop_mass: r.f64("slop_mass")?,
            alpha: r.f64("alpha")?,
            beta_q: r.f64("beta_q")?,
            n: r.u64("n")?,
        })
    }
}

impl Tabular for NecessityReport {
    fn header(&self) -> Vec<String> {
        names(&["mean_norm", "stderr", "replicas"])
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Float(self.mean_norm),
            Field::Float(self.stderr),
            Field::Int(self.replicas),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            mean_norm: r.f64("mean_norm")?,
            stderr: r.f64("stderr")?,
            replicas: r.u64("replicas")?,
        })
    }
}

impl Tabular for KappaPoint {
    fn header(&self) -> Vec<String> {
        names(&["consumed", "span", "kappa"])
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Float(self.consumed),
            Field::Int(self.span),
            Field::Float(self.kappa),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            consumed: r.f64("consumed")?,
            span: r.u64("span")?,
            kappa: r.f64("kappa")?,
        })
    }
}

impl Tabular for Estimate {
    fn header(&self) -> Vec<String> {
        names(&["mean", "stderr"])
    }

    fn fields(&self) -> Vec<Field> {
        vec![Field::Float(self.mean), Field::Float(self.stderr)]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            mean: r.f64("mean")?,
            stderr: r.f64("stderr")?,
        })
    }
}

/// One checkpoint of a trajectory, as a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub consumed: u64,
    pub f: f64,
    pub strict_rate: f64,
    /// `(label, capability)` per family, in battery order.
    pub families: Vec<(String, f64)>,
    pub flags: Vec<CheckpointFlag>,
}

impl TrajectoryRow {
    pub fn from_trajectory(traj: &Trajectory) -> Vec<Self> {
        traj.checkpoints
            .iter()
            .map(|c| Self {
                consumed: c.consumed,
                f: c.f,
                strict_rate: c.strict_rate,
                families: traj
                    .family_labels
                    .iter()
                    .cloned()
                    .zip(c.family_f.iter().copied())
                    .collect(),
                flags: c.flags.clone(),
            })
            .collect()
    }
}

const FAMILY_PREFIX: &str = "family:";

fn parse_flag(s: &str) -> Result<CheckpointFlag> {
    [CheckpointFlag::Overflow, CheckpointFlag::NonConverged]
        .into_iter()
        .find(|f| f.as_str() == s)
        .ok_or_else(|| CliError::Io(format!("unknown checkpoint flag `{s}`")))
}

impl Tabular for TrajectoryRow {
    fn header(&self) -> Vec<String> {
        let mut h = names(&["consumed", "F", "strict_rate"]);
        h.extend(
            self.families
                .iter()
                .map(|(l, _)| format!("{FAMILY_PREFIX}{l}")),
        );
        h.push("flags".into());
        h
    }

    fn fields(&self) -> Vec<Field> {
        let mut v = vec![
            Field::Int(self.consumed),
            Field::Float(self.f),
            Field::Float(self.strict_rate),
        ];
        v.extend(self.families.iter().map(|(_, x)| Field::Float(*x)));
        let flags: Vec<&str> = self.flags.iter().map(|f| f.as_str()).collect();
        v.push(Field::Text(flags.join(";")));
        v
    }

    fn from_fields(r: &Row) -> Result<Self> {
        let families = r
            .header
            .iter()
            .filter_map(|h| h.strip_prefix(FAMILY_PREFIX))
            .map(|label| {
                Ok((
                    label.to_string(),
                    r.f64(&format!("{FAMILY_PREFIX}{label}"))?,
                ))
            })
            .collect::<Result<_>>()?;
        let flags = match r.text("flags")? {
            "" => Vec::new(),
            s => s.split(';').map(parse_flag).collect::<Result<_>>()?,
        };
        Ok(Self {
            consumed: r.u64("consumed")?,
            f: r.f64("F")?,
            strict_rate: r.f64("strict_rate")?,
            families,
            flags,
        })
    }
}

/// Headline numbers of a κ run.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaSummary {
    pub kappa_hat: f64,
    pub consumed: u64,
    pub f_initial: f64,
    pub f_final: f64,
    pub checkpoints: u64,
    pub overflow: bool,
}

impl Tabular for KappaSummary {
    fn header(&self) -> Vec<String> {
        names(&[
            "kappa_hat",
            "consumed",
            "f_initial",
            "f_final",
            "checkpoints",
            "overflow",
        ])
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Float(self.kappa_hat),
            Field::Int(self.consumed),
            Field::Float(self.f_initial),
            Field::Float(self.f_final),
            Field::Int(self.checkpoints),
            Field::Bool(self.overflow),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            kappa_hat: r.f64("kappa_hat")?,
            consumed: r.u64("consumed")?,
            f_initial: r.f64("f_initial")?,
            f_final: r.f64("f_final")?,
            checkpoints: r.u64("checkpoints")?,
            overflow: r.bool("overflow")?,
        })
    }
}

/// One GVU step of a `run` experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub consumed: u64,
    pub f: f64,
    pub potential_mean: f64,
    pub potential_std: f64,
    pub potential_min: f64,
    pub potential_max: f64,
    pub step_norm: f64,
    pub ghat_norm: f64,
    pub max_weight: f64,
    pub converged: bool,
}

impl Tabular for StepRow {
    fn header(&self) -> Vec<String> {
        names(&[
            "step",
            "consumed",
            "F",
            "potential_mean",
            "potential_std",
            "potential_min",
            "potential_max",
            "step_norm",
            "ghat_norm",
            "max_weight",
            "converged",
        ])
    }

    fn fields(&self) -> Vec<Field> {
        use Field::Float as F;
        vec![
            Field::Int(self.step),
            Field::Int(self.consumed),
            F(self.f),
            F(self.potential_mean),
            F(self.potential_std),
            F(self.potential_min),
            F(self.potential_max),
            F(self.step_norm),
            F(self.ghat_norm),
            F(self.max_weight),
            Field::Bool(self.converged),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            step: r.u64("step")?,
            consumed: r.u64("consumed")?,
            f: r.f64("F")?,
            potential_mean: r.f64("potential_mean")?,
            potential_std: r.f64("potential_std")?,
            potential_min: r.f64("potential_min")?,
            potential_max: r.f64("potential_max")?,
            step_norm: r.f64("step_norm")?,
            ghat_norm: r.f64("ghat_norm")?,
            max_weight: r.f64("max_weight")?,
            converged: r.bool("converged")?,
        })
    }
}

/// Implied potential of one interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialRow {
    pub task: u64,
    pub output: u64,
    pub prompt_id: String,
    pub score: f64,
    pub potential: f64,
}

impl Tabular for PotentialRow {
    fn header(&self) -> Vec<String> {
        names(&["task", "output", "prompt_id", "score", "potential"])
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Int(self.task),
            Field::Int(self.output),
            Field::Text(self.prompt_id.clone()),
            Field::Float(self.score),
            Field::Float(self.potential),
        ]
    }

    fn from_fields(r: &Row) -> Result<Self> {
        Ok(Self {
            task: r.u64("task")?,
            output: r.u64("output")?,
            prompt_id: r.text("prompt_id")?.to_string(),
            score: r.f64("score")?,
            potential: r.f64("potential")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> DecompositionReport {
        DecompositionReport {
            rho: 0.1 + 0.2,
            sigma_g2: 1.0 / 3.0,
            sigma_v2: 0.0,
            bias_norm: 1e-300,
            g_star_norm2: 123456.789,
            snr_g: f64::MAX,
            snr_v: f64::MIN_POSITIVE,
            fisher_angle: std::f64::consts::FRAC_PI_2,
            replicas: 10_000,
        }
    }

    #[test]
    fn decomposition_header_is_fixed() {
        let text = render(&[report()], Format::Csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), DECOMPOSITION_HEADER);
        assert!(text.ends_with('\n'));
        assert_eq!(text, render(&[report()], Format::Csv).unwrap());
    }

    #[test]
    fn floats_carry_17_significant_digits() {
        let text = render(&[report()], Format::Csv).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert!(row.starts_with("3.0000000000000004e-1,"), "{row}");
    }

    #[test]
    fn non_finite_values_are_refused() {
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let mut r = report();
            r.bias_norm = bad;
            for format in [Format::Csv, Format::Json] {
                let mut sink = Vec::new();
                assert_eq!(
                    emit(&r, format, &mut sink),
                    Err(CliError::Io("non-finite".into()))
                );
                assert!(sink.is_empty());
            }
        }
    }

    #[test]
    fn csv_round_trips() {
        let text = render(&[report()], Format::Csv).unwrap();
        assert_eq!(
            parse_csv::<DecompositionReport>(&text).unwrap(),
            vec![report()]
        );

        let rows = vec![
            TrajectoryRow {
                consumed: 0,
                f: 0.25,
                strict_rate: 0.0,
                families: vec![("math, hard".into(), 0.125), ("code".into(), 1.0 / 7.0)],
                flags: vec![],
            },
            TrajectoryRow {
                consumed: 40,
                f: 0.5,
                strict_rate: 1.0,
                families: vec![("math, hard".into(), 0.5), ("code".into(), 0.5)],
                flags: vec![CheckpointFlag::NonConverged, CheckpointFlag::Overflow],
            },
        ];
        let text = render(&rows, Format::Csv).unwrap();
        assert!(
            text.starts_with("consumed,F,strict_rate,\"family:math, hard\",family:code,flags\n")
        );
        assert_eq!(parse_csv::<TrajectoryRow>(&text).unwrap(), rows);
    }

    #[test]
    fn json_is_valid_and_ordered() {
        let text = render(&[report()], Format::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v[0]["replicas"], 10_000);
        let mut sink = Vec::new();
        emit(&report(), Format::Json, &mut sink).unwrap();
        let single = String::from_utf8(sink).unwrap();
        assert!(single.starts_with("{\n  \"rho\": "));
        let back: DecompositionReport = serde_json::from_str(&single).unwrap();
        assert_eq!(back, report());
    }

    #[test]
    fn inference_matches_rendering() {
        let rec = Record {
            columns: vec![
                ("a".into(), Field::Float(2.0)),
                ("b".into(), Field::Int(2)),
                ("c".into(), Field::Bool(false)),
                ("d".into(), Field::Text("unattainable".into())),
            ],
        };
        let text = render(std::slice::from_ref(&rec), Format::Csv).unwrap();
        assert_eq!(parse_csv::<Record>(&text).unwrap(), vec![rec]);
    }
}
