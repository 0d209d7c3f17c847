//! Serialization of run reports: versioned CSV tables, JSON reports, and
//! the run manifest that makes every invocation reproducible.
//!
//! Floats are written in Rust's shortest round-trip form (plain decimal in
//! a human-friendly magnitude window, scientific outside it), so files are
//! byte-stable across platforms and thread counts.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::runs::{
    AverageReport, MomentReport, PoissonReport, SimulateReport, ValidationReport, WeakErrorReport,
};

/// Output format selector (`--format`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!(
                "unknown output format {other:?}; expected csv or json"
            ))),
        }
    }
}

impl OutputFormat {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// Shortest round-trip rendering: plain decimal within `[1e-4, 1e7)`,
/// scientific outside, `0` for zero.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let a = v.abs();
    if (1e-4..1e7).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Quotes a CSV field when it contains a delimiter, quote, or newline.
fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn push_row(out: &mut String, fields: &[String]) {
    let mut first = true;
    for f in fields {
        if !first {
            out.push(',');
        }
        out.push_str(&csv_escape(f));
        first = false;
    }
    out.push('\n');
}

/// One rendered CSV table plus its schema tag.
#[derive(Debug, Clone)]
pub struct CsvDoc {
    pub file_name: &'static str,
    pub schema: &'static str,
    pub content: String,
}

pub fn csv_for_weak_error(rep: &WeakErrorReport) -> CsvDoc {
    let mut out = String::from(
        "eps,slow_mean,slow_stderr,limit_mean,limit_stderr,weak_error,weak_stderr\n",
    );
    for r in &rep.rows {
        push_row(
            &mut out,
            &[
                fmt_float(r.eps),
                fmt_float(r.slow_mean),
                fmt_float(r.slow_stderr),
                fmt_float(r.limit_mean),
                fmt_float(r.limit_stderr),
                fmt_float(r.weak_error),
                fmt_float(r.weak_stderr),
            ],
        );
    }
    CsvDoc { file_name: "weak_error.csv", schema: "weak_error.v1", content: out }
}

pub fn csv_for_simulate(rep: &SimulateReport) -> CsvDoc {
    let mut out = String::from("eps,path,t,phi,x_norm,y_norm,x_mode1,y_mode1\n");
    for r in &rep.rows {
        push_row(
            &mut out,
            &[
                fmt_float(r.eps),
                r.path.to_string(),
                fmt_float(r.t),
                fmt_float(r.phi),
                fmt_float(r.x_norm),
                fmt_float(r.y_norm),
                fmt_float(r.x_mode1),
                fmt_float(r.y_mode1),
            ],
        );
    }
    CsvDoc { file_name: "trajectory.csv", schema: "trajectory.v1", content: out }
}

pub fn csv_for_average(rep: &AverageReport) -> CsvDoc {
    let mut out = String::from(
        "state,mode,fbar,fbar_stderr,drift_correction,drift_correction_stderr,\
         sigma_bar_sq_kk,sigma_bar_sq_kk_stderr,upsilon_kk,upsilon_kk_stderr\n",
    );
    for s in &rep.states {
        for k in 0..s.fbar.len() {
            push_row(
                &mut out,
                &[
                    s.state.to_string(),
                    (k + 1).to_string(),
                    fmt_float(s.fbar[k]),
                    fmt_float(s.fbar_stderr[k]),
                    fmt_float(s.drift_correction[k]),
                    fmt_float(s.drift_correction_stderr[k]),
                    fmt_float(s.sigma_bar_sq[k][k]),
                    fmt_float(s.sigma_bar_sq_stderr[k][k]),
                    fmt_float(s.upsilon[k][k]),
                    fmt_float(s.upsilon_stderr[k][k]),
                ],
            );
        }
    }
    CsvDoc {
        file_name: "averaged_coefficients.csv",
        schema: "averaged_coefficients.v1",
        content: out,
    }
}

pub fn csv_for_poisson(rep: &PoissonReport) -> CsvDoc {
    let mut out = String::from("mode,psi,psi_stderr\n");
    for r in &rep.rows {
        push_row(
            &mut out,
            &[r.mode.to_string(), fmt_float(r.psi), fmt_float(r.psi_stderr)],
        );
    }
    CsvDoc { file_name: "poisson_check.csv", schema: "poisson_check.v1", content: out }
}

pub fn csv_for_moment(rep: &MomentReport) -> CsvDoc {
    let mut out =
        String::from("gamma,eps,t,slow_moment,slow_stderr,fast_moment,fast_stderr\n");
    for r in &rep.rows {
        push_row(
            &mut out,
            &[
                fmt_float(r.gamma),
                fmt_float(r.eps),
                fmt_float(r.t),
                fmt_float(r.slow_moment),
                fmt_float(r.slow_stderr),
                fmt_float(r.fast_moment),
                fmt_float(r.fast_stderr),
            ],
        );
    }
    CsvDoc { file_name: "moment_scan.csv", schema: "moment_scan.v1", content: out }
}

pub fn csv_for_validate(rep: &ValidationReport) -> CsvDoc {
    let mut out = String::from("check,status,value,threshold,note\n");
    for i in &rep.items {
        let status = match i.status {
            super::runs::CheckStatus::Pass => "pass",
            super::runs::CheckStatus::Warn => "warn",
            super::runs::CheckStatus::Fail => "fail",
        };
        push_row(
            &mut out,
            &[
                i.check.clone(),
                status.to_string(),
                fmt_float(i.value),
                fmt_float(i.threshold),
                i.note.clone(),
            ],
        );
    }
    CsvDoc { file_name: "validation.csv", schema: "validation.v1", content: out }
}

/// Everything the manifest records about one invocation.
pub struct EmitOptions<'a> {
    pub dir: &'a Path,
    pub subcommand: &'a str,
    pub format: OutputFormat,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub resolved_config: &'a ExperimentConfig,
}

/// Writes the run outputs: the CSV table (or `report.json` under
/// `--format json`) plus `run_manifest.json`. Returns the written paths.
pub fn emit<R: Serialize>(opts: &EmitOptions<'_>, report: &R, csv: CsvDoc) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(opts.dir)?;
    let mut written = Vec::new();
    let report_value = serde_json::to_value(report)?;

    match opts.format {
        OutputFormat::Csv => {
            let path = opts.dir.join(csv.file_name);
            std::fs::write(&path, &csv.content)?;
            written.push(path);
        }
        OutputFormat::Json => {
            let path = opts.dir.join("report.json");
            let mut text = serde_json::to_string_pretty(&report_value)?;
            text.push('\n');
            std::fs::write(&path, text)?;
            written.push(path);
        }
    }

    let outputs: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let manifest = json!({
        "subcommand": opts.subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": opts.seed,
        "threads": opts.threads,
        "format": opts.format.name(),
        "wall_time_seconds": opts.wall_time_seconds,
        "csv_schema": match opts.format {
            OutputFormat::Csv => Some(csv.schema),
            OutputFormat::Json => None,
        },
        "outputs": outputs,
        "resolved_config": serde_json::to_value(opts.resolved_config)?,
        "report": report_value,
    });
    let path = opts.dir.join("run_manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    written.push(path);
    Ok(written)
}
