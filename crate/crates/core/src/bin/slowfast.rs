//! Command-line interface of the slow-fast simulation laboratory.
//!
//! Every subcommand takes one strict-JSON config file, runs the
//! corresponding experiment, prints a human summary, and writes the
//! versioned table (or JSON report) plus a run manifest to the output
//! directory. Identical configs, seeds, and format produce byte-identical
//! tables regardless of `--threads`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use slowfast_spde::harness::output::{
    csv_for_average, csv_for_moment, csv_for_poisson, csv_for_simulate, csv_for_validate,
    csv_for_weak_error, emit, CsvDoc, EmitOptions, OutputFormat,
};
use slowfast_spde::harness::runs::CheckStatus;
use slowfast_spde::harness::{
    parse_config, resolve, run_average, run_moment_scan, run_poisson_check, run_simulate,
    run_validate, run_weak_error, Resolved,
};
use slowfast_spde::Result;

#[derive(Parser)]
#[command(
    name = "slowfast",
    version,
    about = "Simulation laboratory for slow-fast stochastic reaction-diffusion systems",
    long_about = "Integrates coupled slow-fast stochastic reaction-diffusion systems in a \
                  spectral basis, constructs the homogenized limit equation, and measures \
                  the weak convergence rate between the two. Configs are strict JSON: \
                  unknown keys are rejected."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the seed recorded in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (default: the config's `output`, else "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format: csv (versioned table) or json (full report).
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Check every standing assumption and report pass/warn/fail per item.
    ValidateConfig { config: PathBuf },
    /// Integrate coupled trajectories and record thinned path summaries.
    Simulate { config: PathBuf },
    /// Estimate the averaged drift, diffusion, corrector drift, and
    /// emergent diffusion at the evaluation states.
    Average { config: PathBuf },
    /// Solve the corrector equation for the coupling and report per-mode
    /// values with between-block standard errors.
    PoissonCheck { config: PathBuf },
    /// Estimate the weak error against the reduced equation across the
    /// epsilon grid and fit the convergence rate.
    WeakError { config: PathBuf },
    /// Scan regularity moments of the coupled pair across the epsilon
    /// grid.
    MomentScan { config: PathBuf },
}

impl Command {
    fn config_path(&self) -> &PathBuf {
        match self {
            Command::ValidateConfig { config }
            | Command::Simulate { config }
            | Command::Average { config }
            | Command::PoissonCheck { config }
            | Command::WeakError { config }
            | Command::MomentScan { config } => config,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::ValidateConfig { .. } => "validate-config",
            Command::Simulate { .. } => "simulate",
            Command::Average { .. } => "average",
            Command::PoissonCheck { .. } => "poisson-check",
            Command::WeakError { .. } => "weak-error",
            Command::MomentScan { .. } => "moment-scan",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let format: OutputFormat = cli.format.parse()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| slowfast_spde::Error::Config(format!("thread pool: {e}")))?;
    }

    let text = std::fs::read_to_string(cli.command.config_path())?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let resolved = resolve(&cfg)?;
    for w in &resolved.lint_warnings {
        eprintln!("warning: {w}");
    }

    let out_dir = cli
        .out
        .clone()
        .or_else(|| resolved.config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let started = Instant::now();
    let (report_json, doc, exit, summary) = dispatch(&cli.command, &resolved)?;
    let wall = started.elapsed().as_secs_f64();

    let opts = EmitOptions {
        dir: &out_dir,
        subcommand: cli.command.name(),
        format,
        seed: resolved.seed,
        threads: rayon::current_num_threads(),
        wall_time_seconds: wall,
        resolved_config: &resolved.config,
    };
    let written = emit(&opts, &report_json, doc)?;

    print!("{summary}");
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(exit)
}

/// Runs the requested operation; returns the JSON-serializable report, its
/// CSV rendering, the exit code, and a human summary.
fn dispatch(
    cmd: &Command,
    r: &Resolved,
) -> Result<(serde_json::Value, CsvDoc, ExitCode, String)> {
    use std::fmt::Write;
    match cmd {
        Command::ValidateConfig { .. } => {
            let rep = run_validate(r)?;
            let mut s = String::new();
            for item in &rep.items {
                let tag = match item.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Warn => "WARN",
                    CheckStatus::Fail => "FAIL",
                };
                writeln!(s, "{tag:4}  {:28} {}", item.check, item.note).ok();
            }
            writeln!(
                s,
                "{}",
                if rep.passed { "all checks passed" } else { "validation FAILED" }
            )
            .ok();
            let code = if rep.passed { ExitCode::SUCCESS } else { ExitCode::from(2) };
            Ok((serde_json::to_value(&rep)?, csv_for_validate(&rep), code, s))
        }
        Command::Simulate { .. } => {
            let rep = run_simulate(r)?;
            let s = format!(
                "recorded {} samples across {} epsilon value(s)\n",
                rep.rows.len(),
                r.epsilons.len()
            );
            Ok((serde_json::to_value(&rep)?, csv_for_simulate(&rep), ExitCode::SUCCESS, s))
        }
        Command::Average { .. } => {
            let rep = run_average(r)?;
            let mut s = String::new();
            for st in &rep.states {
                writeln!(
                    s,
                    "state {}: |fbar| = {:.4e}, |correction| = {:.4e}, \
                     tr(sigma_bar_sq) = {:.4e}, tr(upsilon upsilon^T)/2 = {:.4e}",
                    st.state,
                    st.fbar.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    st.drift_correction.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    (0..st.sigma_bar_sq.len()).map(|k| st.sigma_bar_sq[k][k]).sum::<f64>(),
                    0.5 * st
                        .upsilon
                        .iter()
                        .flat_map(|row| row.iter().map(|v| v * v))
                        .sum::<f64>(),
                )
                .ok();
            }
            Ok((serde_json::to_value(&rep)?, csv_for_average(&rep), ExitCode::SUCCESS, s))
        }
        Command::PoissonCheck { .. } => {
            let rep = run_poisson_check(r)?;
            let mut s = String::new();
            if rep.centering_passed {
                for row in &rep.rows {
                    writeln!(
                        s,
                        "mode {}: psi = {:.6e} +- {:.2e}",
                        row.mode, row.psi, row.psi_stderr
                    )
                    .ok();
                }
                writeln!(s, "truncation tail bound {:.3e}", rep.tail_bound).ok();
            } else {
                let worst = rep
                    .centering_residual
                    .iter()
                    .fold(0.0f64, |a, &b| a.max(b.abs()));
                writeln!(
                    s,
                    "centering FAILED: max residual {worst:.6e}; corrector not solved"
                )
                .ok();
            }
            Ok((serde_json::to_value(&rep)?, csv_for_poisson(&rep), ExitCode::SUCCESS, s))
        }
        Command::WeakError { .. } => {
            let rep = run_weak_error(r)?;
            let mut s = String::new();
            for row in &rep.rows {
                writeln!(
                    s,
                    "eps = {:<8} weak error = {:.6e} +- {:.2e}",
                    row.eps, row.weak_error, row.weak_stderr
                )
                .ok();
            }
            if let Some(fit) = &rep.fit {
                writeln!(
                    s,
                    "fitted rate: slope = {:.4} (95% CI [{:.4}, {:.4}]), R^2 = {:.4}",
                    fit.slope, fit.slope_ci.0, fit.slope_ci.1, fit.r_squared
                )
                .ok();
                if let (Some(band), Some(inside)) = (rep.slope_band, rep.slope_in_band) {
                    writeln!(
                        s,
                        "pre-registered band [{}, {}]: {}",
                        band[0],
                        band[1],
                        if inside { "slope inside" } else { "slope OUTSIDE" }
                    )
                    .ok();
                }
            } else {
                writeln!(s, "inconclusive; no rate fitted:").ok();
                for reason in &rep.inconclusive {
                    writeln!(s, "  - {reason}").ok();
                }
            }
            for w in &rep.warnings {
                writeln!(s, "note: {w}").ok();
            }
            Ok((serde_json::to_value(&rep)?, csv_for_weak_error(&rep), ExitCode::SUCCESS, s))
        }
        Command::MomentScan { .. } => {
            let rep = run_moment_scan(r)?;
            let mut s = String::new();
            for sum in &rep.summaries {
                writeln!(
                    s,
                    "gamma = {:<5} t = {:<8.4} spread = {:>7.2}%  {}{}",
                    sum.gamma,
                    sum.t,
                    sum.spread * 100.0,
                    if sum.growing { "growing" } else { "flat" },
                    if sum.uniform { "" } else { ", NON-UNIFORM" }
                )
                .ok();
            }
            for w in &rep.warnings {
                writeln!(s, "note: {w}").ok();
            }
            Ok((serde_json::to_value(&rep)?, csv_for_moment(&rep), ExitCode::SUCCESS, s))
        }
    }
}
