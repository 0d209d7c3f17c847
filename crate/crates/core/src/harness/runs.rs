//! The experiment operations behind the command-line interface: weak-error
//! scans, trajectory simulation, coefficient averaging, corrector checks,
//! moment scans, and standing-assumption validation.
//!
//! Every operation takes a [`Resolved`] config and returns a serializable
//! report. Ensembles are evaluated in fixed-size chunks that are reduced
//! in chunk order, so results are byte-identical across thread counts.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    validate_integrator_config, FrozenIntegrator, SlowFastIntegrator, SlowFastState,
};
use crate::error::{Error, Result};
use crate::homogenize::{check_centering, require_dissipativity, CoefficientEstimator, PoissonSolver};
use crate::limit::{
    AnalyticLinear, CoefficientProvider, GaussHermiteAveraged, LimitConfig, LimitIntegrator,
    MonteCarloProvider,
};
use crate::noise::{
    check_lambda_integrability, check_radonifying, EquationTag, NoiseSpec, RngStream,
};
use crate::spectral::SpectralField;

use super::config::{ProviderKind, Resolved};
use super::rate::{fit_rate, RateFit, RatePoint};

/// Chunk width of the deterministic parallel reduction. Partial sums are
/// computed per chunk and folded in chunk order, which makes ensemble
/// statistics independent of the rayon thread count.
const CHUNK: usize = 64;

struct Partial {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

/// Mean and standard error of a `dim`-valued statistic of the slow-fast
/// terminal state over `n_paths` paths.
fn slow_ensemble<F>(
    integ: &SlowFastIntegrator,
    x0: &SpectralField,
    y0: &SpectralField,
    n_paths: usize,
    dim: usize,
    eval: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&SlowFastState, &mut [f64]) + Sync,
{
    let n_chunks = n_paths.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| -> Result<Partial> {
            let mut ws = integ.workspace();
            let mut buf = vec![0.0; dim];
            let mut part = Partial { sum: vec![0.0; dim], sumsq: vec![0.0; dim] };
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(n_paths);
            for path in lo..hi {
                let state = integ.final_state(x0, y0, path as u64, &mut ws)?;
                eval(&state, &mut buf);
                for (i, &v) in buf.iter().enumerate() {
                    part.sum[i] += v;
                    part.sumsq[i] += v * v;
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = n_paths as f64;
    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    for p in &partials {
        for i in 0..dim {
            sum[i] += p.sum[i];
            sumsq[i] += p.sumsq[i];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = mean
        .iter()
        .zip(&sumsq)
        .map(|(m, sq)| {
            let var = (sq / n - m * m).max(0.0) * n / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok((mean, stderr))
}

/// Seed of the slow-fast ensemble for one epsilon: independent columns of
/// the scan come from independent streams.
fn eps_seed(seed: u64, eps_index: usize) -> u64 {
    RngStream::new(seed, eps_index as u64, EquationTag::SlowDriving, 0).derived_seed()
}

fn build_integrator(r: &Resolved, eps_index: usize) -> Result<SlowFastIntegrator> {
    let eps = r.epsilons[eps_index];
    SlowFastIntegrator::new(
        Arc::clone(&r.transform),
        r.coeffs.clone(),
        r.w1.clone(),
        r.w2.clone(),
        r.integrator_config(eps),
        eps_seed(r.seed, eps_index),
    )
}

/// Builds the configured coefficient provider for the reduced equation.
pub fn build_provider(r: &Resolved) -> Result<Box<dyn CoefficientProvider>> {
    Ok(match r.limit.provider {
        ProviderKind::Analytic => {
            Box::new(AnalyticLinear::new(Arc::clone(&r.transform), &r.coeffs, &r.w2)?)
        }
        ProviderKind::GaussHermite => Box::new(GaussHermiteAveraged::new(
            Arc::clone(&r.transform),
            &r.coeffs,
            &r.w2,
            r.limit.n_quad,
        )?),
        ProviderKind::MonteCarlo => {
            let pois = r.poisson_config()?;
            let est = CoefficientEstimator::new(
                Arc::clone(&r.transform),
                r.coeffs.clone(),
                r.w2.clone(),
                r.sampler.clone(),
                pois,
                r.seed,
                r.limit.budget,
            )?;
            Box::new(MonteCarloProvider::new(est, r.seed))
        }
    })
}

/// Builds the reduced-equation integrator from the resolved limit block.
pub fn build_limit_integrator(
    r: &Resolved,
) -> Result<LimitIntegrator<Box<dyn CoefficientProvider>>> {
    let mut cfg = LimitConfig::new(r.limit.dt, r.t_end);
    cfg.refresh_every = r.limit.refresh_every;
    cfg.blowup_limit = r.integrator.blowup_limit;
    cfg.thinning = r.integrator.thinning.max(1);
    LimitIntegrator::new(build_provider(r)?, &r.w1, cfg, r.seed)
}

/// Hard gate: the coupling must average to zero under the frozen law. Runs
/// at the initial slow state with the production sampler settings; skipped
/// when the coupling is identically zero.
fn centering_gate(r: &Resolved, warnings: &mut Vec<String>) -> Result<()> {
    if r.coeffs.b.is_zero() {
        warnings.push("centering check skipped: the coupling is identically zero".into());
        return Ok(());
    }
    let frozen = FrozenIntegrator::new(
        Arc::clone(&r.transform),
        r.coeffs.g.clone(),
        r.w2.clone(),
        r.sampler.dt,
        &r.x0,
        RngStream::new(r.seed, 0, EquationTag::FrozenChain, 0).derived_seed(),
        EquationTag::FrozenChain,
    )?;
    let rep = check_centering(&frozen, &r.coeffs.b, &r.sampler)?;
    for w in &rep.warnings {
        warnings.push(format!("centering estimate: {w}"));
    }
    if !rep.passed {
        let (idx, worst) = rep
            .residual
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty residual");
        return Err(Error::NotCentered {
            residual: worst.abs(),
            threshold: 3.0 * rep.stderr[idx],
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Weak-error scan
// ---------------------------------------------------------------------------

/// One line of the weak-error table (also the v1 CSV schema, in field
/// order).
#[derive(Debug, Clone, Serialize)]
pub struct WeakErrorRow {
    pub eps: f64,
    pub slow_mean: f64,
    pub slow_stderr: f64,
    pub limit_mean: f64,
    pub limit_stderr: f64,
    pub weak_error: f64,
    pub weak_stderr: f64,
}

/// Resolution bookkeeping per epsilon.
#[derive(Debug, Clone, Serialize)]
pub struct EpsGridInfo {
    pub eps: f64,
    pub n_paths: usize,
    pub macro_step: f64,
    pub n_macro_steps: usize,
    pub fast_substeps_per_macro: usize,
}

/// One point of the multi-time weak-error curve (kept in the report when
/// the run checks more than the final time).
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub eps: f64,
    /// Check time on the coupled system's macro grid.
    pub t_slow: f64,
    /// Check time on the reduced equation's grid.
    pub t_limit: f64,
    pub slow_mean: f64,
    pub slow_stderr: f64,
    pub limit_mean: f64,
    pub limit_stderr: f64,
    pub weak_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakErrorReport {
    pub rows: Vec<WeakErrorRow>,
    /// Reduced-equation estimate at the final time (shared across the
    /// epsilon column).
    pub limit_mean: f64,
    pub limit_stderr: f64,
    pub limit_n_paths: usize,
    pub grids: Vec<EpsGridInfo>,
    /// Number of evenly spaced check times; each row holds the supremum
    /// over them (1 = final time only).
    pub sup_points: usize,
    /// The full time curve behind the supremum, present when
    /// `sup_points > 1`.
    pub curve: Option<Vec<CurvePoint>>,
    /// True when every weak error clears three combined standard errors;
    /// only then is the rate fit attempted.
    pub conclusive: bool,
    pub inconclusive: Vec<String>,
    pub fit: Option<RateFit>,
    /// Pre-registered acceptance band for the fitted exponent, copied
    /// from the config.
    pub slope_band: Option<[f64; 2]>,
    /// Whether the fitted slope landed inside the band (when both exist).
    pub slope_in_band: Option<bool>,
    pub warnings: Vec<String>,
}

/// Estimates `|E phi(X_T^eps) - E phi(bar X_T)|` over the epsilon grid and
/// fits the convergence rate when every point is statistically resolved.
pub fn run_weak_error(r: &Resolved) -> Result<WeakErrorReport> {
    let mut warnings = r.lint_warnings.clone();

    // Standing assumptions first: noise regularity, fast-equation gap,
    // dissipativity, step resolution, centering.
    let rad = check_radonifying(&r.op, &r.w1, r.validation.gamma, r.validation.t_check)?;
    if rad.divergent_tail {
        warnings.push(format!(
            "slow-noise smoothing indicator grows with the truncation (tail exponent {:.2})",
            rad.tail_exponent
        ));
    }
    let lam = check_lambda_integrability(&r.op, &r.w2, r.validation.vartheta, r.validation.t_check)?;
    if lam.divergent {
        warnings.push(format!(
            "fast-gap integrand diverges at the origin (small-t exponent {:.2})",
            lam.small_t_exponent
        ));
    }
    require_dissipativity(&r.op, &r.coeffs.g)?;
    let mut grids = Vec::with_capacity(r.epsilons.len());
    for (i, &eps) in r.epsilons.iter().enumerate() {
        let cfg = r.integrator_config(eps);
        for msg in validate_integrator_config(&cfg, &r.op, &r.coeffs)? {
            warnings.push(format!("eps = {eps}: {msg}"));
        }
        grids.push(EpsGridInfo {
            eps,
            n_paths: r.n_paths_per_eps[i],
            macro_step: cfg.dt_macro,
            n_macro_steps: cfg.n_macro_steps(),
            fast_substeps_per_macro: cfg.m_eff(),
        });
    }
    centering_gate(r, &mut warnings)?;

    let functional = &r.functional;
    let m = r.sup_points;

    // Limit-side estimates, one per check time, shared across the epsilon
    // column. Check times are t_end * j/m snapped to the respective grids.
    let n_limit_total = (r.t_end / r.limit.dt).round().max(1.0) as u64;
    let limit_steps: Vec<u64> = (1..=m)
        .map(|j| {
            (((j as f64 / m as f64) * n_limit_total as f64).round() as u64)
                .clamp(1, n_limit_total)
        })
        .collect();
    let mut limit_at: std::collections::BTreeMap<u64, (f64, f64)> = Default::default();
    for &steps in &limit_steps {
        if limit_at.contains_key(&steps) {
            continue;
        }
        let mut cfg = LimitConfig::new(r.limit.dt, steps as f64 * r.limit.dt);
        cfg.refresh_every = r.limit.refresh_every;
        cfg.blowup_limit = r.integrator.blowup_limit;
        let li = LimitIntegrator::new(build_provider(r)?, &r.w1, cfg, r.seed)?;
        let est =
            li.eval_semigroup(r.x0.coeffs(), |c| functional.eval(c), r.limit.n_paths, 0)?;
        limit_at.insert(steps, est);
    }
    let (limit_mean, limit_stderr) = limit_at[&n_limit_total];

    // One coupled ensemble per epsilon and check time; each row keeps the
    // supremum over the times.
    let mut rows = Vec::with_capacity(r.epsilons.len());
    let mut curve: Vec<CurvePoint> = Vec::new();
    for (i, &eps) in r.epsilons.iter().enumerate() {
        let integ_full = build_integrator(r, i)?;
        for msg in integ_full.warnings() {
            warnings.push(format!("eps = {eps}: {msg}"));
        }
        let h = r.macro_step(eps);
        let n_slow_total = (r.t_end / h).round().max(1.0) as u64;
        let mut slow_at: std::collections::BTreeMap<u64, (f64, f64)> = Default::default();
        let mut best: Option<WeakErrorRow> = None;
        for j in 1..=m {
            let frac = j as f64 / m as f64;
            let n_t = ((frac * n_slow_total as f64).round() as u64).clamp(1, n_slow_total);
            if !slow_at.contains_key(&n_t) {
                let mut cfg = r.integrator_config(eps);
                cfg.t_end = n_t as f64 * h;
                let integ = if n_t == n_slow_total {
                    None
                } else {
                    Some(SlowFastIntegrator::new(
                        Arc::clone(&r.transform),
                        r.coeffs.clone(),
                        r.w1.clone(),
                        r.w2.clone(),
                        cfg,
                        eps_seed(r.seed, i),
                    )?)
                };
                let est = slow_ensemble(
                    integ.as_ref().unwrap_or(&integ_full),
                    &r.x0,
                    &r.y0,
                    r.n_paths_per_eps[i],
                    1,
                    |state, out| out[0] = functional.eval(state.x.coeffs()),
                )?;
                slow_at.insert(n_t, (est.0[0], est.1[0]));
            }
            let (sm, ss) = slow_at[&n_t];
            let (lm, ls) = limit_at[&limit_steps[j - 1]];
            let weak_error = (sm - lm).abs();
            let weak_stderr = (ss * ss + ls * ls).sqrt();
            if m > 1 {
                curve.push(CurvePoint {
                    eps,
                    t_slow: n_t as f64 * h,
                    t_limit: limit_steps[j - 1] as f64 * r.limit.dt,
                    slow_mean: sm,
                    slow_stderr: ss,
                    limit_mean: lm,
                    limit_stderr: ls,
                    weak_error,
                });
            }
            let candidate = WeakErrorRow {
                eps,
                slow_mean: sm,
                slow_stderr: ss,
                limit_mean: lm,
                limit_stderr: ls,
                weak_error,
                weak_stderr,
            };
            let replace = match &best {
                None => true,
                Some(b) => candidate.weak_error > b.weak_error,
            };
            if replace {
                best = Some(candidate);
            }
        }
        rows.push(best.expect("at least one check time"));
    }

    let mut inconclusive = Vec::new();
    for row in &rows {
        if row.weak_error <= 3.0 * row.weak_stderr {
            inconclusive.push(format!(
                "eps = {}: weak error {:.3e} within three standard errors ({:.3e}); \
                 raise the path counts to resolve it",
                row.eps,
                row.weak_error,
                3.0 * row.weak_stderr
            ));
        }
    }
    let conclusive = inconclusive.is_empty();
    let fit = if conclusive {
        let points: Vec<RatePoint> = rows
            .iter()
            .map(|row| RatePoint { eps: row.eps, error: row.weak_error, stderr: row.weak_stderr })
            .collect();
        match fit_rate(&points) {
            Ok(f) => Some(f),
            Err(e) => {
                inconclusive.push(format!("rate fit unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };
    let slope_in_band = match (&fit, r.slope_band) {
        (Some(f), Some([lo, hi])) => Some(lo <= f.slope && f.slope <= hi),
        _ => None,
    };

    Ok(WeakErrorReport {
        rows,
        limit_mean,
        limit_stderr,
        limit_n_paths: r.limit.n_paths,
        grids,
        sup_points: m,
        curve: if m > 1 { Some(curve) } else { None },
        conclusive,
        inconclusive,
        fit,
        slope_band: r.slope_band,
        slope_in_band,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Trajectory simulation
// ---------------------------------------------------------------------------

/// One recorded trajectory sample (the v1 CSV schema, in field order).
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub eps: f64,
    pub path: u64,
    pub t: f64,
    pub phi: f64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub x_mode1: f64,
    pub y_mode1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub rows: Vec<TrajectoryRow>,
    pub warnings: Vec<String>,
}

/// Integrates thinned coupled trajectories for every epsilon and records
/// scalar summaries along each path.
pub fn run_simulate(r: &Resolved) -> Result<SimulateReport> {
    let mut warnings = r.lint_warnings.clone();
    let mut rows = Vec::new();
    for (i, &eps) in r.epsilons.iter().enumerate() {
        let integ = build_integrator(r, i)?;
        for msg in integ.warnings() {
            warnings.push(format!("eps = {eps}: {msg}"));
        }
        for path in 0..r.n_paths_per_eps[i] as u64 {
            for state in integ.simulate_path(&r.x0, &r.y0, path)? {
                rows.push(TrajectoryRow {
                    eps,
                    path,
                    t: state.t,
                    phi: r.functional.eval(state.x.coeffs()),
                    x_norm: state.x.norm(),
                    y_norm: state.y.norm(),
                    x_mode1: state.x.coeffs()[0],
                    y_mode1: state.y.coeffs()[0],
                });
            }
        }
    }
    Ok(SimulateReport { rows, warnings })
}

// ---------------------------------------------------------------------------
// Coefficient averaging
// ---------------------------------------------------------------------------

/// Averaged coefficients at one slow state, flattened for serialization
/// (matrices in row-major nested vectors).
#[derive(Debug, Clone, Serialize)]
pub struct AveragedState {
    pub state: usize,
    pub fbar: Vec<f64>,
    pub fbar_stderr: Vec<f64>,
    pub drift_correction: Vec<f64>,
    pub drift_correction_stderr: Vec<f64>,
    pub sigma_bar_sq: Vec<Vec<f64>>,
    pub sigma_bar_sq_stderr: Vec<Vec<f64>>,
    pub b_tensor_psi: Vec<Vec<f64>>,
    pub b_tensor_psi_stderr: Vec<Vec<f64>>,
    pub upsilon: Vec<Vec<f64>>,
    pub upsilon_stderr: Vec<Vec<f64>>,
    /// Negative-eigenvalue mass clipped when factoring the emergent
    /// covariance.
    pub clipped_mass: f64,
    /// Asymmetry of the estimated emergent covariance before
    /// symmetrization.
    pub asym_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageReport {
    pub states: Vec<AveragedState>,
    pub warnings: Vec<String>,
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Estimates every homogenized coefficient at each requested slow state.
pub fn run_average(r: &Resolved) -> Result<AverageReport> {
    let mut warnings = r.lint_warnings.clone();
    require_dissipativity(&r.op, &r.coeffs.g)?;
    centering_gate(r, &mut warnings)?;
    let pois = r.poisson_config()?;
    let est = CoefficientEstimator::new(
        Arc::clone(&r.transform),
        r.coeffs.clone(),
        r.w2.clone(),
        r.sampler.clone(),
        pois,
        r.seed,
        r.limit.budget,
    )?;
    let mut states = Vec::with_capacity(r.eval_states.len());
    for (idx, x) in r.eval_states.iter().enumerate() {
        let co = est.at(x)?;
        states.push(AveragedState {
            state: idx,
            fbar: co.fbar.coeffs().to_vec(),
            fbar_stderr: co.fbar_stderr.clone(),
            drift_correction: co.drift_correction.coeffs().to_vec(),
            drift_correction_stderr: co.drift_correction_stderr.clone(),
            sigma_bar_sq: matrix_rows(&co.sigma_bar_sq),
            sigma_bar_sq_stderr: matrix_rows(&co.sigma_bar_sq_stderr),
            b_tensor_psi: matrix_rows(&co.b_tensor_psi),
            b_tensor_psi_stderr: matrix_rows(&co.b_tensor_psi_stderr),
            upsilon: matrix_rows(&co.upsilon),
            upsilon_stderr: matrix_rows(&co.upsilon_stderr),
            clipped_mass: co.clipped_mass,
            asym_norm: co.asym_norm,
            warnings: co.warnings.clone(),
        });
    }
    Ok(AverageReport { states, warnings })
}

// ---------------------------------------------------------------------------
// Corrector check
// ---------------------------------------------------------------------------

/// Per-mode corrector estimate (the v1 CSV schema, in field order).
#[derive(Debug, Clone, Serialize)]
pub struct PsiRow {
    pub mode: usize,
    pub psi: f64,
    pub psi_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoissonReport {
    pub centering_passed: bool,
    pub centering_residual: Vec<f64>,
    pub centering_stderr: Vec<f64>,
    pub rows: Vec<PsiRow>,
    /// Estimated mass of the truncated time-integral tail.
    pub tail_bound: f64,
    pub warnings: Vec<String>,
}

/// Solves the corrector equation for the coupling at the initial state and
/// reports per-mode values with between-block standard errors. When the
/// centering precondition fails, the report carries the failure instead of
/// a solution.
pub fn run_poisson_check(r: &Resolved) -> Result<PoissonReport> {
    let n = r.op.n_modes();
    let mut warnings = r.lint_warnings.clone();
    require_dissipativity(&r.op, &r.coeffs.g)?;
    if r.coeffs.b.is_zero() {
        warnings.push(
            "the coupling is identically zero, so the corrector vanishes identically".into(),
        );
        return Ok(PoissonReport {
            centering_passed: true,
            centering_residual: vec![0.0; n],
            centering_stderr: vec![0.0; n],
            rows: (0..n).map(|k| PsiRow { mode: k + 1, psi: 0.0, psi_stderr: 0.0 }).collect(),
            tail_bound: 0.0,
            warnings,
        });
    }

    let chains = FrozenIntegrator::new(
        Arc::clone(&r.transform),
        r.coeffs.g.clone(),
        r.w2.clone(),
        r.sampler.dt,
        &r.x0,
        RngStream::new(r.seed, 0, EquationTag::FrozenChain, 0).derived_seed(),
        EquationTag::FrozenChain,
    )?;
    let centering = check_centering(&chains, &r.coeffs.b, &r.sampler)?;
    for w in &centering.warnings {
        warnings.push(format!("centering estimate: {w}"));
    }
    if !centering.passed {
        warnings.push(
            "the coupling does not average to zero under the frozen law; \
             the corrector integral does not converge and was not attempted"
                .into(),
        );
        return Ok(PoissonReport {
            centering_passed: false,
            centering_residual: centering.residual.clone(),
            centering_stderr: centering.stderr.clone(),
            rows: Vec::new(),
            tail_bound: f64::NAN,
            warnings,
        });
    }

    let pois = r.poisson_config()?;
    let corrector = FrozenIntegrator::new(
        Arc::clone(&r.transform),
        r.coeffs.g.clone(),
        r.w2.clone(),
        pois.dt,
        &r.x0,
        RngStream::new(r.seed, 0, EquationTag::CorrectorPath, 0).derived_seed(),
        EquationTag::CorrectorPath,
    )?;
    let solver = PoissonSolver::new(corrector, r.coeffs.b.clone(), pois, Some(&centering))?;

    const BLOCKS: usize = 4;
    let mut block_values = Vec::with_capacity(BLOCKS);
    let mut tail_bound: f64 = 0.0;
    for block in 0..BLOCKS as u64 {
        let sol = solver.solve(r.y0.coeffs(), block)?;
        for w in &sol.warnings {
            let tagged = format!("corrector solve (block {block}): {w}");
            if !warnings.contains(&tagged) {
                warnings.push(tagged);
            }
        }
        tail_bound = tail_bound.max(sol.tail_bound);
        block_values.push(sol.value);
    }
    let bf = BLOCKS as f64;
    let rows = (0..n)
        .map(|k| {
            let mean = block_values.iter().map(|v| v[k]).sum::<f64>() / bf;
            let var = block_values.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>()
                / (bf - 1.0);
            PsiRow { mode: k + 1, psi: mean, psi_stderr: (var / bf).sqrt() }
        })
        .collect();

    Ok(PoissonReport {
        centering_passed: true,
        centering_residual: centering.residual.clone(),
        centering_stderr: centering.stderr.clone(),
        rows,
        tail_bound,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Moment scan
// ---------------------------------------------------------------------------

/// One moment estimate (the v1 CSV schema, in field order): the slow
/// moment is `E || (-A)^gamma X_t ||^2`, the fast moment `E || Y_t ||^2`.
#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub gamma: f64,
    pub eps: f64,
    pub t: f64,
    pub slow_moment: f64,
    pub slow_stderr: f64,
    pub fast_moment: f64,
    pub fast_stderr: f64,
}

/// Uniformity verdict for one `(gamma, t)` cell across the epsilon grid.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSummary {
    pub gamma: f64,
    pub t: f64,
    /// `(max - min)/min` of the slow moment across epsilon.
    pub spread: f64,
    /// True when the moment increases strictly at every step of the
    /// epsilon column (epsilon decreasing).
    pub growing: bool,
    /// False when the moment increases monotonically as epsilon shrinks
    /// and the spread exceeds 25%.
    pub uniform: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    pub summaries: Vec<MomentSummary>,
    pub warnings: Vec<String>,
}

/// Scans regularity moments of the coupled pair across the epsilon grid,
/// looking for growth as the scales separate.
pub fn run_moment_scan(r: &Resolved) -> Result<MomentReport> {
    let mut warnings = r.lint_warnings.clone();
    let gammas = &r.moment.gammas;
    for &g in gammas {
        if !(0.0..=1.0).contains(&g) || !g.is_finite() {
            return Err(Error::Config(format!(
                "moment order gamma must lie in [0, 1], got {g}"
            )));
        }
        if g >= 0.5 {
            warnings.push(format!(
                "gamma = {g} is at or above 1/2: outside the range where uniform-in-epsilon \
                 moment bounds hold; growth there is expected, not a defect"
            ));
        }
    }
    let times = r
        .moment
        .times
        .clone()
        .unwrap_or_else(|| vec![r.t_end / 4.0, r.t_end / 2.0, r.t_end]);
    for &t in &times {
        if !(t > 0.0) || t > r.t_end * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "moment time {t} outside (0, t_end = {}]",
                r.t_end
            )));
        }
    }
    let n_paths = r.moment.n_paths.unwrap_or(r.n_paths_per_eps[0]).max(2);

    let dim = gammas.len() + 1;
    // rows_by_cell[(gamma_idx, time_idx)] -> per-eps entries in grid order.
    let mut rows = Vec::new();
    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::new(); gammas.len() * times.len()];
    for (i, &eps) in r.epsilons.iter().enumerate() {
        let h = r.macro_step(eps);
        let total_steps = (r.t_end / h).round() as u64;
        // Snap each requested time to the macro grid, deduplicating times
        // that land on the same step.
        let mut step_of_time = Vec::with_capacity(times.len());
        for &t in &times {
            let n_t = ((t / h).round() as u64).clamp(1, total_steps);
            step_of_time.push(n_t);
        }
        let mut unique_steps: Vec<u64> = step_of_time.clone();
        unique_steps.sort_unstable();
        unique_steps.dedup();

        for &n_t in &unique_steps {
            let mut cfg = r.integrator_config(eps);
            cfg.t_end = n_t as f64 * h;
            let integ = SlowFastIntegrator::new(
                Arc::clone(&r.transform),
                r.coeffs.clone(),
                r.w1.clone(),
                r.w2.clone(),
                cfg,
                eps_seed(r.seed, i),
            )?;
            for msg in integ.warnings() {
                let tagged = format!("eps = {eps}: {msg}");
                if !warnings.contains(&tagged) {
                    warnings.push(tagged);
                }
            }
            let (mean, se) = slow_ensemble(&integ, &r.x0, &r.y0, n_paths, dim, |state, out| {
                for (j, &g) in gammas.iter().enumerate() {
                    out[j] = state.x.sobolev_norm(g).powi(2);
                }
                out[dim - 1] = state.y.norm().powi(2);
            })?;
            let t_snap = n_t as f64 * h;
            for (j, &g) in gammas.iter().enumerate() {
                rows.push(MomentRow {
                    gamma: g,
                    eps,
                    t: t_snap,
                    slow_moment: mean[j],
                    slow_stderr: se[j],
                    fast_moment: mean[dim - 1],
                    fast_stderr: se[dim - 1],
                });
                for (ti, &s) in step_of_time.iter().enumerate() {
                    if s == n_t {
                        cells[j * times.len() + ti].push((eps, mean[j]));
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        a.gamma
            .total_cmp(&b.gamma)
            .then(b.eps.total_cmp(&a.eps))
            .then(a.t.total_cmp(&b.t))
    });

    let mut summaries = Vec::new();
    for (j, &g) in gammas.iter().enumerate() {
        for (ti, &t) in times.iter().enumerate() {
            let series = &cells[j * times.len() + ti];
            if series.len() < 2 {
                continue;
            }
            let vals: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let spread = if lo > 0.0 { (hi - lo) / lo } else { f64::INFINITY };
            // Entries are in epsilon-grid order, i.e. epsilon decreasing.
            let growing = vals.windows(2).all(|w| w[1] > w[0]);
            let uniform = !(growing && spread > 0.25);
            let note = if !uniform {
                format!(
                    "grows as epsilon shrinks (spread {:.1}%){}",
                    spread * 100.0,
                    if g >= 0.5 { "; expected at this order" } else { "" }
                )
            } else if growing {
                format!(
                    "increases toward the small-epsilon limit (spread {:.1}%)",
                    spread * 100.0
                )
            } else {
                format!("stable across the grid (spread {:.1}%)", spread * 100.0)
            };
            summaries.push(MomentSummary { gamma: g, t, spread, growing, uniform, note });
        }
    }
    Ok(MomentReport { rows, summaries, warnings })
}

// ---------------------------------------------------------------------------
// Assumption validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

/// One validated assumption (the v1 CSV schema, in field order).
#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub check: String,
    pub status: CheckStatus,
    pub value: f64,
    pub threshold: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub items: Vec<CheckItem>,
    /// True when no item failed (warnings allowed).
    pub passed: bool,
}

/// Empirical decay exponent of a spectrum from its last two modes; `None`
/// when the tail is already exactly zero (finitely supported spectra are
/// trivially summable).
fn spectrum_decay_exponent(lambdas: &[f64]) -> Option<f64> {
    let n = lambdas.len();
    if n < 2 || lambdas[n - 1] <= 0.0 || lambdas[n - 2] <= 0.0 {
        return None;
    }
    Some((lambdas[n - 1] / lambdas[n - 2]).ln() / (n as f64 / (n as f64 - 1.0)).ln())
}

fn trace_item(name: &str, spec: &NoiseSpec) -> CheckItem {
    match spectrum_decay_exponent(spec.lambdas()) {
        None => CheckItem {
            check: name.into(),
            status: CheckStatus::Pass,
            value: spec.trace(),
            threshold: f64::INFINITY,
            note: "finitely supported spectrum; trivially summable".into(),
        },
        Some(e) => CheckItem {
            check: name.into(),
            status: if e < -1.0 { CheckStatus::Pass } else { CheckStatus::Fail },
            value: e,
            threshold: -1.0,
            note: if e < -1.0 {
                format!("spectrum decays like k^{e:.2}; the mode sum converges")
            } else {
                format!(
                    "spectrum decays like k^{e:.2} (need faster than k^-1); \
                     the driving covariance is not trace class as the truncation grows"
                )
            },
        },
    }
}

/// Checks every standing assumption the homogenization limit relies on and
/// reports per-item pass/warn/fail. Designed to run in well under a second
/// so it can gate batch jobs.
pub fn run_validate(r: &Resolved) -> Result<ValidationReport> {
    let mut items = Vec::new();

    items.push(trace_item("slow_noise_trace_class", &r.w1));
    items.push(trace_item("fast_noise_trace_class", &r.w2));

    match check_radonifying(&r.op, &r.w1, r.validation.gamma, r.validation.t_check) {
        Ok(rep) => items.push(CheckItem {
            check: "slow_noise_smoothing".into(),
            status: if rep.divergent_tail { CheckStatus::Warn } else { CheckStatus::Pass },
            value: rep.value,
            threshold: f64::INFINITY,
            note: if rep.divergent_tail {
                format!(
                    "truncated smoothing integral {:.4e}; per-mode indicator grows \
                     (tail exponent {:.2})",
                    rep.value, rep.tail_exponent
                )
            } else {
                format!("smoothing integral {:.4e} with decaying mode tail", rep.value)
            },
        }),
        Err(e) => items.push(CheckItem {
            check: "slow_noise_smoothing".into(),
            status: CheckStatus::Fail,
            value: f64::NAN,
            threshold: f64::NAN,
            note: e.to_string(),
        }),
    }

    match check_lambda_integrability(&r.op, &r.w2, r.validation.vartheta, r.validation.t_check) {
        Ok(rep) => items.push(CheckItem {
            check: "fast_gap_integrability".into(),
            status: if rep.divergent { CheckStatus::Fail } else { CheckStatus::Pass },
            value: rep.integral,
            threshold: f64::INFINITY,
            note: format!(
                "integral {:.4e}; small-t exponent of the gap function {:.2} at power {:.2}",
                rep.integral, rep.small_t_exponent, rep.integrand_power
            ),
        }),
        Err(e) => items.push(CheckItem {
            check: "fast_gap_integrability".into(),
            status: CheckStatus::Fail,
            value: f64::NAN,
            threshold: f64::NAN,
            note: e.to_string(),
        }),
    }

    match crate::homogenize::dissipativity_margin(&r.op, &r.coeffs.g) {
        Ok(margin) => items.push(CheckItem {
            check: "dissipativity".into(),
            status: if margin > 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
            value: margin,
            threshold: 0.0,
            note: if margin > 0.0 {
                format!("spectral gap minus reaction slope = {margin:.4} > 0")
            } else {
                format!(
                    "spectral gap minus reaction slope = {margin:.4} <= 0; \
                     the frozen dynamics need not mix"
                )
            },
        }),
        Err(e) => items.push(CheckItem {
            check: "dissipativity".into(),
            status: CheckStatus::Fail,
            value: f64::NAN,
            threshold: 0.0,
            note: e.to_string(),
        }),
    }

    // Coupling centering, on a reduced sampling budget so validation stays
    // fast; the production gate inside the weak-error run re-checks with
    // the full budget.
    if r.coeffs.b.is_zero() {
        items.push(CheckItem {
            check: "coupling_centering".into(),
            status: CheckStatus::Pass,
            value: 0.0,
            threshold: 1.0,
            note: "coupling identically zero".into(),
        });
    } else {
        let mut screen = r.sampler.clone();
        screen.n_paths = screen.n_paths.min(16);
        screen.n_samples = screen.n_samples.min(64);
        let screened = (|| -> Result<CheckItem> {
            let frozen = FrozenIntegrator::new(
                Arc::clone(&r.transform),
                r.coeffs.g.clone(),
                r.w2.clone(),
                screen.dt,
                &r.x0,
                RngStream::new(r.seed, 0, EquationTag::FrozenChain, 0).derived_seed(),
                EquationTag::FrozenChain,
            )?;
            let rep = check_centering(&frozen, &r.coeffs.b, &screen)?;
            let worst = rep
                .residual
                .iter()
                .zip(&rep.stderr)
                .map(|(res, se)| res.abs() / (3.0 * se).max(1e-300))
                .fold(0.0f64, f64::max);
            Ok(CheckItem {
                check: "coupling_centering".into(),
                status: if rep.passed { CheckStatus::Pass } else { CheckStatus::Fail },
                value: worst,
                threshold: 1.0,
                note: if rep.passed {
                    "screening estimate: residual within three standard errors of zero".into()
                } else {
                    "screening estimate: the coupling does not average to zero under the \
                     frozen law"
                        .into()
                },
            })
        })();
        items.push(screened.unwrap_or_else(|e| CheckItem {
            check: "coupling_centering".into(),
            status: CheckStatus::Fail,
            value: f64::NAN,
            threshold: 1.0,
            note: e.to_string(),
        }));
    }

    let lint_count = r.lint_warnings.len();
    items.push(CheckItem {
        check: "coefficient_growth".into(),
        status: if lint_count == 0 { CheckStatus::Pass } else { CheckStatus::Warn },
        value: lint_count as f64,
        threshold: 0.0,
        note: if lint_count == 0 {
            "all expressions look bounded with bounded derivatives".into()
        } else {
            r.lint_warnings.join(" | ")
        },
    });

    let eps_min = *r.epsilons.last().expect("non-empty grid");
    let cfg = r.integrator_config(eps_min);
    match validate_integrator_config(&cfg, &r.op, &r.coeffs) {
        Ok(w) => items.push(CheckItem {
            check: "integrator_resolution".into(),
            status: if w.is_empty() { CheckStatus::Pass } else { CheckStatus::Warn },
            value: cfg.delta_tau(),
            threshold: crate::dynamics::fast_resolution_bound(&r.op, &r.coeffs.g)
                .unwrap_or(f64::NAN),
            note: if w.is_empty() {
                format!(
                    "at eps = {eps_min}: macro step {:.3e}, {} fast substeps per macro step",
                    cfg.dt_macro,
                    cfg.m_eff()
                )
            } else {
                w.join(" | ")
            },
        }),
        Err(e) => items.push(CheckItem {
            check: "integrator_resolution".into(),
            status: CheckStatus::Fail,
            value: f64::NAN,
            threshold: f64::NAN,
            note: e.to_string(),
        }),
    }

    let passed = items.iter().all(|i| i.status != CheckStatus::Fail);
    Ok(ValidationReport { items, passed })
}
