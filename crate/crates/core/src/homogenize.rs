//! Estimators for the averaged coefficients of the reduced slow equation.
//!
//! Everything here is an expectation against the invariant law of the
//! frozen fast process at a fixed slow state `x`: the averaged reaction,
//! the averaged squared noise amplitude, the centering diagnostic for the
//! coupling term, the corrector obtained by solving the stationary
//! backward equation `L2 Psi = -phi` through its time-integral
//! representation `Psi(x,y) = int_0^inf E[phi(x, Y_t^x(y))] dt`, the
//! corrector-induced drift, and the Green-Kubo-type matrix whose
//! symmetric square root is the emergent diffusion.
//!
//! Sampling uses many independent chains rather than one long path, so
//! reported standard errors are honest between-chain statistics; all
//! parallel reductions are ordered folds over deterministic per-chain
//! results, making every estimate reproducible bit-for-bit at any thread
//! count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::FrozenIntegrator;
use crate::error::{Error, Result};
use crate::functions::{grid_extrema, EvalWorkspace, ScalarFn, Var};
use crate::spectral::{OperatorSpec, SineTransform, SpectralField};

/// Dissipativity margin `alpha_1 - sup d_v g`, the guaranteed exponential
/// contraction rate of the frozen dynamics. The derivative bound is
/// estimated by sampling the symbolic derivative over `[-4, 4]^2`.
pub fn dissipativity_margin(op: &OperatorSpec, g: &ScalarFn) -> Result<f64> {
    let dg = g.differentiate(Var::V);
    let (_, hi) = grid_extrema(&dg, 4.0, 17)?;
    Ok(op.alpha_min() - hi)
}

/// Errors unless the margin is strictly positive; returns it otherwise.
pub fn require_dissipativity(op: &OperatorSpec, g: &ScalarFn) -> Result<f64> {
    let margin = dissipativity_margin(op, g)?;
    if margin <= 0.0 {
        return Err(Error::Config(format!(
            "frozen dynamics not dissipative: alpha_1 - sup d_v g = {margin:.4} <= 0; \
             the invariant law may not exist or mix"
        )));
    }
    Ok(margin)
}

/// Chain layout for invariant-measure sampling. Times are in the frozen
/// equation's own (unrescaled) clock.
#[derive(Debug, Clone)]
pub struct InvariantSamplerConfig {
    /// Time discarded at the start of every chain.
    pub burn_in: f64,
    /// Retained samples per chain.
    pub n_samples: usize,
    /// Time between retained samples.
    pub thinning: f64,
    /// Independent chains.
    pub n_paths: usize,
    /// Integrator step.
    pub dt: f64,
}

impl InvariantSamplerConfig {
    /// Defaults in units of the slowest relaxation time `1/alpha_1`:
    /// burn-in of five relaxation times, thinning of one.
    pub fn default_for(op: &OperatorSpec) -> Self {
        let relax = 1.0 / op.alpha_min();
        Self {
            burn_in: 5.0 * relax,
            n_samples: 256,
            thinning: relax,
            n_paths: 64,
            dt: relax / 200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("sampler dt must be positive, got {}", self.dt)));
        }
        if self.burn_in < 0.0 {
            return Err(Error::Config("burn_in must be nonnegative".into()));
        }
        if self.thinning < self.dt {
            return Err(Error::Config(format!(
                "thinning {} is below one integrator step {}",
                self.thinning, self.dt
            )));
        }
        if self.n_samples == 0 || self.n_paths < 2 {
            return Err(Error::Config(
                "sampler needs n_samples >= 1 and at least 2 chains for stderr".into(),
            ));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_samples * self.n_paths
    }

    fn burn_steps(&self) -> u64 {
        (self.burn_in / self.dt).round() as u64
    }

    fn thin_steps(&self) -> u64 {
        ((self.thinning / self.dt).round() as u64).max(1)
    }
}

/// A vector-valued invariant-measure average with between-chain standard
/// errors.
#[derive(Debug, Clone)]
pub struct InvariantEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Per-chain averages (`n_chains` rows of `dim` entries), kept so
    /// downstream nonlinear transforms can jackknife their uncertainty.
    pub chain_values: Vec<Vec<f64>>,
    pub n_chains: usize,
    pub n_samples_per_chain: usize,
    pub warnings: Vec<String>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Core sampler: averages a `dim`-dimensional observable of the fast state
/// over `n_paths` independent chains. `init` builds per-chain scratch;
/// `observe(y, chain, sample_index, scratch, out)` writes one observation.
/// Chains run in parallel; the reduction is an ordered fold over chain
/// averages, and the standard error is the between-chain spread.
pub fn invariant_expectation<S, I, F>(
    frozen: &FrozenIntegrator,
    cfg: &InvariantSamplerConfig,
    dim: usize,
    init: I,
    observe: F,
) -> Result<InvariantEstimate>
where
    S: Send,
    I: Fn(u64) -> S + Sync + Send,
    F: Fn(&[f64], u64, usize, &mut S, &mut [f64]) -> Result<()> + Sync + Send,
{
    cfg.validate()?;
    require_dissipativity(frozen.op(), frozen.reaction())?;
    let n = frozen.op().n_modes();
    let burn = cfg.burn_steps();
    let thin = cfg.thin_steps();
    let chain_avgs = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|chain| -> Result<Vec<f64>> {
            let mut ws = frozen.workspace();
            let mut scratch = init(chain);
            let mut y = vec![0.0; n];
            let mut step = frozen.evolve(&mut y, burn, chain, 0, &mut ws)?;
            let mut acc = vec![0.0; dim];
            let mut sample = vec![0.0; dim];
            for s in 0..cfg.n_samples {
                step = frozen.evolve(&mut y, thin, chain, step, &mut ws)?;
                observe(&y, chain, s, &mut scratch, &mut sample)?;
                for (a, v) in acc.iter_mut().zip(&sample) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= cfg.n_samples as f64;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let nc = chain_avgs.len();
    let mut value = vec![0.0; dim];
    for avg in &chain_avgs {
        for (v, a) in value.iter_mut().zip(avg) {
            *v += a;
        }
    }
    for v in value.iter_mut() {
        *v /= nc as f64;
    }
    let mut stderr = vec![0.0; dim];
    for avg in &chain_avgs {
        for ((s, a), v) in stderr.iter_mut().zip(avg).zip(&value) {
            *s += (a - v) * (a - v);
        }
    }
    for s in stderr.iter_mut() {
        *s = (*s / (nc as f64 - 1.0) / nc as f64).sqrt();
    }

    let mut warnings = Vec::new();
    if cfg.total_samples() < 1000 {
        warnings.push(format!(
            "only {} invariant samples; estimator statistics below the recommended 1000",
            cfg.total_samples()
        ));
    }
    let (vn, sn) = (l2(&value), l2(&stderr));
    if vn > 0.0 && sn > 0.5 * vn {
        warnings.push(format!(
            "low accuracy: stderr norm {sn:.3e} exceeds 50% of the estimate norm {vn:.3e}"
        ));
    }
    Ok(InvariantEstimate {
        value,
        stderr,
        chain_values: chain_avgs,
        n_chains: nc,
        n_samples_per_chain: cfg.n_samples,
        warnings,
    })
}

struct NemScratch {
    eval: EvalWorkspace,
    yg: Vec<f64>,
    fg: Vec<f64>,
}

impl NemScratch {
    fn new(n_grid: usize) -> Self {
        Self { eval: EvalWorkspace::new(), yg: vec![0.0; n_grid], fg: vec![0.0; n_grid] }
    }
}

/// Averaged reaction: mode coefficients of `E_mu[f(x(.), Y(.))]`.
pub fn estimate_fbar(
    frozen: &FrozenIntegrator,
    f: &ScalarFn,
    cfg: &InvariantSamplerConfig,
) -> Result<(SpectralField, InvariantEstimate)> {
    let tf = Arc::clone(frozen.transform());
    let n = frozen.op().n_modes();
    let est = invariant_expectation(
        frozen,
        cfg,
        n,
        |_chain| NemScratch::new(tf.n_grid()),
        |y, _c, _s, sc, out| {
            tf.grid_from_coeffs(y, &mut sc.yg);
            f.eval_grid(frozen.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
            tf.coeffs_from_grid(&sc.fg, out);
            Ok(())
        },
    )?;
    let field = SpectralField::new(frozen.op(), est.value.clone())?;
    Ok((field, est))
}

/// A matrix-valued estimate with entrywise standard errors.
#[derive(Debug, Clone)]
pub struct MatrixEstimate {
    pub value: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    /// Per-chain matrix averages, for jackknifing derived quantities.
    pub chain_values: Vec<DMatrix<f64>>,
    pub warnings: Vec<String>,
}

fn matrix_estimate_from(n: usize, est: InvariantEstimate) -> MatrixEstimate {
    MatrixEstimate {
        value: DMatrix::from_row_slice(n, n, &est.value),
        stderr: DMatrix::from_row_slice(n, n, &est.stderr),
        chain_values: est
            .chain_values
            .iter()
            .map(|row| DMatrix::from_row_slice(n, n, row))
            .collect(),
        warnings: est.warnings,
    }
}

/// Averaged squared noise amplitude in the eigenbasis:
/// `M_jk = E_mu[ int sigma^2(x(xi), Y(xi)) e_j(xi) e_k(xi) dxi ]`,
/// computed by grid quadrature. Every sample contributes a Gram matrix,
/// so the average is symmetric positive semidefinite by construction.
pub fn estimate_sigma_bar_sq(
    frozen: &FrozenIntegrator,
    sigma: &ScalarFn,
    cfg: &InvariantSamplerConfig,
) -> Result<MatrixEstimate> {
    let tf = Arc::clone(frozen.transform());
    let n = frozen.op().n_modes();
    let w = tf.quadrature_weight();
    let est = invariant_expectation(
        frozen,
        cfg,
        n * n,
        |_chain| NemScratch::new(tf.n_grid()),
        |y, _c, _s, sc, out| {
            tf.grid_from_coeffs(y, &mut sc.yg);
            sigma.eval_grid(frozen.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
            out.fill(0.0);
            for j in 0..tf.n_grid() {
                let s2w = w * sc.fg[j] * sc.fg[j];
                let row = tf.basis_row(j);
                for a in 0..n {
                    let ra = s2w * row[a];
                    for b in a..n {
                        out[a * n + b] += ra * row[b];
                    }
                }
            }
            for a in 0..n {
                for b in 0..a {
                    out[a * n + b] = out[b * n + a];
                }
            }
            Ok(())
        },
    )?;
    Ok(matrix_estimate_from(n, est))
}

/// Outcome of the centering diagnostic for a coupling coefficient.
#[derive(Debug, Clone)]
pub struct CenteringReport {
    /// Invariant average of the coefficient's mode projections.
    pub residual: Vec<f64>,
    pub stderr: Vec<f64>,
    /// True when every component is within three standard errors of zero.
    pub passed: bool,
    pub warnings: Vec<String>,
}

/// Estimates `E_mu[B(x, .)]`, which the homogenization construction
/// requires to vanish.
pub fn check_centering(
    frozen: &FrozenIntegrator,
    b: &ScalarFn,
    cfg: &InvariantSamplerConfig,
) -> Result<CenteringReport> {
    let (_, est) = estimate_fbar(frozen, b, cfg)?;
    let passed =
        est.value.iter().zip(&est.stderr).all(|(r, s)| r.abs() <= 3.0 * s || r.abs() < 1e-14);
    Ok(CenteringReport {
        residual: est.value,
        stderr: est.stderr,
        passed,
        warnings: est.warnings,
    })
}

// ---------------------------------------------------------------------------
// Corrector (stationary backward equation)
// ---------------------------------------------------------------------------

/// Quadrature and Monte Carlo budget for the corrector solver.
#[derive(Debug, Clone)]
pub struct PoissonConfig {
    /// Truncation horizon of the time integral.
    pub t_cut: f64,
    /// Quadrature nodes across `[0, t_cut]`.
    pub n_time_nodes: usize,
    /// Monte Carlo paths per solve.
    pub n_paths: usize,
    /// Finite-difference step for slow-argument derivatives.
    pub fd_step: f64,
    /// Integrator step for the frozen paths.
    pub dt: f64,
}

impl PoissonConfig {
    /// Defaults scaled by the mixing rate: the truncated tail is of order
    /// `e^{-8}`.
    pub fn default_for(op: &OperatorSpec, g: &ScalarFn) -> Result<Self> {
        let margin = require_dissipativity(op, g)?;
        Ok(Self {
            t_cut: 8.0 / margin,
            n_time_nodes: 160,
            n_paths: 256,
            fd_step: 0.02,
            dt: 1.0 / (margin.max(op.alpha_max()) * 40.0),
        })
    }

    pub fn validate(&self, op: &OperatorSpec, g: &ScalarFn) -> Result<()> {
        let margin = require_dissipativity(op, g)?;
        if self.t_cut < 8.0 / margin {
            return Err(Error::Config(format!(
                "t_cut = {} is below 8 mixing times = {:.3}; the truncation bias would \
                 dominate",
                self.t_cut,
                8.0 / margin
            )));
        }
        if !(1e-4..=1e-1).contains(&self.fd_step) {
            return Err(Error::Config(format!(
                "fd_step = {} outside the supported range [1e-4, 1e-1]",
                self.fd_step
            )));
        }
        if self.n_time_nodes < 4 {
            return Err(Error::Config("need at least 4 quadrature nodes".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("corrector solves need at least one path".into()));
        }
        if !(self.dt > 0.0) || self.t_cut / self.dt < self.n_time_nodes as f64 {
            return Err(Error::Config(format!(
                "dt = {} leaves fewer than one integrator step per quadrature node",
                self.dt
            )));
        }
        Ok(())
    }
}

/// One corrector value `Psi(x, y)` with its truncation-bias bound.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub value: Vec<f64>,
    /// Estimated mass of the discarded tail `int_{t_cut}^inf`, from an
    /// exponential fit to the last quarter of the integrand.
    pub tail_bound: f64,
    pub warnings: Vec<String>,
}

/// Monte Carlo solver for the corrector at a fixed slow state.
///
/// The solve integrates the ensemble mean of `phi(x, Y_t^x(y))` by the
/// trapezoid rule on `[0, t_cut]`. Construction optionally consumes a
/// [`CenteringReport`]: a failed report is rejected here, because the time
/// integral only converges for observables that average to zero.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    frozen: FrozenIntegrator,
    phi: ScalarFn,
    cfg: PoissonConfig,
    steps_per_node: u64,
}

impl PoissonSolver {
    pub fn new(
        frozen: FrozenIntegrator,
        phi: ScalarFn,
        cfg: PoissonConfig,
        centering: Option<&CenteringReport>,
    ) -> Result<Self> {
        cfg.validate(frozen.op(), frozen.reaction())?;
        if let Some(rep) = centering {
            if !rep.passed {
                let (k, worst) = rep
                    .residual
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .expect("non-empty residual");
                return Err(Error::NotCentered {
                    residual: worst.abs(),
                    threshold: 3.0 * rep.stderr[k],
                });
            }
        }
        let steps_per_node =
            ((cfg.t_cut / cfg.dt / cfg.n_time_nodes as f64).round() as u64).max(1);
        Ok(Self { frozen, phi, cfg, steps_per_node })
    }

    pub fn config(&self) -> &PoissonConfig {
        &self.cfg
    }

    pub fn frozen(&self) -> &FrozenIntegrator {
        &self.frozen
    }

    /// The same solver with the slow argument moved; noise streams are
    /// shared, so paired solves at nearby slow states are coupled by
    /// common random numbers. Skips re-validation (the dynamics are
    /// unchanged) — intended for small finite-difference displacements.
    pub fn with_slow_field(&self, x: &SpectralField) -> Result<Self> {
        Ok(Self {
            frozen: self.frozen.with_slow_field(x)?,
            phi: self.phi.clone(),
            cfg: self.cfg.clone(),
            steps_per_node: self.steps_per_node,
        })
    }

    /// Solves at `y0`. `path_block` selects a disjoint band of path ids so
    /// distinct solves draw independent noise; reusing a block reproduces
    /// the exact same paths (the common-random-numbers mechanism).
    pub fn solve(&self, y0: &[f64], path_block: u64) -> Result<PoissonSolution> {
        let n = self.frozen.op().n_modes();
        let tf = self.frozen.transform();
        let nodes = self.cfg.n_time_nodes;
        let delta = self.steps_per_node as f64 * self.frozen.dt();
        let n_paths = self.cfg.n_paths;

        struct Partial {
            integral: Vec<f64>,
            node_vals: Vec<f64>,
        }

        const CHUNK: usize = 32;
        let n_chunks = n_paths.div_ceil(CHUNK);
        let partials = (0..n_chunks)
            .into_par_iter()
            .map(|ci| -> Result<Partial> {
                let mut ws = self.frozen.workspace();
                let mut sc = NemScratch::new(tf.n_grid());
                let mut phihat = vec![0.0; n];
                let mut part = Partial {
                    integral: vec![0.0; n],
                    node_vals: vec![0.0; (nodes + 1) * n],
                };
                let lo = ci * CHUNK;
                let hi = ((ci + 1) * CHUNK).min(n_paths);
                for p in lo..hi {
                    let path = path_block
                        .checked_mul(n_paths as u64)
                        .and_then(|b| b.checked_add(p as u64))
                        .ok_or_else(|| Error::Config("path block overflow".into()))?;
                    let mut y = y0.to_vec();
                    let mut step = 0u64;
                    for node in 0..=nodes {
                        if node > 0 {
                            step = self.frozen.evolve(
                                &mut y,
                                self.steps_per_node,
                                path,
                                step,
                                &mut ws,
                            )?;
                        }
                        tf.grid_from_coeffs(&y, &mut sc.yg);
                        self.phi.eval_grid(
                            self.frozen.x_grid(),
                            &sc.yg,
                            &mut sc.eval,
                            &mut sc.fg,
                        )?;
                        tf.coeffs_from_grid(&sc.fg, &mut phihat);
                        let w = if node == 0 || node == nodes { delta / 2.0 } else { delta };
                        for k in 0..n {
                            part.integral[k] += w * phihat[k];
                            part.node_vals[node * n + k] += phihat[k];
                        }
                    }
                }
                Ok(part)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut integral = vec![0.0; n];
        let mut node_means = vec![0.0; (nodes + 1) * n];
        for part in &partials {
            for (a, b) in integral.iter_mut().zip(&part.integral) {
                *a += b;
            }
            for (a, b) in node_means.iter_mut().zip(&part.node_vals) {
                *a += b;
            }
        }
        for a in integral.iter_mut() {
            *a /= n_paths as f64;
        }
        for a in node_means.iter_mut() {
            *a /= n_paths as f64;
        }

        // Exponential tail bound from the last quarter of the integrand.
        let mut warnings = Vec::new();
        let q = ((nodes + 1) / 4).max(3).min(nodes + 1);
        let start = nodes + 1 - q;
        let mut ts = Vec::with_capacity(q);
        let mut lns = Vec::with_capacity(q);
        let mut m_last = 0.0;
        let mut fit_ok = true;
        for node in start..=nodes {
            let m = l2(&node_means[node * n..(node + 1) * n]);
            m_last = m;
            if m > 0.0 {
                ts.push(node as f64 * delta);
                lns.push(m.ln());
            } else {
                fit_ok = false;
            }
        }
        let tail_bound = if !fit_ok || ts.len() < 2 {
            // Integrand hit exact zero (e.g. deterministic zero observable):
            // nothing left to bound.
            if m_last == 0.0 {
                0.0
            } else {
                warnings.push("integrand tail too short to fit; using a crude bound".into());
                m_last * self.cfg.t_cut
            }
        } else {
            let tm = ts.iter().sum::<f64>() / ts.len() as f64;
            let lm = lns.iter().sum::<f64>() / lns.len() as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for (t, l) in ts.iter().zip(&lns) {
                num += (t - tm) * (l - lm);
                den += (t - tm) * (t - tm);
            }
            let rate = -num / den;
            if rate > 1e-9 {
                m_last / rate
            } else {
                warnings.push(
                    "integrand tail not visibly decaying; truncation bias unreliable".into(),
                );
                m_last * self.cfg.t_cut
            }
        };
        let vn = l2(&integral);
        if vn > 0.0 && tail_bound > 0.1 * vn {
            warnings.push(format!(
                "truncation tail bound {tail_bound:.3e} exceeds 10% of the value norm {vn:.3e}; \
                 increase t_cut"
            ));
        }
        Ok(PoissonSolution { value: integral, tail_bound, warnings })
    }
}

// ---------------------------------------------------------------------------
// Corrector as an evaluable function; generator residual
// ---------------------------------------------------------------------------

/// Evaluable representation of a corrector estimate, for applying the
/// frozen generator to it.
#[derive(Debug, Clone)]
pub enum PsiFunction {
    /// `Psi(y) = K y + c`.
    Affine { k: DMatrix<f64>, c: DVector<f64> },
}

impl PsiFunction {
    pub fn linear(k: DMatrix<f64>) -> Self {
        let n = k.nrows();
        PsiFunction::Affine { k, c: DVector::zeros(n) }
    }

    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        match self {
            PsiFunction::Affine { k, c } => {
                let yv = DVector::from_column_slice(y);
                (k * yv + c).as_slice().to_vec()
            }
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        match self {
            PsiFunction::Affine { k, .. } => k,
        }
    }
}

/// Least-squares fit of an affine-in-y surrogate to `(y, Psi(y))` pairs.
/// Exact when the underlying corrector is linear in `y` (the analytically
/// solvable benchmark); elsewhere it is a labeled approximation that makes
/// the generator residual meaningful despite Monte Carlo noise.
pub fn fit_affine_surrogate(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<PsiFunction> {
    if samples.is_empty() {
        return Err(Error::Config("surrogate fit needs samples".into()));
    }
    let n = samples[0].0.len();
    let rows = samples.len();
    if rows < n + 2 {
        return Err(Error::Config(format!(
            "surrogate fit needs at least {} samples for {} modes, got {rows}",
            n + 2,
            n
        )));
    }
    let mut design = DMatrix::zeros(rows, n + 1);
    let mut target = DMatrix::zeros(rows, n);
    for (r, (y, psi)) in samples.iter().enumerate() {
        design[(r, 0)] = 1.0;
        for j in 0..n {
            design[(r, j + 1)] = y[j];
            target[(r, j)] = psi[j];
        }
    }
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * target;
    let sol = xtx
        .cholesky()
        .ok_or_else(|| Error::Config("surrogate fit is singular: samples not varied enough".into()))?
        .solve(&xty);
    // sol is (n+1) x n: first row the intercept, remaining rows K^T.
    let c = DVector::from_iterator(n, (0..n).map(|j| sol[(0, j)]));
    let k = DMatrix::from_fn(n, n, |i, j| sol[(j + 1, i)]);
    Ok(PsiFunction::Affine { k, c })
}

/// Applies the frozen-process generator to a corrector estimate by central
/// finite differences in the fast modes,
/// `L2 Psi = <A y + G(x,y), D_y Psi> + 1/2 sum_k lambda_k d^2_{y_k} Psi`,
/// and returns `||L2 Psi + phi(x,y)|| / ||phi(x,y)||` (the absolute norm
/// when `phi` vanishes at `y`). A correct corrector solves
/// `L2 Psi = -phi`, so small is good.
pub fn check_poisson_residual(
    frozen: &FrozenIntegrator,
    psi: &PsiFunction,
    phi: &ScalarFn,
    y: &[f64],
    fd_step: f64,
) -> Result<f64> {
    if !(1e-6..=1.0).contains(&fd_step) {
        return Err(Error::Config(format!("generator fd_step {fd_step} outside [1e-6, 1]")));
    }
    let op = frozen.op();
    let n = op.n_modes();
    let tf = frozen.transform();
    let mut sc = NemScratch::new(tf.n_grid());

    let mut phihat = vec![0.0; n];
    tf.grid_from_coeffs(y, &mut sc.yg);
    phi.eval_grid(frozen.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
    tf.coeffs_from_grid(&sc.fg, &mut phihat);

    let mut ghat = vec![0.0; n];
    frozen.reaction().eval_grid(frozen.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
    tf.coeffs_from_grid(&sc.fg, &mut ghat);
    let drift: Vec<f64> =
        (0..n).map(|k| -op.alphas()[k] * y[k] + ghat[k]).collect();

    let base = psi.eval(y);
    let lambdas = frozen.noise().lambdas();
    let mut l2psi = vec![0.0; n];
    let mut yp = y.to_vec();
    for k in 0..n {
        yp[k] = y[k] + fd_step;
        let plus = psi.eval(&yp);
        yp[k] = y[k] - fd_step;
        let minus = psi.eval(&yp);
        yp[k] = y[k];
        for i in 0..n {
            let first = (plus[i] - minus[i]) / (2.0 * fd_step);
            let second = (plus[i] - 2.0 * base[i] + minus[i]) / (fd_step * fd_step);
            l2psi[i] += first * drift[k] + 0.5 * lambdas[k] * second;
        }
    }
    let resid: Vec<f64> = l2psi.iter().zip(&phihat).map(|(a, b)| a + b).collect();
    let nphi = l2(&phihat);
    if nphi == 0.0 {
        return Ok(l2(&l2psi));
    }
    Ok(l2(&resid) / nphi)
}

// ---------------------------------------------------------------------------
// Corrector-induced drift and emergent diffusion
// ---------------------------------------------------------------------------

/// Invariant average of the corrector paired against the coupling:
/// `M_jk = E_mu[ <B(x,.), e_j> <Psi(x,.), e_k> ]`. One corrector solve per
/// invariant sample.
pub fn estimate_b_tensor_psi(
    chains: &FrozenIntegrator,
    solver: &PoissonSolver,
    b: &ScalarFn,
    cfg: &InvariantSamplerConfig,
) -> Result<MatrixEstimate> {
    let tf = Arc::clone(chains.transform());
    let n = chains.op().n_modes();
    let n_samples = cfg.n_samples as u64;
    let est = invariant_expectation(
        chains,
        cfg,
        n * n,
        |_chain| NemScratch::new(tf.n_grid()),
        |y, chain, s, sc, out| {
            tf.grid_from_coeffs(y, &mut sc.yg);
            b.eval_grid(chains.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
            let mut bhat = vec![0.0; n];
            tf.coeffs_from_grid(&sc.fg, &mut bhat);
            let psi = solver.solve(y, chain * n_samples + s as u64)?.value;
            for j in 0..n {
                for k in 0..n {
                    out[j * n + k] = bhat[j] * psi[k];
                }
            }
            Ok(())
        },
    )?;
    Ok(matrix_estimate_from(n, est))
}

/// The emergent diffusion factor extracted from a Green-Kubo matrix.
#[derive(Debug, Clone)]
pub struct UpsilonFactor {
    /// Symmetric factor with `Upsilon Upsilon^T / 2 = sym(M)` up to
    /// clipping.
    pub upsilon: DMatrix<f64>,
    /// Total magnitude of negative eigenvalues set to zero.
    pub clipped_mass: f64,
    /// Frobenius norm of the antisymmetric part of `M` (diagnostic: only
    /// the symmetric part carries variance).
    pub asym_norm: f64,
    /// Tolerance used for the indefiniteness decision.
    pub tolerance: f64,
}

/// Factorizes `2 sym(M)` as `Upsilon Upsilon^T` through the eigensystem of
/// the symmetrized matrix. Eigenvalues in `[-tol, 0)` with
/// `tol = 1e-8 ||sym(M)||_F` are treated as statistical zeros and clipped;
/// anything more negative is reported as indefinite.
pub fn upsilon_from(m: &DMatrix<f64>) -> Result<UpsilonFactor> {
    if m.nrows() != m.ncols() {
        return Err(Error::Config("Green-Kubo matrix must be square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let asym_norm = ((m - m.transpose()) * 0.5).norm();
    let tolerance = 1e-8 * sym.norm();
    let eig = sym.clone().symmetric_eigen();
    let mut clipped_mass = 0.0;
    let mut scaled = eig.eigenvalues.clone();
    for v in scaled.iter_mut() {
        if *v < -tolerance {
            return Err(Error::Indefinite { min_eigenvalue: *v, tolerance });
        }
        if *v < 0.0 {
            clipped_mass += -*v;
            *v = 0.0;
        }
        *v = (2.0 * *v).sqrt();
    }
    let upsilon =
        &eig.eigenvectors * DMatrix::from_diagonal(&scaled) * eig.eigenvectors.transpose();
    Ok(UpsilonFactor { upsilon, clipped_mass, asym_norm, tolerance })
}

/// Corrector-induced drift: invariant average of the directional
/// derivative of the corrector along the coupling,
/// `E_mu[ grad_x Psi(x, .) . B(x, .) ]`. Each sample takes two corrector
/// solves at `x +- fd_step * B/||B||` coupled by common random numbers;
/// `budget` caps `samples * solves * paths` before any work starts.
pub fn estimate_drift_correction(
    chains: &FrozenIntegrator,
    solver: &PoissonSolver,
    x: &SpectralField,
    b: &ScalarFn,
    cfg: &InvariantSamplerConfig,
    budget: u64,
) -> Result<(SpectralField, InvariantEstimate)> {
    let n = chains.op().n_modes();
    if b.is_zero() {
        let est = InvariantEstimate {
            value: vec![0.0; n],
            stderr: vec![0.0; n],
            chain_values: vec![vec![0.0; n]; cfg.n_paths],
            n_chains: cfg.n_paths,
            n_samples_per_chain: cfg.n_samples,
            warnings: Vec::new(),
        };
        return Ok((SpectralField::zero(chains.op()), est));
    }
    let cost = cfg.total_samples() as u64 * 2 * solver.config().n_paths as u64;
    if cost > budget {
        return Err(Error::Budget(format!(
            "drift correction needs {cost} corrector paths ({} samples x 2 solves x {}), \
             over the budget {budget}",
            cfg.total_samples(),
            solver.config().n_paths
        )));
    }
    let tf = Arc::clone(chains.transform());
    let delta = solver.config().fd_step;
    let n_samples = cfg.n_samples as u64;
    let est = invariant_expectation(
        chains,
        cfg,
        n,
        |_chain| NemScratch::new(tf.n_grid()),
        |y, chain, s, sc, out| {
            tf.grid_from_coeffs(y, &mut sc.yg);
            b.eval_grid(chains.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg)?;
            let mut bhat = vec![0.0; n];
            tf.coeffs_from_grid(&sc.fg, &mut bhat);
            let nb = l2(&bhat);
            if nb < 1e-14 {
                out.fill(0.0);
                return Ok(());
            }
            let mut xp = x.coeffs().to_vec();
            let mut xm = x.coeffs().to_vec();
            for k in 0..n {
                let d = delta * bhat[k] / nb;
                xp[k] += d;
                xm[k] -= d;
            }
            let block = chain * n_samples + s as u64;
            let plus = solver
                .with_slow_field(&SpectralField::new(chains.op(), xp)?)?
                .solve(y, block)?
                .value;
            let minus = solver
                .with_slow_field(&SpectralField::new(chains.op(), xm)?)?
                .solve(y, block)?
                .value;
            for k in 0..n {
                out[k] = nb * (plus[k] - minus[k]) / (2.0 * delta);
            }
            Ok(())
        },
    )?;
    let field = SpectralField::new(chains.op(), est.value.clone())?;
    Ok((field, est))
}

// ---------------------------------------------------------------------------
// Aggregate estimation at one slow state
// ---------------------------------------------------------------------------

/// The full coefficient tuple of the reduced equation at one slow state,
/// with uncertainty for every estimated quantity.
#[derive(Debug, Clone)]
pub struct HomogenizedCoefficients {
    pub fbar: SpectralField,
    pub fbar_stderr: Vec<f64>,
    pub sigma_bar_sq: DMatrix<f64>,
    pub sigma_bar_sq_stderr: DMatrix<f64>,
    pub drift_correction: SpectralField,
    pub drift_correction_stderr: Vec<f64>,
    pub b_tensor_psi: DMatrix<f64>,
    pub b_tensor_psi_stderr: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    /// Jackknife-over-chains spread of the factorization (zeros when the
    /// coupling is off).
    pub upsilon_stderr: DMatrix<f64>,
    pub clipped_mass: f64,
    pub asym_norm: f64,
    pub warnings: Vec<String>,
}

/// One-stop estimator: owns the frozen-chain and corrector-path dynamics
/// and produces every averaged coefficient at a requested slow state.
#[derive(Debug, Clone)]
pub struct CoefficientEstimator {
    chains: FrozenIntegrator,
    corrector: FrozenIntegrator,
    coeffs: crate::functions::CoefficientSet,
    inv_cfg: InvariantSamplerConfig,
    pois_cfg: PoissonConfig,
    budget: u64,
}

impl CoefficientEstimator {
    pub fn new(
        transform: Arc<SineTransform>,
        coeffs: crate::functions::CoefficientSet,
        fast_noise: crate::noise::NoiseSpec,
        inv_cfg: InvariantSamplerConfig,
        pois_cfg: PoissonConfig,
        seed: u64,
        budget: u64,
    ) -> Result<Self> {
        use crate::noise::{EquationTag, RngStream};
        inv_cfg.validate()?;
        let op = Arc::clone(transform.op());
        let zero = SpectralField::zero(&op);
        let chains = FrozenIntegrator::new(
            Arc::clone(&transform),
            coeffs.g.clone(),
            fast_noise.clone(),
            inv_cfg.dt,
            &zero,
            RngStream::new(seed, 0, EquationTag::FrozenChain, 0).derived_seed(),
            EquationTag::FrozenChain,
        )?;
        let corrector = FrozenIntegrator::new(
            transform,
            coeffs.g.clone(),
            fast_noise,
            pois_cfg.dt,
            &zero,
            RngStream::new(seed, 0, EquationTag::CorrectorPath, 0).derived_seed(),
            EquationTag::CorrectorPath,
        )?;
        pois_cfg.validate(&op, &coeffs.g)?;
        Ok(Self { chains, corrector, coeffs, inv_cfg, pois_cfg, budget })
    }

    pub fn op(&self) -> &Arc<OperatorSpec> {
        self.chains.op()
    }

    /// Same estimator, fresh randomness. Distinct seeds give statistically
    /// independent replications of every estimate.
    pub fn with_seed(&self, seed: u64) -> Self {
        use crate::noise::{EquationTag, RngStream};
        let mut out = self.clone();
        out.chains = self
            .chains
            .with_seed(RngStream::new(seed, 0, EquationTag::FrozenChain, 0).derived_seed());
        out.corrector = self
            .corrector
            .with_seed(RngStream::new(seed, 0, EquationTag::CorrectorPath, 0).derived_seed());
        out
    }

    /// Estimates every coefficient of the reduced equation at `x`.
    pub fn at(&self, x: &SpectralField) -> Result<HomogenizedCoefficients> {
        let n = self.op().n_modes();
        let chains = self.chains.with_slow_field(x)?;
        let mut warnings = Vec::new();

        let (fbar, fest) = estimate_fbar(&chains, &self.coeffs.f, &self.inv_cfg)?;
        for w in fest.warnings {
            warnings.push(format!("averaged reaction: {w}"));
        }

        let (sigma_bar_sq, sigma_bar_sq_stderr) = if self.coeffs.sigma.is_zero() {
            (DMatrix::zeros(n, n), DMatrix::zeros(n, n))
        } else {
            let m = estimate_sigma_bar_sq(&chains, &self.coeffs.sigma, &self.inv_cfg)?;
            for w in m.warnings {
                warnings.push(format!("averaged noise amplitude: {w}"));
            }
            (m.value, m.stderr)
        };

        if self.coeffs.b.is_zero() {
            return Ok(HomogenizedCoefficients {
                fbar,
                fbar_stderr: fest.stderr,
                sigma_bar_sq,
                sigma_bar_sq_stderr,
                drift_correction: SpectralField::zero(self.op()),
                drift_correction_stderr: vec![0.0; n],
                b_tensor_psi: DMatrix::zeros(n, n),
                b_tensor_psi_stderr: DMatrix::zeros(n, n),
                upsilon: DMatrix::zeros(n, n),
                upsilon_stderr: DMatrix::zeros(n, n),
                clipped_mass: 0.0,
                asym_norm: 0.0,
                warnings,
            });
        }

        let rep = check_centering(&chains, &self.coeffs.b, &self.inv_cfg)?;
        let solver = PoissonSolver::new(
            self.corrector.with_slow_field(x)?,
            self.coeffs.b.clone(),
            self.pois_cfg.clone(),
            Some(&rep),
        )?;
        let (drift_correction, cest) = estimate_drift_correction(
            &chains,
            &solver,
            x,
            &self.coeffs.b,
            &self.inv_cfg,
            self.budget,
        )?;
        for w in cest.warnings {
            warnings.push(format!("drift correction: {w}"));
        }
        let m = estimate_b_tensor_psi(&chains, &solver, &self.coeffs.b, &self.inv_cfg)?;
        for w in &m.warnings {
            warnings.push(format!("corrector pairing: {w}"));
        }
        let ups = upsilon_from(&m.value)?;
        let upsilon_stderr = jackknife_upsilon(&m.chain_values, &mut warnings);

        Ok(HomogenizedCoefficients {
            fbar,
            fbar_stderr: fest.stderr,
            sigma_bar_sq,
            sigma_bar_sq_stderr,
            drift_correction,
            drift_correction_stderr: cest.stderr,
            b_tensor_psi: m.value,
            b_tensor_psi_stderr: m.stderr,
            upsilon: ups.upsilon,
            upsilon_stderr,
            clipped_mass: ups.clipped_mass,
            asym_norm: ups.asym_norm,
            warnings,
        })
    }
}

/// Leave-one-chain-out spread of the factorization. Falls back to zeros
/// (with a warning) if a leave-one-out matrix is indefinite.
fn jackknife_upsilon(chain_mats: &[DMatrix<f64>], warnings: &mut Vec<String>) -> DMatrix<f64> {
    let nc = chain_mats.len();
    let n = chain_mats[0].nrows();
    if nc < 2 {
        return DMatrix::zeros(n, n);
    }
    let mut sum = DMatrix::zeros(n, n);
    for m in chain_mats {
        sum += m;
    }
    let mut reps = Vec::with_capacity(nc);
    for m in chain_mats {
        let loo = (&sum - m) / (nc as f64 - 1.0);
        match upsilon_from(&loo) {
            Ok(u) => reps.push(u.upsilon),
            Err(e) => {
                warnings.push(format!(
                    "factor uncertainty unavailable: a leave-one-out replicate failed ({e})"
                ));
                return DMatrix::zeros(n, n);
            }
        }
    }
    let mut mean = DMatrix::zeros(n, n);
    for r in &reps {
        mean += r;
    }
    mean /= nc as f64;
    let mut var = DMatrix::zeros(n, n);
    for r in &reps {
        let d = r - &mean;
        var += d.component_mul(&d);
    }
    var *= (nc as f64 - 1.0) / nc as f64;
    var.map(f64::sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{EquationTag, NoiseRole, NoiseSpec};
    use approx::assert_relative_eq;

    fn make_frozen(
        n: usize,
        g: &str,
        lambda0: f64,
        decay: f64,
        x: &SpectralField,
        dt: f64,
        seed: u64,
        tag: EquationTag,
    ) -> FrozenIntegrator {
        let tf = Arc::new(SineTransform::default_for(x.op()));
        let noise = NoiseSpec::rule(lambda0, decay, n, NoiseRole::FastDriving).unwrap();
        FrozenIntegrator::new(tf, ScalarFn::parse(g).unwrap(), noise, dt, x, seed, tag).unwrap()
    }

    fn op_pi(n: usize) -> Arc<OperatorSpec> {
        OperatorSpec::dirichlet_laplacian(n, std::f64::consts::PI).unwrap()
    }

    fn quick_cfg(chains: usize, samples: usize, dt: f64) -> InvariantSamplerConfig {
        InvariantSamplerConfig {
            burn_in: 5.0,
            n_samples: samples,
            thinning: 1.0,
            n_paths: chains,
            dt,
        }
    }

    #[test]
    fn constant_observable_has_zero_spread() {
        let op = op_pi(2);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(2, "-v", 1.0, 2.0, &x, 0.01, 1, EquationTag::FrozenChain);
        let est = invariant_expectation(
            &frozen,
            &quick_cfg(8, 16, 0.01),
            1,
            |_| (),
            |_y, _c, _s, _sc, out| {
                out[0] = 1.0;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(est.value, vec![1.0]);
        assert_eq!(est.stderr, vec![0.0]);
    }

    #[test]
    fn ou_invariant_moments_match_the_stationary_law() {
        // g = -v: per-mode OU with stationary variance lambda_k/(2(alpha_k+1)).
        let n = 3;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.005, 7, EquationTag::FrozenChain);
        let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
        let cfg = quick_cfg(64, 128, 0.005);
        // First moments vanish.
        let est = invariant_expectation(
            &frozen,
            &cfg,
            n,
            |_| (),
            |y, _c, _s, _sc, out| {
                out.copy_from_slice(y);
                Ok(())
            },
        )
        .unwrap();
        for k in 0..n {
            assert!(
                est.value[k].abs() <= 3.0 * est.stderr[k],
                "mode {k}: mean {} vs se {}",
                est.value[k],
                est.stderr[k]
            );
        }
        // Second moments within 3%.
        let est2 = invariant_expectation(
            &frozen,
            &cfg,
            n,
            |_| (),
            |y, _c, _s, _sc, out| {
                for k in 0..y.len() {
                    out[k] = y[k] * y[k];
                }
                Ok(())
            },
        )
        .unwrap();
        for k in 0..n {
            let exact = noise.lambdas()[k] / (2.0 * (op.alphas()[k] + 1.0));
            assert!(
                (est2.value[k] / exact - 1.0).abs() < 0.03,
                "mode {k}: {} vs {exact}",
                est2.value[k]
            );
        }
    }

    #[test]
    fn sampler_rejects_non_dissipative_reactions() {
        let op = OperatorSpec::dirichlet_laplacian(2, 2.0 * std::f64::consts::PI).unwrap();
        // alpha_1 = 0.25 < d_v(2v) = 2: not dissipative.
        let g = ScalarFn::parse("2*v").unwrap();
        assert!(require_dissipativity(&op, &g).is_err());
        // Margin is reported signed.
        let m = dissipativity_margin(&op, &g).unwrap();
        assert!((m + 1.75).abs() < 1e-12);
    }

    #[test]
    fn averaged_reaction_matches_gaussian_characteristic_function() {
        // Single mode, f = cos(v), g = -v: Y(xi) is centered Gaussian with
        // variance V(xi) = lambda/(2(alpha+1)) e_1(xi)^2, so the averaged
        // reaction has grid values e^{-V(xi)/2} by the characteristic
        // function of the Gaussian law.
        let op = op_pi(1);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(1, "-v", 1.0, 2.0, &x, 0.002, 11, EquationTag::FrozenChain);
        let f = ScalarFn::parse("cos(v)").unwrap();
        let cfg = quick_cfg(64, 128, 0.002);
        let (fbar, est) = estimate_fbar(&frozen, &f, &cfg).unwrap();
        let tf = frozen.transform();
        let w = tf.quadrature_weight();
        let amp2 = 2.0 / std::f64::consts::PI;
        let mut oracle = 0.0;
        for &xi in tf.grid_points() {
            let var = 0.25 * amp2 * xi.sin() * xi.sin();
            oracle += w * (-var / 2.0).exp() * (amp2.sqrt() * xi.sin());
        }
        let tol = (3.0 * est.stderr[0]).max(0.01 * oracle.abs());
        assert!(
            (fbar.coeffs()[0] - oracle).abs() < tol,
            "{} vs {oracle} (tol {tol})",
            fbar.coeffs()[0]
        );
    }

    #[test]
    fn averaged_reaction_trivial_cases() {
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::unit_mode(&op, 1, 0.7).unwrap();
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.01, 3, EquationTag::FrozenChain);
        let cfg = quick_cfg(8, 32, 0.01);
        // f independent of the fast variable: exact, zero spread.
        let f = ScalarFn::parse("sin(u)").unwrap();
        let (fbar, est) = estimate_fbar(&frozen, &f, &cfg).unwrap();
        let tf = frozen.transform();
        let mut sc = NemScratch::new(tf.n_grid());
        let mut exact = vec![0.0; n];
        f.eval_grid(frozen.x_grid(), &vec![0.0; tf.n_grid()], &mut sc.eval, &mut sc.fg).unwrap();
        tf.coeffs_from_grid(&sc.fg, &mut exact);
        for k in 0..n {
            assert_relative_eq!(fbar.coeffs()[k], exact[k], max_relative = 1e-14);
            // Chain averages are bitwise identical; the only spread left is
            // the rounding of the cross-chain mean itself.
            assert!(est.stderr[k] < 1e-14);
        }
        // Odd observable under the symmetric law: zero within 3 se.
        let fv = ScalarFn::parse("v").unwrap();
        let (_fbar, est) = estimate_fbar(&frozen, &fv, &quick_cfg(48, 64, 0.01)).unwrap();
        for k in 0..n {
            assert!(est.value[k].abs() <= 3.0 * est.stderr[k]);
        }
    }

    #[test]
    fn averaged_noise_amplitude_gram_matrix() {
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.005, 5, EquationTag::FrozenChain);
        // sigma = 1: exact orthonormality through the quadrature.
        let one = ScalarFn::parse("1").unwrap();
        let m = estimate_sigma_bar_sq(&frozen, &one, &quick_cfg(4, 8, 0.005)).unwrap();
        for j in 0..n {
            for k in 0..n {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((m.value[(j, k)] - expect).abs() < 1e-8, "({j},{k}) = {}", m.value[(j, k)]);
            }
        }
        // sigma = 0: zero matrix.
        let zero = ScalarFn::parse("0").unwrap();
        let m0 = estimate_sigma_bar_sq(&frozen, &zero, &quick_cfg(4, 8, 0.005)).unwrap();
        assert_eq!(m0.value.iter().cloned().fold(0.0, f64::max), 0.0);

        // sigma = tanh(v)+2 against the pointwise Gaussian oracle: Y(xi) is
        // Gaussian with variance V(xi) = sum_k lambda_k/(2(alpha_k+1)) e_k(xi)^2,
        // modes independent, so E[sigma^2(Y(xi))] integrates the known 1-D law.
        let sig = ScalarFn::parse("tanh(v)+2").unwrap();
        let cfg = quick_cfg(64, 128, 0.005);
        let m = estimate_sigma_bar_sq(&frozen, &sig, &cfg).unwrap();
        let tf = frozen.transform();
        let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
        let w = tf.quadrature_weight();
        let mut oracle: DMatrix<f64> = DMatrix::zeros(n, n);
        for (j, _xi) in tf.grid_points().iter().enumerate() {
            let row = tf.basis_row(j);
            let var: f64 = (0..n)
                .map(|k| noise.lambdas()[k] / (2.0 * (op.alphas()[k] + 1.0)) * row[k] * row[k])
                .sum();
            // Simpson integration of (tanh(z)+2)^2 against N(0, var).
            let sd = var.sqrt();
            let half = 8.0 * sd;
            let m_int = 400usize;
            let hstep = 2.0 * half / m_int as f64;
            let dens = |z: f64| (-z * z / (2.0 * var)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let fval = |z: f64| {
                let t = z.tanh() + 2.0;
                t * t * dens(z)
            };
            let mut s = fval(-half) + fval(half);
            for i in 1..m_int {
                let z = -half + i as f64 * hstep;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * fval(z);
            }
            let e_sig2 = s * hstep / 3.0;
            for a in 0..n {
                for bidx in 0..n {
                    oracle[(a, bidx)] += w * e_sig2 * row[a] * row[bidx];
                }
            }
        }
        for a in 0..n {
            for bidx in 0..n {
                let tol = (3.0 * m.stderr[(a, bidx)]).max(0.01 * oracle[(a, bidx)].abs()).max(1e-3);
                assert!(
                    (m.value[(a, bidx)] - oracle[(a, bidx)]).abs() < tol,
                    "({a},{bidx}): {} vs {}",
                    m.value[(a, bidx)],
                    oracle[(a, bidx)]
                );
            }
        }
    }

    #[test]
    fn centering_diagnostic_separates_odd_from_biased() {
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.005, 13, EquationTag::FrozenChain);
        let cfg = quick_cfg(48, 64, 0.005);
        let odd = ScalarFn::parse("sin(v)").unwrap();
        assert!(check_centering(&frozen, &odd, &cfg).unwrap().passed);
        let biased = ScalarFn::parse("cos(v)").unwrap();
        let rep = check_centering(&frozen, &biased, &cfg).unwrap();
        assert!(!rep.passed, "cos(v) averages to e^(-V/2) > 0, must fail centering");
        let zero = ScalarFn::parse("0").unwrap();
        let rep = check_centering(&frozen, &zero, &cfg).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.residual, vec![0.0; n]);
    }

    fn linear_poisson_setup(
        n: usize,
        beta: f64,
        noise_off: bool,
        dt: f64,
        n_paths: usize,
        nodes: usize,
        seed: u64,
    ) -> PoissonSolver {
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let tf = Arc::new(SineTransform::default_for(&op));
        let noise = if noise_off {
            NoiseSpec::off(n, NoiseRole::FastDriving)
        } else {
            NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap()
        };
        let frozen = FrozenIntegrator::new(
            tf,
            ScalarFn::parse("-v").unwrap(),
            noise,
            dt,
            &x,
            seed,
            EquationTag::CorrectorPath,
        )
        .unwrap();
        let phi = ScalarFn::parse(&format!("{beta}*v")).unwrap();
        let cfg = PoissonConfig { t_cut: 6.0, n_time_nodes: nodes, n_paths, fd_step: 0.02, dt };
        PoissonSolver::new(frozen, phi, cfg, None).unwrap()
    }

    #[test]
    fn corrector_matches_the_resolvent_on_the_linear_benchmark() {
        // phi = beta v, g = -v: Psi_k = beta y_k/(1 + alpha_k). With the
        // noise off the ensemble mean is the deterministic decay path, so
        // only quadrature and scheme bias remain (< 0.5%).
        let beta = 0.5;
        let solver = linear_poisson_setup(3, beta, true, 5e-4, 1, 600, 17);
        let y0 = [0.8, -0.5, 0.3];
        let sol = solver.solve(&y0, 0).unwrap();
        let alphas = [1.0, 4.0, 9.0];
        for k in 0..3 {
            let exact = beta * y0[k] / (1.0 + alphas[k]);
            assert!(
                (sol.value[k] / exact - 1.0).abs() < 5e-3,
                "mode {k}: {} vs {exact}",
                sol.value[k]
            );
        }
        // Tail bound covers the effect of doubling the horizon. The node
        // count doubles too, keeping the quadrature spacing fixed so the
        // comparison isolates truncation (not resolution).
        let mut cfg2 = solver.config().clone();
        cfg2.t_cut = 12.0;
        cfg2.n_time_nodes *= 2;
        let solver2 =
            PoissonSolver::new(solver.frozen().clone(), ScalarFn::parse("0.5*v").unwrap(), cfg2, None)
                .unwrap();
        let sol2 = solver2.solve(&y0, 0).unwrap();
        let moved = l2(&sol
            .value
            .iter()
            .zip(&sol2.value)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>());
        assert!(
            moved <= 1.05 * sol.tail_bound + 1e-12,
            "horizon doubling moved {moved}, tail bound {}",
            sol.tail_bound
        );
    }

    #[test]
    fn corrector_with_noise_stays_near_the_resolvent() {
        let beta = 0.5;
        let solver = linear_poisson_setup(3, beta, false, 2e-3, 3000, 120, 19);
        let y0 = [0.8, -0.5, 0.3];
        let sol = solver.solve(&y0, 0).unwrap();
        let alphas = [1.0, 4.0, 9.0];
        for k in 0..3 {
            let exact = beta * y0[k] / (1.0 + alphas[k]);
            assert!(
                (sol.value[k] - exact).abs() < 0.05,
                "mode {k}: {} vs {exact}",
                sol.value[k]
            );
        }
        // Reusing a path block reproduces the solve bit-for-bit.
        let again = solver.solve(&y0, 0).unwrap();
        assert_eq!(sol.value, again.value);
        // A different block gives an independent (different) estimate.
        let other = solver.solve(&y0, 1).unwrap();
        assert_ne!(sol.value, other.value);
    }

    #[test]
    fn corrector_of_the_zero_observable_is_zero() {
        let op = op_pi(2);
        let x = SpectralField::zero(&op);
        let tf = Arc::new(SineTransform::default_for(&op));
        let noise = NoiseSpec::rule(1.0, 2.0, 2, NoiseRole::FastDriving).unwrap();
        let frozen = FrozenIntegrator::new(
            tf,
            ScalarFn::parse("-v").unwrap(),
            noise,
            2e-3,
            &x,
            23,
            EquationTag::CorrectorPath,
        )
        .unwrap();
        let cfg = PoissonConfig { t_cut: 4.0, n_time_nodes: 40, n_paths: 8, fd_step: 0.02, dt: 2e-3 };
        let solver = PoissonSolver::new(frozen, ScalarFn::parse("0").unwrap(), cfg, None).unwrap();
        let sol = solver.solve(&[0.4, -0.1], 0).unwrap();
        assert_eq!(sol.value, vec![0.0; 2]);
        assert_eq!(sol.tail_bound, 0.0);
    }

    #[test]
    fn corrector_construction_rejects_biased_observables() {
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.005, 29, EquationTag::FrozenChain);
        let rep =
            check_centering(&frozen, &ScalarFn::parse("cos(v)").unwrap(), &quick_cfg(48, 64, 0.005))
                .unwrap();
        let cfg = PoissonConfig { t_cut: 4.0, n_time_nodes: 40, n_paths: 8, fd_step: 0.02, dt: 0.005 };
        let err = PoissonSolver::new(
            frozen,
            ScalarFn::parse("cos(v)").unwrap(),
            cfg,
            Some(&rep),
        )
        .unwrap_err();
        match err {
            Error::NotCentered { residual, .. } => assert!(residual > 0.0),
            other => panic!("expected centering rejection, got {other:?}"),
        }
    }

    #[test]
    fn invariant_average_of_the_corrector_vanishes() {
        // The corrector inherits centering: averaging the solve over
        // invariant starting points must give zero.
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let chains = make_frozen(n, "-v", 1.0, 2.0, &x, 4e-3, 31, EquationTag::FrozenChain);
        let solver = {
            let tf = Arc::new(SineTransform::default_for(&op));
            let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
            let frozen = FrozenIntegrator::new(
                tf,
                ScalarFn::parse("-v").unwrap(),
                noise,
                4e-3,
                &x,
                37,
                EquationTag::CorrectorPath,
            )
            .unwrap();
            let cfg =
                PoissonConfig { t_cut: 4.0, n_time_nodes: 50, n_paths: 96, fd_step: 0.02, dt: 4e-3 };
            PoissonSolver::new(frozen, ScalarFn::parse("0.6*v").unwrap(), cfg, None).unwrap()
        };
        let cfg = quick_cfg(24, 16, 4e-3);
        let n_samples = cfg.n_samples as u64;
        let est = invariant_expectation(
            &chains,
            &cfg,
            n,
            |_| (),
            |y, chain, s, _sc, out| {
                let sol = solver.solve(y, chain * n_samples + s as u64)?;
                out.copy_from_slice(&sol.value);
                Ok(())
            },
        )
        .unwrap();
        for k in 0..n {
            assert!(
                est.value[k].abs() <= 3.0 * est.stderr[k],
                "mode {k}: {} vs se {}",
                est.value[k],
                est.stderr[k]
            );
        }
    }

    #[test]
    fn generator_residual_certifies_the_analytic_corrector() {
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let frozen = make_frozen(n, "-v", 1.0, 2.0, &x, 0.005, 41, EquationTag::FrozenChain);
        let beta = 0.5;
        let k = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                beta / (1.0 + op.alphas()[i])
            } else {
                0.0
            }
        });
        let psi = PsiFunction::linear(k.clone());
        let phi = ScalarFn::parse("0.5*v").unwrap();
        let y = [0.6, -0.3];
        let r = check_poisson_residual(&frozen, &psi, &phi, &y, 1e-3).unwrap();
        assert!(r < 1e-6, "analytic corrector residual {r}");

        // Perturbing the corrector by the rank-one map y -> <y, e_1> e_1
        // adds -(alpha_1 + 1) y_1 e_1 to the generator image, so the
        // residual jumps to (alpha_1 + 1)|y_1| / ||phi(y)||.
        let mut kp = k;
        kp[(0, 0)] += 1.0;
        let perturbed = PsiFunction::linear(kp);
        let r2 = check_poisson_residual(&frozen, &perturbed, &phi, &y, 1e-3).unwrap();
        let tf = frozen.transform();
        let mut sc = NemScratch::new(tf.n_grid());
        let mut phihat = vec![0.0; n];
        tf.grid_from_coeffs(&y, &mut sc.yg);
        phi.eval_grid(frozen.x_grid(), &sc.yg, &mut sc.eval, &mut sc.fg).unwrap();
        tf.coeffs_from_grid(&sc.fg, &mut phihat);
        let expect = (op.alphas()[0] + 1.0) * y[0].abs() / l2(&phihat);
        assert!((r2 / expect - 1.0).abs() < 1e-5, "perturbed residual {r2} vs {expect}");

        // Zero observable with zero corrector: conventionally zero.
        let zero_psi = PsiFunction::linear(DMatrix::zeros(n, n));
        let zero_phi = ScalarFn::parse("0").unwrap();
        let r0 = check_poisson_residual(&frozen, &zero_psi, &zero_phi, &y, 1e-3).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn affine_surrogate_recovers_a_linear_map() {
        let n = 2;
        let k_true = DMatrix::from_row_slice(n, n, &[0.3, -0.1, 0.05, 0.2]);
        let mut samples = Vec::new();
        let mut state = 1u64;
        let mut next = || {
            // Tiny deterministic LCG for spread-out sample points.
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..50 {
            let y = vec![next(), next()];
            let psi = (0..n)
                .map(|i| (0..n).map(|j| k_true[(i, j)] * y[j]).sum::<f64>() + 0.05)
                .collect::<Vec<_>>();
            samples.push((y, psi));
        }
        let fit = fit_affine_surrogate(&samples).unwrap();
        match &fit {
            PsiFunction::Affine { k, c } => {
                for i in 0..n {
                    assert!((c[i] - 0.05).abs() < 1e-10);
                    for j in 0..n {
                        assert!((k[(i, j)] - k_true[(i, j)]).abs() < 1e-10);
                    }
                }
            }
        }
        assert!(fit_affine_surrogate(&samples[..2]).is_err());
    }

    #[test]
    fn green_kubo_matrix_and_upsilon_on_the_linear_benchmark() {
        // b = beta v, g = -v: M is diagonal with
        // M_kk = beta^2 lambda_k / (2 (1 + alpha_k)^2), and
        // Upsilon_kk = beta sqrt(lambda_k)/(1 + alpha_k).
        let n = 2;
        let beta = 0.5;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let chains = make_frozen(n, "-v", 1.0, 2.0, &x, 4e-3, 43, EquationTag::FrozenChain);
        let solver = {
            let tf = Arc::new(SineTransform::default_for(&op));
            let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
            let frozen = FrozenIntegrator::new(
                tf,
                ScalarFn::parse("-v").unwrap(),
                noise,
                4e-3,
                &x,
                47,
                EquationTag::CorrectorPath,
            )
            .unwrap();
            let cfg =
                PoissonConfig { t_cut: 4.0, n_time_nodes: 50, n_paths: 64, fd_step: 0.02, dt: 4e-3 };
            PoissonSolver::new(frozen, ScalarFn::parse("0.5*v").unwrap(), cfg, None).unwrap()
        };
        let b = ScalarFn::parse("0.5*v").unwrap();
        let cfg = quick_cfg(32, 32, 4e-3);
        let m = estimate_b_tensor_psi(&chains, &solver, &b, &cfg).unwrap();
        let lambdas = [1.0, 0.25];
        for j in 0..n {
            for k in 0..n {
                let exact = if j == k {
                    beta * beta * lambdas[j] / (2.0 * (1.0 + op.alphas()[j]).powi(2))
                } else {
                    0.0
                };
                let tol = (3.0 * m.stderr[(j, k)]).max(0.1 * exact.abs()).max(2e-3);
                assert!(
                    (m.value[(j, k)] - exact).abs() < tol,
                    "({j},{k}): {} vs {exact} (tol {tol})",
                    m.value[(j, k)]
                );
            }
        }
        let ups = upsilon_from(&m.value).unwrap();
        for k in 0..n {
            let exact = beta * lambdas[k].sqrt() / (1.0 + op.alphas()[k]);
            assert!(
                (ups.upsilon[(k, k)] - exact).abs() < 0.1 * exact + 0.02,
                "Upsilon_{k}{k} = {} vs {exact}",
                ups.upsilon[(k, k)]
            );
        }
        // Reconstruction: Upsilon Upsilon^T / 2 = sym(M) up to clipping.
        let sym = (&m.value + m.value.transpose()) * 0.5;
        let recon = &ups.upsilon * ups.upsilon.transpose() * 0.5;
        assert!((recon - sym).norm() <= 1e-10 + ups.clipped_mass);
    }

    #[test]
    fn upsilon_factorization_edge_cases() {
        // Clean PSD matrix: exact square root.
        let m = DMatrix::from_row_slice(2, 2, &[0.03, 0.001, 0.001, 0.002]);
        let ups = upsilon_from(&m).unwrap();
        let recon = &ups.upsilon * ups.upsilon.transpose() * 0.5;
        assert!((recon - &m).norm() < 1e-12);
        assert_eq!(ups.clipped_mass, 0.0);

        // Slightly negative eigenvalue inside the tolerance: clipped.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]);
        let ups = upsilon_from(&m).unwrap();
        assert!(ups.clipped_mass > 0.0);
        assert_eq!(ups.upsilon[(1, 1)], 0.0);

        // Indefinite beyond tolerance: rejected with diagnostics.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        match upsilon_from(&m).unwrap_err() {
            Error::Indefinite { min_eigenvalue, tolerance } => {
                assert!(min_eigenvalue < -0.4);
                assert!(tolerance > 0.0);
            }
            other => panic!("expected indefiniteness error, got {other:?}"),
        }

        // The antisymmetric part is reported, not factorized.
        let m = DMatrix::from_row_slice(2, 2, &[0.03, 0.01, -0.01, 0.002]);
        let ups = upsilon_from(&m).unwrap();
        assert!((ups.asym_norm - (2.0f64 * 1e-4).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn drift_correction_vanishes_when_nothing_depends_on_the_slow_state() {
        // g and b free of u: the corrector cannot depend on x, and common
        // random numbers make the finite difference exactly zero.
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::unit_mode(&op, 1, 0.8).unwrap();
        let chains = make_frozen(n, "-v", 1.0, 2.0, &x, 4e-3, 53, EquationTag::FrozenChain);
        let solver = {
            let tf = Arc::new(SineTransform::default_for(&op));
            let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
            let frozen = FrozenIntegrator::new(
                tf,
                ScalarFn::parse("-v").unwrap(),
                noise,
                4e-3,
                &x,
                59,
                EquationTag::CorrectorPath,
            )
            .unwrap();
            let cfg =
                PoissonConfig { t_cut: 4.0, n_time_nodes: 40, n_paths: 16, fd_step: 0.02, dt: 4e-3 };
            PoissonSolver::new(frozen, ScalarFn::parse("0.5*v").unwrap(), cfg, None).unwrap()
        };
        let b = ScalarFn::parse("0.5*v").unwrap();
        let cfg = quick_cfg(8, 8, 4e-3);
        let (field, est) =
            estimate_drift_correction(&chains, &solver, &x, &b, &cfg, 1_000_000).unwrap();
        assert_eq!(field.coeffs(), vec![0.0; n]);
        assert_eq!(est.stderr, vec![0.0; n]);

        // b identically zero short-circuits.
        let zero = ScalarFn::parse("0").unwrap();
        let (field, _) =
            estimate_drift_correction(&chains, &solver, &x, &zero, &cfg, 1_000_000).unwrap();
        assert_eq!(field.coeffs(), vec![0.0; n]);

        // Budget guard.
        let err = estimate_drift_correction(&chains, &solver, &x, &b, &cfg, 10).unwrap_err();
        assert!(matches!(err, Error::Budget(_)), "expected budget rejection, got {err:?}");
    }

    #[test]
    fn drift_correction_matches_dense_resolvent_differentiation() {
        // g = -(1 + 0.5 tanh(u)) v couples the fast relaxation to the slow
        // state. In the truncated system the frozen drift is linear in y
        // with matrix -(diag(alpha) + C(x)), C_km(x) = w sum_xi
        // (1 + 0.5 tanh(x(xi))) e_k e_m, so the corrector of phi = beta v
        // is K(x) y with K = beta (diag(alpha) + C)^{-1}, and the exact
        // directional derivative comes from differencing the 2x2 inverse.
        let n = 2;
        let beta = 0.5;
        let op = op_pi(n);
        let x = SpectralField::new(&op, vec![0.7, -0.4]).unwrap();
        let g_src = "-(1 + 0.5*tanh(u))*v";
        let chains = make_frozen(n, g_src, 1.0, 2.0, &x, 4e-3, 61, EquationTag::FrozenChain);
        let tf = Arc::clone(chains.transform());
        let fd_step = 0.02;
        let solver = {
            let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
            let frozen = FrozenIntegrator::new(
                Arc::clone(&tf),
                ScalarFn::parse(g_src).unwrap(),
                noise,
                4e-3,
                &x,
                67,
                EquationTag::CorrectorPath,
            )
            .unwrap();
            let cfg = PoissonConfig {
                t_cut: 6.0,
                n_time_nodes: 120,
                n_paths: 24,
                fd_step,
                dt: 4e-3,
            };
            PoissonSolver::new(frozen, ScalarFn::parse("0.5*v").unwrap(), cfg, None).unwrap()
        };
        let b = ScalarFn::parse("0.5*v").unwrap();
        let cfg = quick_cfg(32, 16, 4e-3);
        let (field, est) =
            estimate_drift_correction(&chains, &solver, &x, &b, &cfg, 10_000_000).unwrap();

        // Oracle over the same invariant ensemble, via dense 2x2 inverses.
        let w = tf.quadrature_weight();
        let resolvent = |xg: &[f64]| -> DMatrix<f64> {
            let mut c = DMatrix::zeros(n, n);
            for (j, _) in xg.iter().enumerate() {
                let row = tf.basis_row(j);
                let cc = w * (1.0 + 0.5 * xg[j].tanh());
                for a in 0..n {
                    for bb in 0..n {
                        c[(a, bb)] += cc * row[a] * row[bb];
                    }
                }
            }
            for a in 0..n {
                c[(a, a)] += op.alphas()[a];
            }
            c.try_inverse().expect("resolvent invertible") * beta
        };
        let oracle = invariant_expectation(
            &chains,
            &cfg,
            n,
            |_| NemScratch::new(tf.n_grid()),
            |y, _c, _s, sc, out| {
                // bhat = beta * y exactly (b = beta v and y is band-limited).
                let nb = beta * l2(y);
                if nb < 1e-14 {
                    out.fill(0.0);
                    return Ok(());
                }
                let mut xp = x.coeffs().to_vec();
                let mut xm = x.coeffs().to_vec();
                for k in 0..n {
                    let d = fd_step * y[k] / l2(y);
                    xp[k] += d;
                    xm[k] -= d;
                }
                tf.grid_from_coeffs(&xp, &mut sc.yg);
                let kp = resolvent(&sc.yg);
                tf.grid_from_coeffs(&xm, &mut sc.yg);
                let km = resolvent(&sc.yg);
                let yv = DVector::from_column_slice(y);
                let diff = (kp - km) * yv / (2.0 * fd_step);
                for k in 0..n {
                    out[k] = nb * diff[k];
                }
                Ok(())
            },
        )
        .unwrap();
        for k in 0..n {
            let tol = 3.0 * (est.stderr[k].powi(2) + oracle.stderr[k].powi(2)).sqrt() + 2e-3;
            assert!(
                (field.coeffs()[k] - oracle.value[k]).abs() < tol,
                "mode {k}: {} vs oracle {} (tol {tol})",
                field.coeffs()[k],
                oracle.value[k]
            );
        }
        // The coupling makes the correction genuinely nonzero; make sure
        // the oracle magnitude confirms a real signal rather than two
        // noisy zeros agreeing.
        assert!(l2(&oracle.value) > 5.0 * l2(&oracle.stderr), "oracle signal drowned in noise");
    }

    #[test]
    fn aggregate_estimator_reproduces_linear_benchmark_coefficients() {
        // Full pipeline at one state on the analytically solvable setup:
        // f = cos(v), b = beta v, g = -v, sigma = 1.
        let n = 2;
        let beta = 0.5;
        let op = op_pi(n);
        let transform = Arc::new(SineTransform::default_for(&op));
        let coeffs = crate::functions::CoefficientSet::parse("cos(v)", "0.5*v", "-v", "1").unwrap();
        let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
        let inv_cfg = quick_cfg(32, 32, 4e-3);
        let pois_cfg =
            PoissonConfig { t_cut: 4.0, n_time_nodes: 50, n_paths: 48, fd_step: 0.02, dt: 4e-3 };
        let est = CoefficientEstimator::new(
            transform,
            coeffs,
            noise.clone(),
            inv_cfg,
            pois_cfg,
            71,
            1_000_000_000,
        )
        .unwrap();
        let x = SpectralField::unit_mode(&op, 1, 0.5).unwrap();
        let co = est.at(&x).unwrap();

        // sigma = 1 exact through quadrature orthonormality.
        for j in 0..n {
            for k in 0..n {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((co.sigma_bar_sq[(j, k)] - expect).abs() < 1e-8);
            }
        }
        // Neither b nor g sees the slow state: the correction is exactly 0.
        assert_eq!(co.drift_correction.coeffs(), vec![0.0; n]);
        // Green-Kubo diagonal and its factor against the closed forms.
        for k in 0..n {
            let m_exact = beta * beta * noise.lambdas()[k] / (2.0 * (1.0 + op.alphas()[k]).powi(2));
            let tol = (3.0 * co.b_tensor_psi_stderr[(k, k)]).max(0.15 * m_exact);
            assert!(
                (co.b_tensor_psi[(k, k)] - m_exact).abs() < tol,
                "M_{k}{k} = {} vs {m_exact}",
                co.b_tensor_psi[(k, k)]
            );
            let u_exact = beta * noise.lambdas()[k].sqrt() / (1.0 + op.alphas()[k]);
            assert!(
                (co.upsilon[(k, k)] - u_exact).abs() < 0.1 * u_exact + 0.02,
                "Upsilon_{k}{k} = {} vs {u_exact}",
                co.upsilon[(k, k)]
            );
            // Jackknife spread is a real number of sane magnitude.
            assert!(co.upsilon_stderr[(k, k)].is_finite());
            assert!(co.upsilon_stderr[(k, k)] < 0.5 * u_exact);
        }
        // Averaged reaction: mode-1 coefficient of e^{-V(xi)/2}.
        let tf = est.chains.transform();
        let w = tf.quadrature_weight();
        let mut oracle = 0.0;
        for (j, _) in tf.grid_points().iter().enumerate() {
            let row = tf.basis_row(j);
            let var: f64 = (0..n)
                .map(|k| noise.lambdas()[k] / (2.0 * (op.alphas()[k] + 1.0)) * row[k] * row[k])
                .sum();
            oracle += w * (-var / 2.0).exp() * row[0];
        }
        let tol = (3.0 * co.fbar_stderr[0]).max(0.02 * oracle.abs());
        assert!(
            (co.fbar.coeffs()[0] - oracle).abs() < tol,
            "fbar_1 = {} vs {oracle}",
            co.fbar.coeffs()[0]
        );

        // Replication with a different seed moves every stochastic estimate.
        let co2 = est.with_seed(72).at(&x).unwrap();
        assert_ne!(co.fbar.coeffs(), co2.fbar.coeffs());
        assert_ne!(co.b_tensor_psi[(0, 0)], co2.b_tensor_psi[(0, 0)]);
    }

    #[test]
    fn aggregate_estimator_short_circuits_without_coupling() {
        let n = 2;
        let op = op_pi(n);
        let transform = Arc::new(SineTransform::default_for(&op));
        let coeffs = crate::functions::CoefficientSet::parse("tanh(u)", "0", "-v", "0").unwrap();
        let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
        let inv_cfg = quick_cfg(4, 8, 4e-3);
        let pois_cfg =
            PoissonConfig { t_cut: 4.0, n_time_nodes: 40, n_paths: 8, fd_step: 0.02, dt: 4e-3 };
        let est =
            CoefficientEstimator::new(transform, coeffs, noise, inv_cfg, pois_cfg, 5, 1_000_000)
                .unwrap();
        let x = SpectralField::unit_mode(&op, 1, 1.0).unwrap();
        let co = est.at(&x).unwrap();
        assert_eq!(co.upsilon, DMatrix::zeros(n, n));
        assert_eq!(co.sigma_bar_sq, DMatrix::zeros(n, n));
        assert_eq!(co.drift_correction.coeffs(), vec![0.0; n]);
        // f = tanh(u) is v-free: exact invariant average with zero spread.
        assert!(co.fbar_stderr.iter().all(|s| *s < 1e-14));
    }

    #[test]
    fn green_kubo_replication_scatter_matches_reported_stderr() {
        // Four independent replications: the scatter of M_11 must be
        // consistent with the reported stderr (chi-square band).
        let n = 2;
        let op = op_pi(n);
        let x = SpectralField::zero(&op);
        let mut vals = Vec::new();
        let mut ses = Vec::new();
        for rep in 0..4u64 {
            let chains =
                make_frozen(n, "-v", 1.0, 2.0, &x, 4e-3, 100 + rep, EquationTag::FrozenChain);
            let solver = {
                let tf = Arc::new(SineTransform::default_for(&op));
                let noise = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving).unwrap();
                let frozen = FrozenIntegrator::new(
                    tf,
                    ScalarFn::parse("-v").unwrap(),
                    noise,
                    4e-3,
                    &x,
                    200 + rep,
                    EquationTag::CorrectorPath,
                )
                .unwrap();
                let cfg = PoissonConfig {
                    t_cut: 4.0,
                    n_time_nodes: 50,
                    n_paths: 32,
                    fd_step: 0.02,
                    dt: 4e-3,
                };
                PoissonSolver::new(frozen, ScalarFn::parse("0.5*v").unwrap(), cfg, None).unwrap()
            };
            let b = ScalarFn::parse("0.5*v").unwrap();
            let m = estimate_b_tensor_psi(&chains, &solver, &b, &quick_cfg(16, 32, 4e-3)).unwrap();
            vals.push(m.value[(0, 0)]);
            ses.push(m.stderr[(0, 0)]);
        }
        let mean = vals.iter().sum::<f64>() / 4.0;
        let chi2: f64 = vals
            .iter()
            .zip(&ses)
            .map(|(v, s)| ((v - mean) / s).powi(2))
            .sum();
        // Chi-square with 3 dof: central 99.8% band, generous on purpose.
        assert!(
            (0.02..=16.0).contains(&chi2),
            "replication scatter chi2 = {chi2} with values {vals:?} and stderr {ses:?}"
        );
    }
}
