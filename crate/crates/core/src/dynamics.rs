//! Time integration of the truncated slow-fast system and of the frozen
//! fast equation.
//!
//! The scheme is an exponential Euler step: the stiff diagonal linear part
//! is integrated exactly per mode, reaction drifts get the per-mode weight
//! `(1 - e^{-alpha h})/alpha`, and the stochastic convolution is sampled
//! with its exact per-mode variance `lambda (1 - e^{-2 alpha h})/(2 alpha)`.
//! The stiffness of `A` therefore imposes no step restriction; only the
//! reaction terms do.
//!
//! Within one macro step of size `h` the fast variable is advanced in
//! rescaled time `tau = t/eps` by `m_eff = ceil(m/eps)` substeps of size
//! `h/(eps m_eff)`. The singular `eps^{-1/2} b` drift of the slow equation
//! is evaluated at the substep average of the fast states: a single
//! endpoint sample would make the large drift integrate incoherently and
//! visibly corrupt the weak error, while the average approximates the time
//! integral of `b` over the macro window.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::functions::{grid_extrema, CoefficientSet, EvalWorkspace, ScalarFn, Var};
use crate::noise::{EquationTag, NoiseSpec, RngStream};
use crate::spectral::{OperatorSpec, SineTransform, SpectralField};

/// Joint state of the coupled system.
#[derive(Debug, Clone)]
pub struct SlowFastState {
    pub x: SpectralField,
    pub y: SpectralField,
    pub t: f64,
}

/// Step-size and horizon parameters of the coupled integrator.
#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Macro step `h` for the slow equation.
    pub dt_macro: f64,
    /// Minimum fast substeps per unit of rescaled time; the actual count
    /// per macro step is `ceil(m/eps)`.
    pub micro_substeps_per_eps: usize,
    /// Scale separation parameter.
    pub epsilon: f64,
    /// Final time; must be an integer multiple of `dt_macro`.
    pub t_end: f64,
    /// Norm threshold beyond which the integration reports blow-up.
    pub blowup_limit: f64,
    /// Record every this-many macro steps when producing trajectories.
    pub thinning: usize,
}

impl IntegratorConfig {
    pub fn new(dt_macro: f64, epsilon: f64, t_end: f64) -> Self {
        Self {
            dt_macro,
            micro_substeps_per_eps: 1,
            epsilon,
            t_end,
            blowup_limit: 1e6,
            thinning: 10,
        }
    }

    /// Fast substeps per macro step.
    pub fn m_eff(&self) -> usize {
        (self.micro_substeps_per_eps as f64 / self.epsilon).ceil() as usize
    }

    /// Fast substep in rescaled time.
    pub fn delta_tau(&self) -> f64 {
        self.dt_macro / (self.epsilon * self.m_eff() as f64)
    }

    pub fn n_macro_steps(&self) -> usize {
        (self.t_end / self.dt_macro).round() as usize
    }
}

/// Largest stable-by-margin explicit substep for the fast reaction:
/// `1 / (2 (alpha_max + sup |d_v g|))`, the derivative bound estimated by
/// sampling the symbolic derivative on `[-4, 4]^2`.
pub fn fast_resolution_bound(op: &OperatorSpec, g: &ScalarFn) -> Result<f64> {
    let dg = g.differentiate(Var::V);
    let (lo, hi) = grid_extrema(&dg, 4.0, 17)?;
    let sup = lo.abs().max(hi.abs());
    Ok(1.0 / (2.0 * (op.alpha_max() + sup)))
}

/// Validates step sizes and horizon against the operator and coefficients.
/// Hard violations error; degenerate-but-legal settings come back as
/// warnings (currently: `epsilon >= 1`, i.e. no scale separation).
pub fn validate_integrator_config(
    cfg: &IntegratorConfig,
    op: &OperatorSpec,
    coeffs: &CoefficientSet,
) -> Result<Vec<String>> {
    if !(cfg.dt_macro > 0.0) || !cfg.dt_macro.is_finite() {
        return Err(Error::Config(format!("dt_macro must be positive, got {}", cfg.dt_macro)));
    }
    if !(cfg.t_end > 0.0) || !cfg.t_end.is_finite() {
        return Err(Error::Config(format!("t_end must be positive, got {}", cfg.t_end)));
    }
    if cfg.micro_substeps_per_eps == 0 {
        return Err(Error::Config("micro_substeps_per_eps must be at least 1".into()));
    }
    if cfg.thinning == 0 {
        return Err(Error::Config("thinning must be at least 1".into()));
    }
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    if !(cfg.blowup_limit > 0.0) {
        return Err(Error::Config("blowup_limit must be positive".into()));
    }
    let steps = cfg.t_end / cfg.dt_macro;
    if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) || steps.round() < 1.0 {
        return Err(Error::Config(format!(
            "t_end = {} is not a positive integer multiple of dt_macro = {}",
            cfg.t_end, cfg.dt_macro
        )));
    }
    let bound = fast_resolution_bound(op, &coeffs.g)?;
    let dtau = cfg.delta_tau();
    if dtau > bound {
        return Err(Error::Config(format!(
            "fast substep {dtau:.3e} exceeds the relaxation bound {bound:.3e}; \
             shrink dt_macro or raise micro_substeps_per_eps"
        )));
    }
    let mut warnings = Vec::new();
    if cfg.epsilon >= 1.0 {
        warnings.push(format!(
            "epsilon = {} >= 1: no scale separation; averaging results are not meaningful",
            cfg.epsilon
        ));
    }
    Ok(warnings)
}

/// Per-mode exponential-integrator tables for one step size:
/// `decay_k = e^{-alpha_k dt}`, `drift_k = (1 - e^{-alpha_k dt})/alpha_k`,
/// `noise_sd_k = sqrt(lambda_k (1 - e^{-2 alpha_k dt})/(2 alpha_k))`.
#[derive(Debug, Clone)]
pub(crate) struct ExpTables {
    pub decay: Vec<f64>,
    pub drift: Vec<f64>,
    pub noise_sd: Vec<f64>,
}

impl ExpTables {
    pub fn new(op: &OperatorSpec, lambdas: &[f64], dt: f64) -> Self {
        let mut decay = Vec::with_capacity(op.n_modes());
        let mut drift = Vec::with_capacity(op.n_modes());
        let mut noise_sd = Vec::with_capacity(op.n_modes());
        for (a, l) in op.alphas().iter().zip(lambdas) {
            decay.push((-a * dt).exp());
            drift.push(-(-a * dt).exp_m1() / a);
            noise_sd.push((l * -(-2.0 * a * dt).exp_m1() / (2.0 * a)).sqrt());
        }
        Self { decay, drift, noise_sd }
    }
}

/// Reusable per-path scratch buffers. One per worker thread is enough;
/// integrators never share them.
#[derive(Debug, Clone)]
pub struct PathWorkspace {
    eval: EvalWorkspace,
    xg: Vec<f64>,
    yg: Vec<f64>,
    y_start_g: Vec<f64>,
    grid_a: Vec<f64>,
    grid_b: Vec<f64>,
    spec_a: Vec<f64>,
    spec_b: Vec<f64>,
    z: Vec<f64>,
    y_sum: Vec<f64>,
}

impl PathWorkspace {
    pub fn new(n_modes: usize, n_grid: usize) -> Self {
        Self {
            eval: EvalWorkspace::new(),
            xg: vec![0.0; n_grid],
            yg: vec![0.0; n_grid],
            y_start_g: vec![0.0; n_grid],
            grid_a: vec![0.0; n_grid],
            grid_b: vec![0.0; n_grid],
            spec_a: vec![0.0; n_modes],
            spec_b: vec![0.0; n_modes],
            z: vec![0.0; n_modes],
            y_sum: vec![0.0; n_modes],
        }
    }
}

fn check_field(coeffs: &[f64], limit: f64, t: f64, which: &str) -> Result<()> {
    let mut sumsq = 0.0;
    for (k, c) in coeffs.iter().enumerate() {
        if !c.is_finite() {
            return Err(Error::BlowUp {
                t,
                mode: k + 1,
                detail: format!("{which} coefficient is not finite"),
            });
        }
        sumsq += c * c;
    }
    if sumsq.sqrt() > limit {
        let (mode, _) = coeffs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty state");
        return Err(Error::BlowUp {
            t,
            mode: mode + 1,
            detail: format!("{which} norm {:.3e} exceeds blow-up threshold {limit:.1e}", sumsq.sqrt()),
        });
    }
    Ok(())
}

fn same_operator(a: &Arc<OperatorSpec>, b: &Arc<OperatorSpec>) -> bool {
    Arc::ptr_eq(a, b)
        || (a.domain_length() == b.domain_length() && a.alphas() == b.alphas())
}

/// Exponential Euler integrator for the coupled pair. Immutable once
/// built; paths are advanced through caller-owned state and workspace, so
/// one integrator serves any number of worker threads.
#[derive(Debug, Clone)]
pub struct SlowFastIntegrator {
    transform: Arc<SineTransform>,
    coeffs: CoefficientSet,
    noise1: NoiseSpec,
    noise2: NoiseSpec,
    cfg: IntegratorConfig,
    seed: u64,
    macro_tables: ExpTables,
    micro_tables: ExpTables,
    m_eff: usize,
    inv_sqrt_eps: f64,
    sigma_const: Option<f64>,
    f_zero: bool,
    b_zero: bool,
    g_zero: bool,
    /// `(c0, cu, cv)` when g is affine. Affine reactions commute with the
    /// mode projection, so the fast-line Nemytskii step collapses to
    /// coefficient arithmetic — same scheme, no grid round trip.
    g_affine: Option<(f64, f64, f64)>,
    /// Mode coefficients of the constant-one grid function (the projected
    /// constant term of an affine reaction).
    one_hat: Vec<f64>,
    warnings: Vec<String>,
}

impl SlowFastIntegrator {
    pub fn new(
        transform: Arc<SineTransform>,
        coeffs: CoefficientSet,
        noise1: NoiseSpec,
        noise2: NoiseSpec,
        cfg: IntegratorConfig,
        seed: u64,
    ) -> Result<Self> {
        let op = transform.op();
        if noise1.n_modes() != op.n_modes() || noise2.n_modes() != op.n_modes() {
            return Err(Error::Config(format!(
                "noise spectra must retain {} modes like the operator",
                op.n_modes()
            )));
        }
        let warnings = validate_integrator_config(&cfg, op, &coeffs)?;
        let macro_tables = ExpTables::new(op, noise1.lambdas(), cfg.dt_macro);
        let micro_tables = ExpTables::new(op, noise2.lambdas(), cfg.delta_tau());
        let m_eff = cfg.m_eff();
        let inv_sqrt_eps = 1.0 / cfg.epsilon.sqrt();
        let g_affine = coeffs.g.affine_parts();
        let mut one_hat = vec![0.0; op.n_modes()];
        if g_affine.is_some() {
            transform.coeffs_from_grid(&vec![1.0; transform.n_grid()], &mut one_hat);
        }
        Ok(Self {
            sigma_const: coeffs.sigma.as_constant(),
            f_zero: coeffs.f.is_zero(),
            b_zero: coeffs.b.is_zero(),
            g_zero: coeffs.g.is_zero(),
            g_affine,
            one_hat,
            transform,
            coeffs,
            noise1,
            noise2,
            cfg,
            seed,
            macro_tables,
            micro_tables,
            m_eff,
            inv_sqrt_eps,
            warnings,
        })
    }

    pub fn op(&self) -> &Arc<OperatorSpec> {
        self.transform.op()
    }

    pub fn transform(&self) -> &Arc<SineTransform> {
        &self.transform
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Validation warnings collected at construction.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn workspace(&self) -> PathWorkspace {
        PathWorkspace::new(self.op().n_modes(), self.transform.n_grid())
    }

    pub fn initial_state(&self, x0: &SpectralField, y0: &SpectralField) -> Result<SlowFastState> {
        if !same_operator(x0.op(), self.op()) || !same_operator(y0.op(), self.op()) {
            return Err(Error::Config("initial fields use a different operator".into()));
        }
        Ok(SlowFastState { x: x0.clone(), y: y0.clone(), t: 0.0 })
    }

    /// One macro step. `macro_index` is the zero-based step counter along
    /// this path: together with `path` it keys every noise draw, so a path
    /// is reproducible from `(seed, path)` alone.
    pub fn step(
        &self,
        state: &mut SlowFastState,
        path: u64,
        macro_index: u64,
        ws: &mut PathWorkspace,
    ) -> Result<()> {
        let n = self.op().n_modes();
        let h = self.cfg.dt_macro;
        let t_next = state.t + h;

        self.transform.grid_from_coeffs(state.x.coeffs(), &mut ws.xg);
        // Non-constant noise amplitude is frozen at the step start, which
        // is what makes the exact convolution variance correct to leading
        // order; the fast-state grid must be captured before the substep
        // loop advances it.
        if self.sigma_const.is_none() && !self.noise1.is_off() {
            self.transform.grid_from_coeffs(state.y.coeffs(), &mut ws.y_start_g);
        }

        // Fast substep loop in rescaled time; left-endpoint states
        // accumulate into the macro average that feeds the slow drift.
        ws.y_sum.fill(0.0);
        let noise2_on = !self.noise2.is_off();
        // Affine g: the slow-dependent and constant parts of the projected
        // reaction are fixed across the macro step.
        let g_affine = if self.g_zero { None } else { self.g_affine };
        if let Some((c0, cu, _)) = g_affine {
            let x = state.x.coeffs();
            for k in 0..n {
                ws.spec_a[k] = cu * x[k] + c0 * self.one_hat[k];
            }
        }
        {
            let y = state.y.coeffs_mut();
            for j in 0..self.m_eff {
                for k in 0..n {
                    ws.y_sum[k] += y[k];
                }
                if !self.g_zero && g_affine.is_none() {
                    self.transform.grid_from_coeffs(y, &mut ws.yg);
                    self.coeffs.g.eval_grid(&ws.xg, &ws.yg, &mut ws.eval, &mut ws.grid_a)?;
                    self.transform.coeffs_from_grid(&ws.grid_a, &mut ws.spec_a);
                }
                if noise2_on {
                    RngStream::new(
                        self.seed,
                        path,
                        EquationTag::FastDriving,
                        macro_index * self.m_eff as u64 + j as u64,
                    )
                    .standard_normals_into(&mut ws.z);
                }
                match g_affine {
                    Some((_, _, cv)) => {
                        for k in 0..n {
                            let mut val = self.micro_tables.decay[k] * y[k]
                                + self.micro_tables.drift[k] * (ws.spec_a[k] + cv * y[k]);
                            if noise2_on {
                                val += self.micro_tables.noise_sd[k] * ws.z[k];
                            }
                            y[k] = val;
                        }
                    }
                    None => {
                        for k in 0..n {
                            let mut val = self.micro_tables.decay[k] * y[k];
                            if !self.g_zero {
                                val += self.micro_tables.drift[k] * ws.spec_a[k];
                            }
                            if noise2_on {
                                val += self.micro_tables.noise_sd[k] * ws.z[k];
                            }
                            y[k] = val;
                        }
                    }
                }
                check_field(y, self.cfg.blowup_limit, t_next, "fast")?;
            }
            for k in 0..n {
                ws.y_sum[k] /= self.m_eff as f64;
            }
        }

        // Slow reaction drift f + eps^{-1/2} b at (X, substep-averaged Y).
        let have_drift = !self.f_zero || !self.b_zero;
        if have_drift {
            self.transform.grid_from_coeffs(&ws.y_sum, &mut ws.yg);
            if self.f_zero {
                ws.grid_a.fill(0.0);
            } else {
                self.coeffs.f.eval_grid(&ws.xg, &ws.yg, &mut ws.eval, &mut ws.grid_a)?;
            }
            if !self.b_zero {
                self.coeffs.b.eval_grid(&ws.xg, &ws.yg, &mut ws.eval, &mut ws.grid_b)?;
                for (a, b) in ws.grid_a.iter_mut().zip(&ws.grid_b) {
                    *a += self.inv_sqrt_eps * b;
                }
            }
            self.transform.coeffs_from_grid(&ws.grid_a, &mut ws.spec_a);
        }

        // Exactly convolved slow noise, then the amplitude as a pointwise
        // grid multiplier (skipped entirely when sigma is constant).
        let noise1_on = !self.noise1.is_off();
        if noise1_on {
            RngStream::new(self.seed, path, EquationTag::SlowDriving, macro_index)
                .standard_normals_into(&mut ws.z);
            for k in 0..n {
                ws.spec_b[k] = self.macro_tables.noise_sd[k] * ws.z[k];
            }
            match self.sigma_const {
                Some(c) => {
                    if c != 1.0 {
                        for s in ws.spec_b.iter_mut() {
                            *s *= c;
                        }
                    }
                }
                None => {
                    self.transform.grid_from_coeffs(&ws.spec_b, &mut ws.grid_a);
                    self.coeffs.sigma.eval_grid(
                        &ws.xg,
                        &ws.y_start_g,
                        &mut ws.eval,
                        &mut ws.grid_b,
                    )?;
                    for (a, s) in ws.grid_a.iter_mut().zip(&ws.grid_b) {
                        *a *= s;
                    }
                    self.transform.coeffs_from_grid(&ws.grid_a, &mut ws.spec_b);
                }
            }
        }

        let x = state.x.coeffs_mut();
        for k in 0..n {
            let mut val = self.macro_tables.decay[k] * x[k];
            if have_drift {
                val += self.macro_tables.drift[k] * ws.spec_a[k];
            }
            if noise1_on {
                val += ws.spec_b[k];
            }
            x[k] = val;
        }
        check_field(x, self.cfg.blowup_limit, t_next, "slow")?;
        state.t = t_next;
        Ok(())
    }

    /// Full path, recorded every `thinning` macro steps (initial and final
    /// states always included). Deterministic in `(seed, path)`.
    pub fn simulate_path(
        &self,
        x0: &SpectralField,
        y0: &SpectralField,
        path: u64,
    ) -> Result<Vec<SlowFastState>> {
        let mut ws = self.workspace();
        let mut state = self.initial_state(x0, y0)?;
        let n_steps = self.cfg.n_macro_steps();
        let mut out = Vec::with_capacity(n_steps / self.cfg.thinning + 2);
        out.push(state.clone());
        for i in 0..n_steps {
            self.step(&mut state, path, i as u64, &mut ws)?;
            state.t = (i + 1) as f64 * self.cfg.dt_macro;
            if (i + 1) % self.cfg.thinning == 0 || i + 1 == n_steps {
                out.push(state.clone());
            }
        }
        Ok(out)
    }

    /// Endpoint only, with a caller-provided workspace for reuse across an
    /// ensemble.
    pub fn final_state(
        &self,
        x0: &SpectralField,
        y0: &SpectralField,
        path: u64,
        ws: &mut PathWorkspace,
    ) -> Result<SlowFastState> {
        let mut state = self.initial_state(x0, y0)?;
        let n_steps = self.cfg.n_macro_steps();
        for i in 0..n_steps {
            self.step(&mut state, path, i as u64, ws)?;
            state.t = (i + 1) as f64 * self.cfg.dt_macro;
        }
        Ok(state)
    }
}

/// Integrator for the fast equation with the slow argument frozen, in
/// plain (unrescaled) time. This is the sampler behind invariant-measure
/// estimation and corrector path integrals.
#[derive(Debug, Clone)]
pub struct FrozenIntegrator {
    transform: Arc<SineTransform>,
    g: ScalarFn,
    noise2: NoiseSpec,
    dt: f64,
    seed: u64,
    tag: EquationTag,
    tables: ExpTables,
    x_grid: Vec<f64>,
    g_zero: bool,
    /// `(c0, cu, cv)` for affine g, with the projected slow-plus-constant
    /// part precomputed in `affine_base` (the slow argument is frozen, so
    /// it never changes between steps).
    g_affine: Option<(f64, f64, f64)>,
    affine_base: Vec<f64>,
    one_hat: Vec<f64>,
    blowup_limit: f64,
}

fn affine_base_for(
    g_affine: &Option<(f64, f64, f64)>,
    x: &SpectralField,
    one_hat: &[f64],
) -> Vec<f64> {
    match g_affine {
        Some((c0, cu, _)) => x
            .coeffs()
            .iter()
            .zip(one_hat)
            .map(|(xk, ok)| cu * xk + c0 * ok)
            .collect(),
        None => Vec::new(),
    }
}

impl FrozenIntegrator {
    pub fn new(
        transform: Arc<SineTransform>,
        g: ScalarFn,
        noise2: NoiseSpec,
        dt: f64,
        x: &SpectralField,
        seed: u64,
        tag: EquationTag,
    ) -> Result<Self> {
        let op = transform.op();
        if noise2.n_modes() != op.n_modes() {
            return Err(Error::Config("noise spectrum and operator mode counts differ".into()));
        }
        if !same_operator(x.op(), op) {
            return Err(Error::Config("frozen slow field uses a different operator".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("frozen step must be positive, got {dt}")));
        }
        let bound = fast_resolution_bound(op, &g)?;
        if dt > bound {
            return Err(Error::Config(format!(
                "frozen step {dt:.3e} exceeds the relaxation bound {bound:.3e}"
            )));
        }
        let tables = ExpTables::new(op, noise2.lambdas(), dt);
        let x_grid = transform.to_grid(x);
        let g_affine = if g.is_zero() { None } else { g.affine_parts() };
        let mut one_hat = vec![0.0; op.n_modes()];
        if g_affine.is_some() {
            transform.coeffs_from_grid(&vec![1.0; transform.n_grid()], &mut one_hat);
        }
        let affine_base = affine_base_for(&g_affine, x, &one_hat);
        Ok(Self {
            g_zero: g.is_zero(),
            transform,
            g,
            noise2,
            dt,
            seed,
            tag,
            tables,
            x_grid,
            g_affine,
            affine_base,
            one_hat,
            blowup_limit: 1e6,
        })
    }

    pub fn op(&self) -> &Arc<OperatorSpec> {
        self.transform.op()
    }

    pub fn transform(&self) -> &Arc<SineTransform> {
        &self.transform
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn reaction(&self) -> &ScalarFn {
        &self.g
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise2
    }

    /// Grid values of the frozen slow argument.
    pub fn x_grid(&self) -> &[f64] {
        &self.x_grid
    }

    /// Same dynamics, step tables, seed, and stream tag with the frozen
    /// slow argument replaced. Because the noise streams are untouched,
    /// two such integrators driven with the same path ids see identical
    /// increments: exactly the common-random-numbers coupling that makes
    /// finite differences in the slow argument low-variance.
    pub fn with_slow_field(&self, x: &SpectralField) -> Result<Self> {
        if !same_operator(x.op(), self.op()) {
            return Err(Error::Config("replacement slow field uses a different operator".into()));
        }
        let mut out = self.clone();
        out.x_grid = self.transform.to_grid(x);
        out.affine_base = affine_base_for(&self.g_affine, x, &self.one_hat);
        Ok(out)
    }

    /// Same dynamics with a different stream seed: independent randomness,
    /// identical physics. Used to spawn nested estimators.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out
    }

    pub fn workspace(&self) -> PathWorkspace {
        PathWorkspace::new(self.op().n_modes(), self.transform.n_grid())
    }

    /// One step of the frozen equation acting on raw mode coefficients.
    pub fn step(
        &self,
        y: &mut [f64],
        path: u64,
        step_index: u64,
        ws: &mut PathWorkspace,
    ) -> Result<()> {
        let n = self.op().n_modes();
        let noise_on = !self.noise2.is_off();
        if noise_on {
            RngStream::new(self.seed, path, self.tag, step_index).standard_normals_into(&mut ws.z);
        }
        if let Some((_, _, cv)) = self.g_affine {
            for k in 0..n {
                let mut val = self.tables.decay[k] * y[k]
                    + self.tables.drift[k] * (self.affine_base[k] + cv * y[k]);
                if noise_on {
                    val += self.tables.noise_sd[k] * ws.z[k];
                }
                y[k] = val;
            }
            return check_field(y, self.blowup_limit, (step_index + 1) as f64 * self.dt, "frozen fast");
        }
        if !self.g_zero {
            self.transform.grid_from_coeffs(y, &mut ws.yg);
            self.g.eval_grid(&self.x_grid, &ws.yg, &mut ws.eval, &mut ws.grid_a)?;
            self.transform.coeffs_from_grid(&ws.grid_a, &mut ws.spec_a);
        }
        for k in 0..n {
            let mut val = self.tables.decay[k] * y[k];
            if !self.g_zero {
                val += self.tables.drift[k] * ws.spec_a[k];
            }
            if noise_on {
                val += self.tables.noise_sd[k] * ws.z[k];
            }
            y[k] = val;
        }
        check_field(y, self.blowup_limit, (step_index + 1) as f64 * self.dt, "frozen fast")
    }

    /// Advances `y` by `n_steps`, continuing the per-path step counter from
    /// `start_step`; returns the next counter value.
    pub fn evolve(
        &self,
        y: &mut [f64],
        n_steps: u64,
        path: u64,
        start_step: u64,
        ws: &mut PathWorkspace,
    ) -> Result<u64> {
        for s in 0..n_steps {
            self.step(y, path, start_step + s, ws)?;
        }
        Ok(start_step + n_steps)
    }
}
