//! Experiment configuration: a strict JSON schema and its resolution into
//! live objects.
//!
//! Unknown keys anywhere in the document are errors — a typo must never
//! silently fall back to a default. Optional blocks have deterministic
//! defaults derived from the rest of the document; [`resolve`] fills every
//! default in and returns both the live objects and a normalized copy of
//! the config, so the emitted "resolved config" re-runs to identical
//! results.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{CoefficientSet, ScalarFn};
use crate::homogenize::InvariantSamplerConfig;
use crate::noise::{NoiseRole, NoiseSpec};
use crate::spectral::{OperatorSpec, SineTransform, SpectralField};

use super::functional::Functional;

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub operator: OperatorConfig,
    pub coefficients: CoefficientsConfig,
    pub noise: NoiseBlock,
    pub initial: InitialConfig,
    /// Scale-separation grid, strictly decreasing, each in (0, 1].
    pub epsilons: Vec<f64>,
    pub t_end: f64,
    /// Paths per epsilon for ensemble estimates.
    pub n_paths: usize,
    /// Optional per-epsilon override of `n_paths` (same length as
    /// `epsilons`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths_per_eps: Option<Vec<usize>>,
    pub functional: FunctionalConfig,
    pub seed: u64,
    /// Pre-registered acceptance band `[lo, hi]` for the fitted
    /// convergence exponent; the weak-error report states whether the
    /// fitted slope landed inside it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_band: Option<[f64; 2]>,
    /// Evaluate the weak error at this many evenly spaced times up to
    /// `t_end` and report the per-epsilon supremum (cost grows
    /// proportionally). Omitted or 1: the final time only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poisson: Option<PoissonBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<LimitBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_scan: Option<MomentBlock>,
    /// Slow states at which averaged coefficients are estimated; defaults
    /// to the initial slow state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_states: Option<Vec<FieldInit>>,
    /// Output directory; overridable from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub n_modes: usize,
    pub domain_length: f64,
    /// Explicit positive non-decreasing eigenvalues replacing the
    /// interval-Laplacian spectrum (length must equal `n_modes`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    pub f: String,
    pub b: String,
    pub g: String,
    pub sigma: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub w1: NoiseConfig,
    pub w2: NoiseConfig,
    /// Spectrum slot for the emergent noise; only the truncated
    /// cylindrical choice (or "off") is meaningful, and it is the default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wtilde: Option<NoiseConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// "rule" (lambda0 * k^-decay_r), "explicit", "off", or "cylindrical".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Optional redundancy check: must match the slot this spec occupies
    /// ("W1", "W2", or "Wtilde").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x0: FieldInit,
    pub y0: FieldInit,
}

/// Initial field: either explicit mode coefficients (zero-padded to the
/// retained count) or an expression of the space variable, written in `u`
/// and projected onto the basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldInit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_modes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<usize>>,
}

fn default_eps_divisor() -> f64 {
    50.0
}
fn default_micro() -> usize {
    1
}
fn default_blowup() -> f64 {
    1e6
}
fn default_thinning() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    /// Macro step per epsilon: `h = t_end / ceil(t_end * eps_divisor / eps)`,
    /// the largest step with `h <= eps / eps_divisor` and an integer step
    /// count.
    #[serde(default = "default_eps_divisor")]
    pub eps_divisor: f64,
    #[serde(default = "default_micro")]
    pub micro_substeps_per_eps: usize,
    #[serde(default = "default_blowup")]
    pub blowup_limit: f64,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        Self {
            eps_divisor: default_eps_divisor(),
            micro_substeps_per_eps: default_micro(),
            blowup_limit: default_blowup(),
            thinning: default_thinning(),
        }
    }
}

/// Invariant-measure sampler overrides; anything omitted falls back to the
/// operator-derived defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinning: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_chains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

/// Corrector-solver overrides; anything omitted falls back to defaults
/// derived from the operator and the fast reaction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cut: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_time_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

fn default_provider() -> String {
    "analytic".into()
}
fn default_n_quad() -> usize {
    32
}
fn default_budget() -> u64 {
    2_000_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitBlock {
    /// Coefficient provider for the reduced equation: "analytic" (closed
    /// forms, linear benchmark only), "gauss_hermite" (quadrature
    /// averages, uncoupled case), or "monte_carlo" (nested estimation,
    /// fully general).
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_every: Option<u64>,
    /// Ensemble size of the shared limit-side estimate; defaults to
    /// 5x the per-epsilon path count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
    /// Cap on nested corrector solves per coefficient query
    /// (monte_carlo provider only).
    #[serde(default = "default_budget")]
    pub budget: u64,
}

impl Default for LimitBlock {
    fn default() -> Self {
        Self {
            provider: default_provider(),
            dt: None,
            refresh_every: None,
            n_paths: None,
            n_quad: default_n_quad(),
            budget: default_budget(),
        }
    }
}

fn default_gamma() -> f64 {
    0.25
}
fn default_vartheta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationBlock {
    /// Smoothing order probed by the slow-noise regularity check; must lie
    /// in [0, 1/2).
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Exponent parameter of the fast-gap integrability check.
    #[serde(default = "default_vartheta")]
    pub vartheta: f64,
    /// Horizon for both checks; defaults to `t_end`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_check: Option<f64>,
}

impl Default for ValidationBlock {
    fn default() -> Self {
        Self { gamma: default_gamma(), vartheta: default_vartheta(), t_check: None }
    }
}

fn default_gammas() -> Vec<f64> {
    vec![0.25, 0.75]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentBlock {
    /// Fractional-power orders of the slow-moment scan. Orders at or above
    /// 1/2 are legal but tagged as outside the uniform-bound range.
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Observation times; default `{t_end/4, t_end/2, t_end}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
}

impl Default for MomentBlock {
    fn default() -> Self {
        Self { gammas: default_gammas(), times: None, n_paths: None }
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Provider selector for the reduced equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Analytic,
    GaussHermite,
    MonteCarlo,
}

/// Fully resolved limit-side settings.
#[derive(Debug, Clone)]
pub struct LimitSettings {
    pub provider: ProviderKind,
    pub dt: f64,
    pub refresh_every: u64,
    pub n_paths: usize,
    pub n_quad: usize,
    pub budget: u64,
}

/// Fully resolved validation settings.
#[derive(Debug, Clone, Copy)]
pub struct ValidationSettings {
    pub gamma: f64,
    pub vartheta: f64,
    pub t_check: f64,
}

/// Live objects built from an [`ExperimentConfig`], plus the normalized
/// copy of the config with every default spelled out.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub op: Arc<OperatorSpec>,
    pub transform: Arc<SineTransform>,
    pub coeffs: CoefficientSet,
    pub w1: NoiseSpec,
    pub w2: NoiseSpec,
    pub wtilde: NoiseSpec,
    pub x0: SpectralField,
    pub y0: SpectralField,
    /// Slow states for coefficient estimation; `[x0]` unless overridden.
    pub eval_states: Vec<SpectralField>,
    pub functional: Functional,
    pub epsilons: Vec<f64>,
    pub t_end: f64,
    pub n_paths_per_eps: Vec<usize>,
    pub seed: u64,
    pub slope_band: Option<[f64; 2]>,
    /// Number of evenly spaced check times for the weak error (1 = final
    /// time only).
    pub sup_points: usize,
    pub integrator: IntegratorBlock,
    pub sampler: InvariantSamplerConfig,
    pub poisson: PoissonBlock,
    pub limit: LimitSettings,
    pub validation: ValidationSettings,
    pub moment: MomentBlock,
    /// Advisory findings collected during resolution (boundedness lint on
    /// coefficient and initial-data expressions).
    pub lint_warnings: Vec<String>,
}

impl Resolved {
    /// Largest macro step with `h <= eps/eps_divisor` and an integral
    /// number of steps over the horizon.
    pub fn macro_step(&self, eps: f64) -> f64 {
        let raw = self.t_end * self.integrator.eps_divisor / eps;
        let n = if (raw - raw.round()).abs() < 1e-9 * raw.max(1.0) {
            raw.round()
        } else {
            raw.ceil()
        };
        self.t_end / n
    }

    /// Coupled-integrator settings for one epsilon.
    pub fn integrator_config(&self, eps: f64) -> crate::dynamics::IntegratorConfig {
        crate::dynamics::IntegratorConfig {
            dt_macro: self.macro_step(eps),
            micro_substeps_per_eps: self.integrator.micro_substeps_per_eps,
            epsilon: eps,
            t_end: self.t_end,
            blowup_limit: self.integrator.blowup_limit,
            thinning: self.integrator.thinning,
        }
    }

    /// Corrector configuration: config overrides on top of defaults
    /// derived from the operator and fast reaction. Fails when the frozen
    /// dynamics are not dissipative (no defaults exist then).
    pub fn poisson_config(&self) -> Result<crate::homogenize::PoissonConfig> {
        let mut cfg = crate::homogenize::PoissonConfig::default_for(&self.op, &self.coeffs.g)?;
        let b = &self.poisson;
        if let Some(v) = b.t_cut {
            cfg.t_cut = v;
        }
        if let Some(v) = b.n_time_nodes {
            cfg.n_time_nodes = v;
        }
        if let Some(v) = b.n_paths {
            cfg.n_paths = v;
        }
        if let Some(v) = b.fd_step {
            cfg.fd_step = v;
        }
        if let Some(v) = b.dt {
            cfg.dt = v;
        }
        cfg.validate(&self.op, &self.coeffs.g)?;
        Ok(cfg)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve_operator(cfg: &OperatorConfig) -> Result<Arc<OperatorSpec>> {
    match &cfg.eigenvalues {
        Some(vals) => {
            if vals.len() != cfg.n_modes {
                return Err(bad(format!(
                    "operator lists {} eigenvalues but declares n_modes = {}",
                    vals.len(),
                    cfg.n_modes
                )));
            }
            OperatorSpec::from_eigenvalues(cfg.domain_length, vals.clone())
        }
        None => OperatorSpec::dirichlet_laplacian(cfg.n_modes, cfg.domain_length),
    }
}

fn role_name(role: NoiseRole) -> &'static str {
    match role {
        NoiseRole::SlowDriving => "W1",
        NoiseRole::FastDriving => "W2",
        NoiseRole::Emergent => "Wtilde",
    }
}

fn resolve_noise(slot: NoiseRole, cfg: &NoiseConfig, n_modes: usize) -> Result<NoiseSpec> {
    if let Some(role) = &cfg.role {
        if role != role_name(slot) {
            return Err(bad(format!(
                "noise slot {} declares role {role:?}",
                role_name(slot)
            )));
        }
    }
    let no = |field: &str, present: bool| -> Result<()> {
        if present {
            Err(bad(format!("noise kind {:?} does not take {field}", cfg.kind)))
        } else {
            Ok(())
        }
    };
    match cfg.kind.as_str() {
        "rule" => {
            no("values", cfg.values.is_some())?;
            let lambda0 = cfg
                .lambda0
                .ok_or_else(|| bad("rule spectrum needs lambda0"))?;
            let decay_r = cfg
                .decay_r
                .ok_or_else(|| bad("rule spectrum needs decay_r"))?;
            NoiseSpec::rule(lambda0, decay_r, n_modes, slot)
        }
        "explicit" => {
            no("lambda0", cfg.lambda0.is_some())?;
            no("decay_r", cfg.decay_r.is_some())?;
            let values = cfg
                .values
                .clone()
                .ok_or_else(|| bad("explicit spectrum needs values"))?;
            if values.len() != n_modes {
                return Err(bad(format!(
                    "explicit spectrum lists {} values for {} modes",
                    values.len(),
                    n_modes
                )));
            }
            NoiseSpec::explicit(values, slot)
        }
        "off" => {
            no("lambda0", cfg.lambda0.is_some())?;
            no("decay_r", cfg.decay_r.is_some())?;
            no("values", cfg.values.is_some())?;
            Ok(NoiseSpec::off(n_modes, slot))
        }
        "cylindrical" => {
            no("lambda0", cfg.lambda0.is_some())?;
            no("decay_r", cfg.decay_r.is_some())?;
            no("values", cfg.values.is_some())?;
            if slot != NoiseRole::Emergent {
                return Err(bad(format!(
                    "cylindrical spectrum is only admissible in the Wtilde slot, not {}",
                    role_name(slot)
                )));
            }
            Ok(NoiseSpec::cylindrical(n_modes))
        }
        other => Err(bad(format!(
            "unknown noise kind {other:?}; expected rule, explicit, off, or cylindrical"
        ))),
    }
}

fn resolve_field(
    init: &FieldInit,
    transform: &SineTransform,
    what: &str,
    lint: &mut Vec<String>,
) -> Result<SpectralField> {
    let op = transform.op();
    match (&init.modes, &init.expr) {
        (Some(_), Some(_)) | (None, None) => Err(bad(format!(
            "{what} must set exactly one of `modes` and `expr`"
        ))),
        (Some(modes), None) => {
            if modes.len() > op.n_modes() {
                return Err(bad(format!(
                    "{what} lists {} coefficients but only {} modes are retained",
                    modes.len(),
                    op.n_modes()
                )));
            }
            let mut c = vec![0.0; op.n_modes()];
            c[..modes.len()].copy_from_slice(modes);
            SpectralField::new(op, c)
        }
        (None, Some(expr)) => {
            let f = ScalarFn::parse(expr)?;
            for w in f.lint_boundedness() {
                lint.push(format!("{what} expression: {}", w.message));
            }
            let mut vals = Vec::with_capacity(transform.n_grid());
            for &xi in transform.grid_points() {
                vals.push(f.eval(xi, 0.0)?);
            }
            Ok(transform.to_spectral(&vals))
        }
    }
}

/// Parses a JSON document into the strict schema.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    Ok(serde_json::from_str(text)?)
}

/// Builds every live object and the normalized config copy.
pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    let op = resolve_operator(&cfg.operator)?;
    let transform = Arc::new(SineTransform::default_for(&op));
    let coeffs = CoefficientSet::parse(
        &cfg.coefficients.f,
        &cfg.coefficients.b,
        &cfg.coefficients.g,
        &cfg.coefficients.sigma,
    )?;
    let mut lint_warnings: Vec<String> = coeffs
        .lint_all()
        .into_iter()
        .map(|(name, w)| format!("coefficient {name}: {}", w.message))
        .collect();

    let n = op.n_modes();
    let w1 = resolve_noise(NoiseRole::SlowDriving, &cfg.noise.w1, n)?;
    let w2 = resolve_noise(NoiseRole::FastDriving, &cfg.noise.w2, n)?;
    let wtilde_cfg = cfg.noise.wtilde.clone().unwrap_or(NoiseConfig {
        kind: "cylindrical".into(),
        lambda0: None,
        decay_r: None,
        values: None,
        role: None,
    });
    let wtilde = resolve_noise(NoiseRole::Emergent, &wtilde_cfg, n)?;

    let x0 = resolve_field(&cfg.initial.x0, &transform, "initial.x0", &mut lint_warnings)?;
    let y0 = resolve_field(&cfg.initial.y0, &transform, "initial.y0", &mut lint_warnings)?;

    let eval_states = match &cfg.eval_states {
        Some(inits) => {
            if inits.is_empty() {
                return Err(bad("eval_states must not be empty when present"));
            }
            let mut out = Vec::with_capacity(inits.len());
            for (i, init) in inits.iter().enumerate() {
                out.push(resolve_field(
                    init,
                    &transform,
                    &format!("eval_states[{i}]"),
                    &mut lint_warnings,
                )?);
            }
            out
        }
        None => vec![x0.clone()],
    };

    if cfg.epsilons.is_empty() {
        return Err(bad("the epsilon grid is empty"));
    }
    for &e in &cfg.epsilons {
        if !(e > 0.0 && e <= 1.0) || !e.is_finite() {
            return Err(bad(format!("epsilon {e} outside (0, 1]")));
        }
    }
    for pair in cfg.epsilons.windows(2) {
        if pair[1] >= pair[0] {
            return Err(bad(format!(
                "epsilon grid must be strictly decreasing; found {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if !(cfg.t_end > 0.0) || !cfg.t_end.is_finite() {
        return Err(bad(format!("t_end must be positive, got {}", cfg.t_end)));
    }

    let n_paths_per_eps = match &cfg.n_paths_per_eps {
        Some(list) => {
            if list.len() != cfg.epsilons.len() {
                return Err(bad(format!(
                    "n_paths_per_eps lists {} entries for {} epsilon values",
                    list.len(),
                    cfg.epsilons.len()
                )));
            }
            list.clone()
        }
        None => vec![cfg.n_paths; cfg.epsilons.len()],
    };
    if n_paths_per_eps.iter().any(|&p| p < 2) {
        return Err(bad("every ensemble needs at least 2 paths"));
    }

    let functional = Functional::from_name(
        &cfg.functional.name,
        cfg.functional.h_modes.as_deref(),
        cfg.functional.modes.as_deref(),
        n,
    )?;

    if let Some([lo, hi]) = cfg.slope_band {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(bad(format!("slope_band [{lo}, {hi}] must satisfy lo < hi")));
        }
    }
    let sup_points = cfg.sup_points.unwrap_or(1);
    if sup_points == 0 {
        return Err(bad("sup_points must be at least 1"));
    }

    let integrator = cfg.integrator.clone().unwrap_or_default();
    if !(integrator.eps_divisor >= 1.0) || !integrator.eps_divisor.is_finite() {
        return Err(bad(format!(
            "eps_divisor must be at least 1, got {}",
            integrator.eps_divisor
        )));
    }

    let mut sampler = InvariantSamplerConfig::default_for(&op);
    if let Some(block) = &cfg.sampler {
        if let Some(v) = block.burn_in {
            sampler.burn_in = v;
        }
        if let Some(v) = block.n_samples {
            sampler.n_samples = v;
        }
        if let Some(v) = block.thinning {
            sampler.thinning = v;
        }
        if let Some(v) = block.n_chains {
            sampler.n_paths = v;
        }
        if let Some(v) = block.dt {
            sampler.dt = v;
        }
    }
    sampler.validate()?;

    let limit_block = cfg.limit.clone().unwrap_or_default();
    let provider = match limit_block.provider.as_str() {
        "analytic" => ProviderKind::Analytic,
        "gauss_hermite" => ProviderKind::GaussHermite,
        "monte_carlo" => ProviderKind::MonteCarlo,
        other => {
            return Err(bad(format!(
                "unknown limit provider {other:?}; expected analytic, gauss_hermite, or monte_carlo"
            )))
        }
    };
    let limit_dt = limit_block.dt.unwrap_or(cfg.t_end / 500.0);
    let limit = LimitSettings {
        provider,
        dt: limit_dt,
        refresh_every: limit_block.refresh_every.unwrap_or(match provider {
            ProviderKind::MonteCarlo => 5,
            _ => 1,
        }),
        n_paths: limit_block.n_paths.unwrap_or(cfg.n_paths.saturating_mul(5).max(2)),
        n_quad: limit_block.n_quad,
        budget: limit_block.budget,
    };

    let vblock = cfg.validation.clone().unwrap_or_default();
    let validation = ValidationSettings {
        gamma: vblock.gamma,
        vartheta: vblock.vartheta,
        t_check: vblock.t_check.unwrap_or(cfg.t_end),
    };

    let moment = cfg.moment_scan.clone().unwrap_or_default();
    if moment.gammas.is_empty() {
        return Err(bad("moment_scan.gammas must not be empty"));
    }

    // Normalized copy: every optional block replaced by its resolved
    // content so the emitted document re-runs identically.
    let mut normalized = cfg.clone();
    normalized.n_paths_per_eps = Some(n_paths_per_eps.clone());
    normalized.integrator = Some(integrator.clone());
    normalized.sampler = Some(SamplerBlock {
        burn_in: Some(sampler.burn_in),
        n_samples: Some(sampler.n_samples),
        thinning: Some(sampler.thinning),
        n_chains: Some(sampler.n_paths),
        dt: Some(sampler.dt),
    });
    normalized.noise.wtilde = Some(wtilde_cfg);
    normalized.limit = Some(LimitBlock {
        provider: limit_block.provider.clone(),
        dt: Some(limit.dt),
        refresh_every: Some(limit.refresh_every),
        n_paths: Some(limit.n_paths),
        n_quad: limit.n_quad,
        budget: limit.budget,
    });
    normalized.validation = Some(ValidationBlock {
        gamma: validation.gamma,
        vartheta: validation.vartheta,
        t_check: Some(validation.t_check),
    });
    normalized.moment_scan = Some(moment.clone());

    Ok(Resolved {
        config: normalized,
        op,
        transform,
        coeffs,
        w1,
        w2,
        wtilde,
        x0,
        y0,
        eval_states,
        functional,
        epsilons: cfg.epsilons.clone(),
        t_end: cfg.t_end,
        n_paths_per_eps,
        seed: cfg.seed,
        slope_band: cfg.slope_band,
        sup_points,
        integrator,
        sampler,
        poisson: cfg.poisson.clone().unwrap_or_default(),
        limit,
        validation,
        moment,
        lint_warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_json() -> String {
        r#"{
            "operator": { "n_modes": 4, "domain_length": 3.141592653589793 },
            "coefficients": { "f": "0", "b": "0.5*v", "g": "-v", "sigma": "0" },
            "noise": {
                "w1": { "kind": "off" },
                "w2": { "kind": "rule", "lambda0": 1.0, "decay_r": 2.0 }
            },
            "initial": {
                "x0": { "modes": [0.8] },
                "y0": { "modes": [1.0, 0.5] }
            },
            "epsilons": [0.1, 0.05],
            "t_end": 0.5,
            "n_paths": 16,
            "functional": { "name": "cos_pairing" },
            "seed": 42
        }"#
        .to_string()
    }

    #[test]
    fn minimal_document_resolves_with_defaults() {
        let cfg = parse_config(&minimal_json()).unwrap();
        let r = resolve(&cfg).unwrap();
        assert_eq!(r.op.n_modes(), 4);
        assert_eq!(r.x0.coeffs(), &[0.8, 0.0, 0.0, 0.0]);
        assert_eq!(r.n_paths_per_eps, vec![16, 16]);
        assert!(r.wtilde.lambdas().iter().all(|&l| l == 1.0));
        assert_eq!(r.integrator.eps_divisor, 50.0);
        assert_eq!(r.limit.provider, ProviderKind::Analytic);
        assert_eq!(r.limit.refresh_every, 1);
        assert_eq!(r.validation.vartheta, 1.0);
        // h = t_end/ceil(t_end*50/eps): exact division at eps = 0.1.
        assert!((r.macro_step(0.1) - 0.002).abs() < 1e-15);
        assert!(r.macro_step(0.0125) <= 0.0125 / 50.0 + 1e-18);
        let ic = r.integrator_config(0.05);
        assert_eq!(ic.n_macro_steps(), 500);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let with_top = minimal_json().replace("\"seed\": 42", "\"seed\": 42, \"extra\": 1");
        assert!(parse_config(&with_top).is_err(), "top-level stray key");
        let with_nested = minimal_json().replace(
            "\"kind\": \"off\"",
            "\"kind\": \"off\", \"typo_field\": true",
        );
        assert!(parse_config(&with_nested).is_err(), "nested stray key");
    }

    #[test]
    fn schema_invariants_are_enforced() {
        let cfg = parse_config(&minimal_json()).unwrap();

        let mut inc = cfg.clone();
        inc.epsilons = vec![0.05, 0.1];
        assert!(resolve(&inc).is_err(), "increasing grid");
        inc.epsilons = vec![0.1, 0.1];
        assert!(resolve(&inc).is_err(), "repeated value");
        inc.epsilons = vec![1.5];
        assert!(resolve(&inc).is_err(), "epsilon above 1");
        inc.epsilons = vec![];
        assert!(resolve(&inc).is_err(), "empty grid");

        let mut both = cfg.clone();
        both.initial.x0 = FieldInit { modes: Some(vec![1.0]), expr: Some("u".into()) };
        assert!(resolve(&both).is_err(), "modes and expr together");
        both.initial.x0 = FieldInit { modes: None, expr: None };
        assert!(resolve(&both).is_err(), "neither modes nor expr");

        let mut badfun = cfg.clone();
        badfun.functional.name = "indicator".into();
        assert!(resolve(&badfun).is_err());

        let mut badrole = cfg.clone();
        badrole.noise.w1.role = Some("W2".into());
        assert!(resolve(&badrole).is_err(), "role contradicts slot");

        let mut badpaths = cfg.clone();
        badpaths.n_paths_per_eps = Some(vec![8]);
        assert!(resolve(&badpaths).is_err(), "per-eps list length mismatch");

        let mut cyl = cfg.clone();
        cyl.noise.w2.kind = "cylindrical".into();
        cyl.noise.w2.lambda0 = None;
        cyl.noise.w2.decay_r = None;
        assert!(resolve(&cyl).is_err(), "cylindrical outside the Wtilde slot");
    }

    #[test]
    fn expression_initial_data_is_projected_and_linted() {
        let mut cfg = parse_config(&minimal_json()).unwrap();
        // sin(pi*xi/L) with L = pi is exactly the first basis function up
        // to the normalization sqrt(2/L).
        cfg.initial.x0 = FieldInit { modes: None, expr: Some("sin(u)".into()) };
        let r = resolve(&cfg).unwrap();
        let amp = (std::f64::consts::PI / 2.0).sqrt(); // 1/sqrt(2/L)
        assert!((r.x0.coeffs()[0] - amp).abs() < 1e-10);
        for k in 1..4 {
            assert!(r.x0.coeffs()[k].abs() < 1e-10);
        }
        assert!(r.lint_warnings.iter().all(|w| !w.contains("initial.x0")));

        cfg.initial.x0 = FieldInit { modes: None, expr: Some("u".into()) };
        let r = resolve(&cfg).unwrap();
        assert!(
            r.lint_warnings.iter().any(|w| w.contains("initial.x0")),
            "unbounded initial expression should be linted: {:?}",
            r.lint_warnings
        );
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = parse_config(&minimal_json()).unwrap();
        let r = resolve(&cfg).unwrap();
        let emitted = serde_json::to_string_pretty(&r.config).unwrap();
        let reparsed = parse_config(&emitted).unwrap();
        let r2 = resolve(&reparsed).unwrap();
        assert_eq!(r.n_paths_per_eps, r2.n_paths_per_eps);
        assert_eq!(r.sampler.n_samples, r2.sampler.n_samples);
        assert_eq!(r.sampler.dt, r2.sampler.dt);
        assert_eq!(r.limit.n_paths, r2.limit.n_paths);
        assert_eq!(r.limit.dt, r2.limit.dt);
        assert_eq!(r.validation.t_check, r2.validation.t_check);
        // Second normalization is a fixed point.
        let emitted2 = serde_json::to_string_pretty(&r2.config).unwrap();
        assert_eq!(emitted, emitted2);
    }

    #[test]
    fn explicit_operator_spectrum_is_accepted() {
        let mut cfg = parse_config(&minimal_json()).unwrap();
        cfg.operator.eigenvalues = Some(vec![1.0, 2.5, 2.5, 9.0]);
        let r = resolve(&cfg).unwrap();
        assert_eq!(r.op.alphas(), &[1.0, 2.5, 2.5, 9.0]);
        cfg.operator.eigenvalues = Some(vec![1.0, 2.0]);
        assert!(resolve(&cfg).is_err(), "length/n_modes mismatch");
    }
}
