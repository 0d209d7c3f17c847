use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Expression text failed to parse; `offset` is the byte position in the input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Expression evaluation hit a runtime fault (division by zero).
    #[error("evaluation error at byte {offset}: {message}")]
    Eval { offset: usize, message: String },

    /// Construction-time violation of a structural invariant
    /// (operator spectra, noise spectra, field lengths, step sizes).
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// Semantic problem in an experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An integration left the finite range or crossed the blow-up threshold.
    #[error("integration blow-up at t = {t:.6} (mode {mode}): {detail}")]
    BlowUp { t: f64, mode: usize, detail: String },

    /// A matrix that must be positive semidefinite has an eigenvalue below
    /// the clipping tolerance.
    #[error("matrix is not positive semidefinite: min eigenvalue {min_eigenvalue:.3e} (tolerance -{tolerance:.3e})")]
    Indefinite { min_eigenvalue: f64, tolerance: f64 },

    /// The fast-drift observable fails the centering requirement, so the
    /// corrector equation has no centered solution.
    #[error("centering check failed: residual {residual:.6e} exceeds {threshold:.6e} (3 x stderr); the corrector construction requires a centered fast drift")]
    NotCentered { residual: f64, threshold: f64 },

    /// A requested estimate exceeds the configured work budget.
    #[error("work budget exceeded: {0}")]
    Budget(String),

    /// A coefficient provider failed during a limit-equation integration;
    /// carries where the integration stood and the underlying fault.
    #[error("coefficient provider failed at t = {t:.6} (step {step}, state norm {state_norm:.3e}): {source}")]
    Provider { t: f64, step: u64, state_norm: f64, source: Box<Error> },

    /// A provider or subcommand was asked to operate outside its validity domain.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
