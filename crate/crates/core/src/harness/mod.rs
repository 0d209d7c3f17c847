//! Experiment harness: strict JSON configuration, the observable
//! functionals of the weak-convergence study, deterministic ensemble
//! drivers for every experiment type, rate fitting, and versioned output
//! tables with run manifests.
//!
//! The harness ties the library layers together behind reproducible
//! entry points: parse and resolve a config once, then run any of the
//! operations (`run_simulate`, `run_average`, `run_poisson_check`,
//! `run_weak_error`, `run_moment_scan`, `run_validate`) and emit the
//! results. Identical configs and seeds give byte-identical tables
//! regardless of thread count.

pub mod config;
pub mod functional;
pub mod output;
pub mod rate;
pub mod runs;

pub use config::{parse_config, resolve, ExperimentConfig, ProviderKind, Resolved};
pub use functional::{Functional, FUNCTIONAL_NAMES};
pub use output::{emit, CsvDoc, EmitOptions, OutputFormat};
pub use rate::{fit_rate, RateFit, RatePoint};
pub use runs::{
    run_average, run_moment_scan, run_poisson_check, run_simulate, run_validate, run_weak_error,
    AverageReport, MomentReport, PoissonReport, SimulateReport, ValidationReport, WeakErrorReport,
};
