//! Spectral simulation laboratory for slow-fast stochastic
//! reaction-diffusion systems on an interval.
//!
//! The crate integrates the coupled pair
//!
//! ```text
//! dX = [A X + f(X, Y) + eps^{-1/2} b(X, Y)] dt + sigma(X) dW1
//! dY = eps^{-1} [A Y + g(X, Y)] dt + eps^{-1/2} dW2
//! ```
//!
//! in a truncated Dirichlet eigenbasis, estimates the averaged drift,
//! averaged diffusion, corrector drift, and emergent diffusion of the
//! reduced equation the slow component converges to as `eps -> 0`, and
//! measures the weak convergence rate between the two.
//!
//! Module layout, bottom up:
//!
//! * [`spectral`]: eigenbasis, diagonal semigroup calculus, grid transforms.
//! * [`functions`]: the two-argument scalar expression language used for
//!   reaction coefficients, with symbolic and finite-difference derivatives.
//! * [`noise`]: diagonal noise spectra, deterministic counter-based
//!   sampling streams, and validators for the standing assumptions.
//! * [`dynamics`]: the exponential-Euler integrator for the coupled system
//!   and for the frozen fast equation.
//! * [`homogenize`]: invariant-measure sampling and the estimators for the
//!   reduced-equation coefficients.
//! * [`limit`]: integrator for the reduced equation, with analytic,
//!   quadrature, and Monte Carlo coefficient providers.
//! * [`harness`]: configuration schema, ensemble drivers, rate fitting,
//!   and report output backing the command-line interface.

pub mod dynamics;
pub mod error;
pub mod functions;
pub mod harness;
pub mod homogenize;
pub mod limit;
pub mod noise;
pub mod spectral;

pub use error::{Error, Result};
