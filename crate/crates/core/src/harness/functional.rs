//! Catalog of smooth bounded test functionals.
//!
//! Weak-error measurement needs observables that are bounded with bounded
//! derivatives through fourth order; every catalog entry satisfies that by
//! construction (compositions of `cos`, `tanh`, and `exp(-r^2)` with a
//! fixed linear form or projection).

use crate::error::{Error, Result};

/// A test functional on mode coefficients.
#[derive(Debug, Clone)]
pub enum Functional {
    /// `phi(x) = cos(<x, h>)`, the pairing taken in mode coefficients.
    CosPairing { h: Vec<f64> },
    /// `phi(x) = exp(-||P x||^2)` for the projection onto the listed
    /// modes (1-based indices).
    GaussBump { modes: Vec<usize> },
    /// `phi(x) = tanh(<x, h>)`.
    SmoothSat { h: Vec<f64> },
}

/// Names accepted by [`Functional::from_name`].
pub const FUNCTIONAL_NAMES: [&str; 3] = ["cos_pairing", "gauss_bump", "smooth_sat"];

impl Functional {
    /// Builds a catalog functional. `h_modes` parameterizes the pairing
    /// functionals (shorter vectors are zero-padded, default `e_1`);
    /// `modes` lists the projection for the bump (default `[1]`).
    pub fn from_name(
        name: &str,
        h_modes: Option<&[f64]>,
        modes: Option<&[usize]>,
        n_modes: usize,
    ) -> Result<Self> {
        let pad_h = || -> Result<Vec<f64>> {
            let mut h = vec![0.0; n_modes];
            match h_modes {
                Some(src) => {
                    if src.len() > n_modes {
                        return Err(Error::Config(format!(
                            "functional pairing vector has {} entries but only {} modes are retained",
                            src.len(),
                            n_modes
                        )));
                    }
                    if !src.iter().all(|v| v.is_finite()) {
                        return Err(Error::Config("functional pairing vector must be finite".into()));
                    }
                    h[..src.len()].copy_from_slice(src);
                }
                None => h[0] = 1.0,
            }
            Ok(h)
        };
        match name {
            "cos_pairing" => Ok(Self::CosPairing { h: pad_h()? }),
            "smooth_sat" => Ok(Self::SmoothSat { h: pad_h()? }),
            "gauss_bump" => {
                let modes = modes.map(<[usize]>::to_vec).unwrap_or_else(|| vec![1]);
                if modes.is_empty() {
                    return Err(Error::Config("bump functional needs at least one mode".into()));
                }
                for &m in &modes {
                    if m == 0 || m > n_modes {
                        return Err(Error::Config(format!(
                            "bump mode {m} outside the retained range 1..={n_modes}"
                        )));
                    }
                }
                Ok(Self::GaussBump { modes })
            }
            other => Err(Error::Config(format!(
                "unknown functional {other:?}; catalog: {}",
                FUNCTIONAL_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CosPairing { .. } => "cos_pairing",
            Self::GaussBump { .. } => "gauss_bump",
            Self::SmoothSat { .. } => "smooth_sat",
        }
    }

    /// Evaluates the functional on mode coefficients.
    pub fn eval(&self, coeffs: &[f64]) -> f64 {
        match self {
            Self::CosPairing { h } => pair(coeffs, h).cos(),
            Self::SmoothSat { h } => pair(coeffs, h).tanh(),
            Self::GaussBump { modes } => {
                let sq: f64 = modes
                    .iter()
                    .map(|&m| {
                        let c = coeffs.get(m - 1).copied().unwrap_or(0.0);
                        c * c
                    })
                    .sum();
                (-sq).exp()
            }
        }
    }
}

fn pair(coeffs: &[f64], h: &[f64]) -> f64 {
    coeffs.iter().zip(h).map(|(c, w)| c * w).sum()
}
