//! Power-law rate fitting for error-versus-epsilon curves.

use serde::Serialize;

use crate::error::{Error, Result};

/// One measured point of an error curve.
#[derive(Debug, Clone, Copy)]
pub struct RatePoint {
    pub eps: f64,
    pub error: f64,
    pub stderr: f64,
}

/// Weighted least-squares fit of `log(error) = intercept + slope*log(eps)`.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// 95% confidence interval on the slope from linear propagation of the
    /// per-point standard errors.
    pub slope_ci: (f64, f64),
    pub n_points: usize,
}

/// Fits the empirical convergence order. Each point is weighted by the
/// inverse variance of `log(error)`, which by the delta method is
/// `(stderr/error)^2`. Points with non-positive error cannot enter a
/// log fit and are rejected; fewer than 3 usable points is inconclusive.
pub fn fit_rate(points: &[RatePoint]) -> Result<RateFit> {
    let usable: Vec<&RatePoint> = points
        .iter()
        .filter(|p| p.error > 0.0 && p.eps > 0.0 && p.error.is_finite() && p.stderr.is_finite())
        .collect();
    if usable.len() < 3 {
        return Err(Error::Config(format!(
            "rate fit is inconclusive: {} usable points, need at least 3",
            usable.len()
        )));
    }
    let xs: Vec<f64> = usable.iter().map(|p| p.eps.ln()).collect();
    let ys: Vec<f64> = usable.iter().map(|p| p.error.ln()).collect();
    // Delta-method variance of log(error); a zero stderr (deterministic
    // point) gets a tiny floor so the weight stays finite.
    let vars: Vec<f64> = usable
        .iter()
        .map(|p| {
            let rel = p.stderr / p.error;
            (rel * rel).max(1e-30)
        })
        .collect();
    let w: Vec<f64> = vars.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let xbar = xs.iter().zip(&w).map(|(x, wi)| wi * x).sum::<f64>() / sw;
    let ybar = ys.iter().zip(&w).map(|(y, wi)| wi * y).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&w).map(|(x, wi)| wi * (x - xbar) * (x - xbar)).sum();
    if sxx <= 0.0 {
        return Err(Error::Config("rate fit needs at least two distinct eps values".into()));
    }
    let sxy: f64 =
        xs.iter().zip(&ys).zip(&w).map(|((x, y), wi)| wi * (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    // slope = sum_i w_i (x_i - xbar) y_i / sxx, so
    // var(slope) = sum_i [w_i (x_i - xbar) / sxx]^2 var(y_i) = 1 / sxx.
    let slope_sd = (1.0 / sxx).sqrt();
    let half = 1.96 * slope_sd;
    // Weighted R^2 against the weighted mean.
    let ss_tot: f64 = ys.iter().zip(&w).map(|(y, wi)| wi * (y - ybar) * (y - ybar)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .zip(&w)
        .map(|((x, y), wi)| {
            let r = y - (intercept + slope * x);
            wi * r * r
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_ci: (slope - half, slope + half),
        n_points: usable.len(),
    })
}
