//! Every averaged coefficient of the reduced equation, estimated at one slow
//! state and compared against closed forms on a linear benchmark.
//!
//! With b = 0.5 v, g = -v, and fast spectrum lambda_k = k^{-2}, each frozen
//! mode is an Ornstein-Uhlenbeck process with rate b_k = alpha_k + 1, so
//!   corrector pairing:   M_kk = 0.25 lambda_k / (2 b_k^2),
//!   emergent diffusion:  Upsilon_kk = 0.5 sqrt(lambda_k) / b_k,
//!   drift correction:    0 (the coupling never sees the slow state),
//!   averaged amplitude:  (Sigma-bar)^2 = 0.09 I for the constant 0.3,
//!   averaged reaction:   cos averages to exp(-V(xi)/2) with V the
//!                        stationary pointwise variance.
//!
//! Run with: cargo run --example homogenized_coefficients

use std::f64::consts::PI;
use std::sync::Arc;

use slowfast_spde::functions::CoefficientSet;
use slowfast_spde::homogenize::{CoefficientEstimator, InvariantSamplerConfig, PoissonConfig};
use slowfast_spde::noise::{NoiseRole, NoiseSpec};
use slowfast_spde::spectral::{OperatorSpec, SineTransform, SpectralField};

fn main() -> slowfast_spde::Result<()> {
    let op = OperatorSpec::dirichlet_laplacian(4, PI)?;
    let n = op.n_modes();
    let tf = Arc::new(SineTransform::default_for(&op));
    let coeffs = CoefficientSet::parse("cos(v)", "0.5*v", "-v", "0.3")?;
    let w2 = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving)?;
    let lambdas = w2.lambdas().to_vec();

    let mut inv_cfg = InvariantSamplerConfig::default_for(&op);
    inv_cfg.n_paths = 16;
    inv_cfg.n_samples = 16;
    let mut pois_cfg = PoissonConfig::default_for(&op, &coeffs.g)?;
    pois_cfg.n_paths = 48;
    pois_cfg.dt = 2.5e-3;

    let est = CoefficientEstimator::new(
        Arc::clone(&tf),
        coeffs,
        w2,
        inv_cfg,
        pois_cfg,
        2024,
        100_000_000,
    )?;
    let x = SpectralField::new(&op, vec![0.4, 0.0, 0.0, 0.0])?;
    let coefs = est.at(&x)?;

    let rate: Vec<f64> = op.alphas().iter().map(|a| a + 1.0).collect();

    println!("corrector pairing diagonal (drives the emergent diffusion):");
    println!("mode   estimate        stderr       exact 0.25 lambda_k/(2 b_k^2)");
    for k in 0..n {
        let exact = 0.25 * lambdas[k] / (2.0 * rate[k] * rate[k]);
        println!(
            "{:4}   {:>11.4e}   {:>10.2e}   {:>11.4e}",
            k + 1,
            coefs.b_tensor_psi[(k, k)],
            coefs.b_tensor_psi_stderr[(k, k)],
            exact
        );
    }
    println!(
        "clipped negative mass {:.2e}, antisymmetric part {:.2e}",
        coefs.clipped_mass, coefs.asym_norm
    );

    println!("\nemergent diffusion factor diagonal:");
    println!("mode   estimate        jackknife     exact 0.5 sqrt(lambda_k)/b_k");
    for k in 0..n {
        let exact = 0.5 * lambdas[k].sqrt() / rate[k];
        println!(
            "{:4}   {:>11.4e}   {:>10.2e}   {:>11.4e}",
            k + 1,
            coefs.upsilon[(k, k)],
            coefs.upsilon_stderr[(k, k)],
            exact
        );
    }

    // The coupling is independent of the slow state, so the corrector has no
    // slow-argument derivative and the drift correction vanishes.
    let corr_norm = coefs.drift_correction.l2_norm();
    let corr_err: f64 = coefs
        .drift_correction_stderr
        .iter()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    println!("\ndrift correction: |value| = {corr_norm:.3e} (combined stderr {corr_err:.3e})");

    println!("\naveraged noise amplitude squared, diagonal (constant 0.3 -> 0.09):");
    for k in 0..n {
        println!(
            "{:4}   {:>11.4e}  +- {:>9.2e}",
            k + 1,
            coefs.sigma_bar_sq[(k, k)],
            coefs.sigma_bar_sq_stderr[(k, k)]
        );
    }

    // Exact averaged reaction by quadrature: cos against a centered Gaussian
    // marginal averages to exp(-V(xi)/2) with V(xi) the stationary pointwise
    // variance sum_k lambda_k/(2 b_k) e_k(xi)^2.
    let n_quad = 4000;
    let mut exact_fbar = vec![0.0; n];
    let hq = PI / n_quad as f64;
    for i in 0..n_quad {
        let xi = (i as f64 + 0.5) * hq;
        let mut var = 0.0;
        for k in 0..n {
            let e = (2.0 / PI).sqrt() * ((k + 1) as f64 * xi).sin();
            var += lambdas[k] / (2.0 * rate[k]) * e * e;
        }
        let fval = (-0.5 * var).exp();
        for (k, out) in exact_fbar.iter_mut().enumerate() {
            let e = (2.0 / PI).sqrt() * ((k + 1) as f64 * xi).sin();
            *out += fval * e * hq;
        }
    }
    println!("\naveraged reaction, first modes (cos of a centered Gaussian field):");
    println!("mode   estimate        stderr       exact quadrature");
    for k in 0..n {
        println!(
            "{:4}   {:>11.4e}   {:>10.2e}   {:>11.4e}",
            k + 1,
            coefs.fbar.coeffs()[k],
            coefs.fbar_stderr[k],
            exact_fbar[k]
        );
    }
    if !coefs.warnings.is_empty() {
        println!("\nwarnings: {:?}", coefs.warnings);
    }
    Ok(())
}
