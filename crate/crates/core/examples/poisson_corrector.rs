//! The corrector equation: Monte Carlo time-integral solves checked against
//! the exact linear corrector, plus the generator-residual diagnostic and an
//! affine surrogate fitted from solver output.
//!
//! With g = -v every frozen mode relaxes at rate b_k = alpha_k + 1, and for
//! the coupling b(u, v) = 0.5 v the corrector is exactly
//! Psi_k(y) = 0.5 y_k / (alpha_k + 1).
//!
//! Run with: cargo run --example poisson_corrector

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use slowfast_spde::dynamics::FrozenIntegrator;
use slowfast_spde::functions::ScalarFn;
use slowfast_spde::homogenize::{
    check_centering, check_poisson_residual, fit_affine_surrogate, InvariantSamplerConfig,
    PoissonConfig, PoissonSolver, PsiFunction,
};
use slowfast_spde::noise::{EquationTag, NoiseRole, NoiseSpec};
use slowfast_spde::spectral::{OperatorSpec, SineTransform, SpectralField};

fn main() -> slowfast_spde::Result<()> {
    let op = OperatorSpec::dirichlet_laplacian(4, PI)?;
    let n = op.n_modes();
    let tf = Arc::new(SineTransform::default_for(&op));
    let g = ScalarFn::parse("-v")?;
    let w2 = NoiseSpec::rule(1.0, 2.0, n, NoiseRole::FastDriving)?;
    let x = SpectralField::zero(&op);
    let frozen =
        FrozenIntegrator::new(Arc::clone(&tf), g.clone(), w2, 2e-3, &x, 7, EquationTag::FrozenChain)?;

    // The time integral defining the corrector only converges when the
    // coupling averages to zero; certify that first.
    let b = ScalarFn::parse("0.5*v")?;
    let mut inv_cfg = InvariantSamplerConfig::default_for(&op);
    inv_cfg.n_paths = 32;
    inv_cfg.n_samples = 200;
    let report = check_centering(&frozen, &b, &inv_cfg)?;
    println!(
        "centering gate: {} (max |residual| = {:.2e})",
        if report.passed { "passed" } else { "FAILED" },
        report.residual.iter().fold(0.0f64, |a, r| a.max(r.abs()))
    );

    let cfg = PoissonConfig::default_for(&op, &g)?;
    let solver = PoissonSolver::new(frozen.clone(), b.clone(), cfg, Some(&report))?;

    // Solve at one representative fast state and compare mode by mode.
    let y0: Vec<f64> = (0..n).map(|k| 0.9 - 0.3 * k as f64).collect();
    let sol = solver.solve(&y0, 0)?;
    println!("\ncorrector at y = {:?}", y0);
    println!("mode   solver value     exact 0.5 y_k/(alpha_k+1)   rel err   tail bound");
    for k in 0..n {
        let exact = 0.5 * y0[k] / (op.alphas()[k] + 1.0);
        let rel = (sol.value[k] - exact).abs() / exact.abs();
        println!(
            "{:4}   {:>12.5e}   {:>25.5e}   {:>6.2}%   {:.1e}",
            k + 1,
            sol.value[k],
            exact,
            rel * 100.0,
            sol.tail_bound
        );
    }

    // The generator residual ||L2 Psi + phi|| / ||phi|| vanishes for the
    // exact corrector and stays order one for a wrong guess.
    let exact_k = DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            0.5 / (op.alphas()[k] + 1.0)
        } else {
            0.0
        }
    });
    let exact_psi = PsiFunction::linear(exact_k.clone());
    let wrong_psi = PsiFunction::linear(DMatrix::identity(n, n));
    let r_exact = check_poisson_residual(&frozen, &exact_psi, &b, &y0, 1e-3)?;
    let r_wrong = check_poisson_residual(&frozen, &wrong_psi, &b, &y0, 1e-3)?;
    println!("\ngenerator residual, exact corrector: {r_exact:.3e}");
    println!("generator residual, identity guess:  {r_wrong:.3e}");

    // Fit an affine surrogate from a handful of solves and compare its
    // matrix against the analytic diagonal.
    let mut samples = Vec::new();
    for (i, scale) in [1.0, -0.7, 0.4, -1.3, 0.8, 1.6, -0.2, 1.1].iter().enumerate() {
        let y: Vec<f64> = (0..n).map(|k| scale * (1.0 - 0.2 * k as f64)).collect();
        samples.push((y.clone(), solver.solve(&y, 100 + i as u64)?.value));
    }
    let fitted = fit_affine_surrogate(&samples)?;
    let diff = (fitted.matrix() - &exact_k).norm() / exact_k.norm();
    println!("\naffine surrogate fitted from {} solves:", samples.len());
    println!("  relative matrix error vs analytic corrector: {:.2}%", diff * 100.0);
    println!("  fitted diagonal: {:?}", (0..n).map(|k| fitted.matrix()[(k, k)]).collect::<Vec<_>>());
    println!(
        "  exact diagonal:  {:?}",
        (0..n).map(|k| 0.5 / (op.alphas()[k] + 1.0)).collect::<Vec<_>>()
    );
    Ok(())
}
