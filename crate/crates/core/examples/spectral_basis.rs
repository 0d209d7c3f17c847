//! The Dirichlet sine eigenbasis: fields as mode coefficients, grid
//! round-trips, exact semigroup action, and fractional powers.
//!
//! Run with: cargo run --example spectral_basis

use std::f64::consts::PI;

use slowfast_spde::spectral::{OperatorSpec, SineTransform, SpectralField};

fn main() -> slowfast_spde::Result<()> {
    // -A is the Dirichlet Laplacian on (0, L): eigenvalues (k pi / L)^2.
    let op = OperatorSpec::dirichlet_laplacian(16, PI)?;
    println!("operator: {} modes on (0, {:.4})", op.n_modes(), op.domain_length());
    println!("first eigenvalues: {:?}", &op.alphas()[..4]);

    // A field is a coefficient vector in the orthonormal sine basis.
    let mut coeffs = vec![0.0; op.n_modes()];
    coeffs[0] = 1.0;
    coeffs[2] = -0.25;
    let x = SpectralField::new(&op, coeffs)?;

    // Evaluate pointwise and round-trip through a collocation grid.
    let tf = SineTransform::new(&op, 64)?;
    let grid = tf.to_grid(&x);
    let back = tf.to_spectral(&grid);
    let rt_err = x
        .coeffs()
        .iter()
        .zip(back.coeffs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("grid round-trip max coefficient error: {rt_err:.3e}");

    // The semigroup acts diagonally and exactly: e^{tA} e^{sA} = e^{(t+s)A}.
    let one_shot = x.semigroup(0.7)?;
    let two_shot = x.semigroup(0.3)?.semigroup(0.4)?;
    let semi_err = one_shot
        .coeffs()
        .iter()
        .zip(two_shot.coeffs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("semigroup composition error: {semi_err:.3e}");

    // Fractional powers compose additively: (-A)^0.3 (-A)^0.2 = (-A)^0.5.
    let frac_one = x.fractional_power(0.5)?;
    let frac_two = x.fractional_power(0.3)?.fractional_power(0.2)?;
    let frac_err = frac_one
        .coeffs()
        .iter()
        .zip(frac_two.coeffs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("fractional-power additivity error: {frac_err:.3e}");

    // Norms: plain L^2 and the (-A)^theta-weighted scale.
    println!("|x| = {:.6}, |(-A)^0.25 x| = {:.6}", x.norm(), x.sobolev_norm(0.25));
    println!("x(L/2) = {:.6}", x.eval(PI / 2.0));
    Ok(())
}
