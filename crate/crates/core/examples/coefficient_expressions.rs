//! The reaction-coefficient expression language: parsing, evaluation,
//! symbolic derivatives, affine detection, and boundedness linting.
//!
//! Coefficients are scalar functions of `u` (slow field value) and `v`
//! (fast field value), applied pointwise as composition operators.
//!
//! Run with: cargo run --example coefficient_expressions

use std::f64::consts::PI;

use slowfast_spde::functions::{nemytskii_apply, CoefficientSet, EvalWorkspace, ScalarFn, Var};
use slowfast_spde::spectral::{OperatorSpec, SineTransform, SpectralField};

fn main() -> slowfast_spde::Result<()> {
    let f = ScalarFn::parse("cos(v) + tanh(u) - 0.5*u*v")?;
    println!("parsed: {}", f.pretty());
    println!("f(0.3, -1.2) = {:.6}", f.eval(0.3, -1.2)?);

    // Exact partial derivatives come from the syntax tree.
    let df_du = f.differentiate(Var::U);
    println!("df/du = {}", df_du.pretty());
    let sym = df_du.eval(0.3, -1.2)?;
    let fd = f.derivative_fd(1, 0, 0.3, -1.2)?;
    println!("symbolic {sym:.8} vs finite-difference {fd:.8}");

    // Affine coupling is detected and unlocks a fast coefficient-space
    // path inside the integrators.
    let b = ScalarFn::parse("0.5*v")?;
    println!("affine parts of {}: {:?}", b.source(), b.affine_parts());

    // Unbounded expressions are legal but linted: averaged quantities are
    // only guaranteed to exist for bounded smooth coefficients.
    let g = ScalarFn::parse("-v")?;
    for w in g.lint_boundedness() {
        println!("lint: {}", w.message);
    }

    // A full coefficient set, as the solvers consume it.
    let set = CoefficientSet::parse("cos(v)", "0.5*v", "-v", "0.2")?;
    println!("sigma is constant: {:?}", set.sigma.as_constant());

    // Pointwise (Nemytskii) application on fields: F(x, y)(xi) = f(x(xi), y(xi)).
    let op = OperatorSpec::dirichlet_laplacian(8, PI)?;
    let tf = SineTransform::default_for(&op);
    let x = SpectralField::unit_mode(&op, 1, 0.8)?;
    let y = SpectralField::unit_mode(&op, 2, 0.5)?;
    let mut ws = EvalWorkspace::new();
    let f_grid = nemytskii_apply(&set.f, &tf.to_grid(&x), &tf.to_grid(&y), &mut ws)?;
    let fx = tf.to_spectral(&f_grid);
    println!("first modes of F(x, y): {:?}", &fx.coeffs()[..4]);
    Ok(())
}
