//! Dirichlet sine eigenbasis on the interval (0, L).
//!
//! Everything downstream works in the coordinates of the orthonormal basis
//! `e_k(xi) = sqrt(2/L) sin(k pi xi / L)`, in which the linear operator `A`
//! is diagonal with eigenvalues `-alpha_k`, `alpha_k = (k pi / L)^2`. The
//! module provides the truncated operator description, coefficient vectors
//! living under it, diagonal calculus (semigroup, fractional powers, Sobolev
//! norms) and the collocation transforms between mode space and the uniform
//! interior grid `xi_j = j L / (N + 1)`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Truncated diagonal description of the operator `A` on (0, L).
///
/// Eigenvalues are stored positive: entry `k` (0-based) holds `alpha_{k+1}`
/// and `A e_k = -alpha_k e_k`. The list must be strictly positive and
/// non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    domain_length: f64,
    eigenvalues: Vec<f64>,
}

impl OperatorSpec {
    /// Dirichlet Laplacian truncated to `n_modes` modes: `alpha_k = (k pi / L)^2`.
    pub fn dirichlet_laplacian(n_modes: usize, domain_length: f64) -> Result<Arc<Self>> {
        if n_modes == 0 {
            return Err(Error::InvalidSpec("n_modes must be positive".into()));
        }
        if !(domain_length > 0.0) || !domain_length.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "domain length must be positive and finite, got {domain_length}"
            )));
        }
        let eigenvalues = (1..=n_modes)
            .map(|k| {
                let w = k as f64 * std::f64::consts::PI / domain_length;
                w * w
            })
            .collect();
        Ok(Arc::new(Self { domain_length, eigenvalues }))
    }

    /// Operator with an explicit positive, non-decreasing eigenvalue list.
    pub fn from_eigenvalues(domain_length: f64, eigenvalues: Vec<f64>) -> Result<Arc<Self>> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidSpec("eigenvalue list must be non-empty".into()));
        }
        if !(domain_length > 0.0) || !domain_length.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "domain length must be positive and finite, got {domain_length}"
            )));
        }
        for (i, a) in eigenvalues.iter().enumerate() {
            if !(*a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "eigenvalue {} must be positive and finite, got {a}",
                    i + 1
                )));
            }
            if i > 0 && eigenvalues[i - 1] > *a {
                return Err(Error::InvalidSpec(format!(
                    "eigenvalues must be non-decreasing; entry {} ({}) < entry {} ({})",
                    i + 1,
                    a,
                    i,
                    eigenvalues[i - 1]
                )));
            }
        }
        Ok(Arc::new(Self { domain_length, eigenvalues }))
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    /// Positive eigenvalues `alpha_1 <= ... <= alpha_n`.
    pub fn alphas(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue (spectral gap of the semigroup).
    pub fn alpha_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn alpha_max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }
}

/// Value of the orthonormal Dirichlet mode `e_k` (`k` is 1-based) at `xi`.
pub fn basis_eval(k: usize, xi: f64, domain_length: f64) -> f64 {
    debug_assert!(k >= 1);
    let scale = (2.0 / domain_length).sqrt();
    scale * (k as f64 * std::f64::consts::PI * xi / domain_length).sin()
}

/// Coefficient vector of a field in the eigenbasis of one [`OperatorSpec`].
#[derive(Debug, Clone)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    op: Arc<OperatorSpec>,
}

impl SpectralField {
    pub fn new(op: &Arc<OperatorSpec>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != op.n_modes() {
            return Err(Error::InvalidSpec(format!(
                "coefficient vector has length {}, operator retains {} modes",
                coeffs.len(),
                op.n_modes()
            )));
        }
        Ok(Self { coeffs, op: Arc::clone(op) })
    }

    pub fn zero(op: &Arc<OperatorSpec>) -> Self {
        Self { coeffs: vec![0.0; op.n_modes()], op: Arc::clone(op) }
    }

    /// The pure mode `amplitude * e_k` (`k` is 1-based).
    pub fn unit_mode(op: &Arc<OperatorSpec>, k: usize, amplitude: f64) -> Result<Self> {
        if k == 0 || k > op.n_modes() {
            return Err(Error::InvalidSpec(format!(
                "mode index {k} outside 1..={}",
                op.n_modes()
            )));
        }
        let mut coeffs = vec![0.0; op.n_modes()];
        coeffs[k - 1] = amplitude;
        Ok(Self { coeffs, op: Arc::clone(op) })
    }

    pub fn op(&self) -> &Arc<OperatorSpec> {
        &self.op
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Pointwise evaluation by summing the truncated series.
    pub fn eval(&self, xi: f64) -> f64 {
        let l = self.op.domain_length();
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * basis_eval(i + 1, xi, l))
            .sum()
    }

    /// `A x`: multiplies each coefficient by `-alpha_k`.
    pub fn apply_a(&self) -> Self {
        self.mapped(|a, c| -a * c)
    }

    /// `e^{tA} x` for `t >= 0`: multiplies each coefficient by `e^{-alpha_k t}`.
    pub fn semigroup(&self, t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::InvalidSpec(format!("semigroup time must be >= 0, got {t}")));
        }
        Ok(self.mapped(|a, c| (-a * t).exp() * c))
    }

    /// `(-A)^theta x` for `theta` in [-1, 1].
    pub fn fractional_power(&self, theta: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&theta) {
            return Err(Error::InvalidSpec(format!(
                "fractional power order must lie in [-1, 1], got {theta}"
            )));
        }
        Ok(self.mapped(|a, c| a.powf(theta) * c))
    }

    /// `|| (-A)^theta x ||`, the H^{2 theta}-type graph norm.
    pub fn sobolev_norm(&self, theta: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(self.op.alphas())
            .map(|(c, a)| {
                let w = a.powf(theta) * c;
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// L^2 norm (coefficient Euclidean norm; the basis is orthonormal).
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    /// `self + s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    fn mapped(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let coeffs = self
            .op
            .alphas()
            .iter()
            .zip(&self.coeffs)
            .map(|(a, c)| f(*a, *c))
            .collect();
        Self { coeffs, op: Arc::clone(&self.op) }
    }
}

/// Collocation transform between mode coefficients and values on the uniform
/// interior grid `xi_j = j L / (N + 1)`, `j = 1..N`.
///
/// For `N >= n_modes` the pair is exact on the retained span: the discrete
/// sine functions satisfy `w * sum_j e_k(xi_j) e_m(xi_j) = delta_km` with
/// `w = L / (N + 1)`, so `to_spectral(to_grid(x)) == x` up to round-off.
#[derive(Debug, Clone)]
pub struct SineTransform {
    op: Arc<OperatorSpec>,
    points: Vec<f64>,
    /// Row-major `n_grid x n_modes` table of `e_k(xi_j)`.
    table: Vec<f64>,
    weight: f64,
}

impl SineTransform {
    pub fn new(op: &Arc<OperatorSpec>, n_grid: usize) -> Result<Self> {
        let n = op.n_modes();
        if n_grid < n {
            return Err(Error::InvalidSpec(format!(
                "grid must have at least as many points as modes ({n_grid} < {n})"
            )));
        }
        let l = op.domain_length();
        let step = l / (n_grid + 1) as f64;
        let points: Vec<f64> = (1..=n_grid).map(|j| j as f64 * step).collect();
        let mut table = Vec::with_capacity(n_grid * n);
        for &xi in &points {
            for k in 1..=n {
                table.push(basis_eval(k, xi, l));
            }
        }
        Ok(Self { op: Arc::clone(op), points, table, weight: step })
    }

    /// Default anti-aliasing resolution: four grid points per retained mode.
    pub fn default_for(op: &Arc<OperatorSpec>) -> Self {
        Self::new(op, 4 * op.n_modes()).expect("4n >= n")
    }

    pub fn op(&self) -> &Arc<OperatorSpec> {
        &self.op
    }

    pub fn n_grid(&self) -> usize {
        self.points.len()
    }

    /// Interior collocation points.
    pub fn grid_points(&self) -> &[f64] {
        &self.points
    }

    /// Quadrature weight `L / (N + 1)` of the interior trapezoid-type rule.
    pub fn quadrature_weight(&self) -> f64 {
        self.weight
    }

    /// Basis values `[e_1(xi_j), ..., e_n(xi_j)]` at grid point `j`.
    pub fn basis_row(&self, j: usize) -> &[f64] {
        let n = self.op.n_modes();
        &self.table[j * n..(j + 1) * n]
    }

    /// Slice-level synthesis `out_j = sum_k coeffs_k e_k(xi_j)`, the
    /// allocation-free form used in integrator hot loops.
    pub fn grid_from_coeffs(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.op.n_modes();
        debug_assert_eq!(out.len(), self.points.len());
        debug_assert_eq!(coeffs.len(), n);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.table[j * n..(j + 1) * n];
            *o = row.iter().zip(coeffs).map(|(t, c)| t * c).sum();
        }
    }

    /// Slice-level analysis by discrete quadrature,
    /// `coeffs_k = w * sum_j values_j e_k(xi_j)`.
    pub fn coeffs_from_grid(&self, values: &[f64], out: &mut [f64]) {
        let n = self.op.n_modes();
        debug_assert_eq!(values.len(), self.points.len());
        debug_assert_eq!(out.len(), n);
        out.fill(0.0);
        for (j, g) in values.iter().enumerate() {
            let row = &self.table[j * n..(j + 1) * n];
            for (c, t) in out.iter_mut().zip(row) {
                *c += g * t;
            }
        }
        for c in out.iter_mut() {
            *c *= self.weight;
        }
    }

    /// Evaluates the field at the collocation points into `out`.
    pub fn to_grid_into(&self, x: &SpectralField, out: &mut [f64]) {
        self.grid_from_coeffs(x.coeffs(), out);
    }

    pub fn to_grid(&self, x: &SpectralField) -> Vec<f64> {
        let mut out = vec![0.0; self.points.len()];
        self.to_grid_into(x, &mut out);
        out
    }

    /// Projects grid values onto the retained modes by discrete quadrature.
    pub fn to_spectral_into(&self, values: &[f64], out: &mut SpectralField) {
        self.coeffs_from_grid(values, out.coeffs_mut());
    }

    pub fn to_spectral(&self, values: &[f64]) -> SpectralField {
        let mut out = SpectralField::zero(&self.op);
        self.to_spectral_into(values, &mut out);
        out
    }
}
