//! Dense complex linear algebra helpers, quasinorms and Hermitian spectra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Tolerance for unit-norm, unitarity and projection checks.
pub const TAU_UNIT: f64 = 1e-10;
/// Tolerance for spectral reconstruction.
pub const TAU_SPEC: f64 = 1e-9;
/// Tolerance for amplitude comparisons.
pub const TAU_AMP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// `(Σ|v_j|^p)^{1/p}`, or the max for `p = ∞`. Valid for any `p > 0`.
pub fn quasinorm(v: &[f64], p: f64) -> Result<f64, NumericsError> {
    if p.is_nan() || p <= 0.0 {
        return Err(NumericsError::Parameter(format!("exponent must be positive, got {p}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::Parameter("vector has non-finite entries".into()));
    }
    if p.is_infinite() {
        return Ok(v.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    // scale by the max entry so large p does not overflow
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let s: f64 = v.iter().map(|x| (x.abs() / scale).powf(p)).sum();
    Ok(scale * s.powf(1.0 / p))
}

pub fn quasinorm_complex(v: &[C64], p: f64) -> Result<f64, NumericsError> {
    let mags: Vec<f64> = v.iter().map(|z| z.norm()).collect();
    quasinorm(&mags, p)
}

/// True iff `1/c ≤ u/v ≤ c`.
pub fn multiplicative_approx(u: f64, v: f64, c: f64) -> Result<bool, NumericsError> {
    if !(u > 0.0 && v > 0.0) {
        return Err(NumericsError::Parameter(format!("values must be positive, got ({u}, {v})")));
    }
    if c.is_nan() || c < 1.0 {
        return Err(NumericsError::Parameter(format!("factor must be at least 1, got {c}")));
    }
    let r = u / v;
    Ok(r <= c * (1.0 + 1e-15) && r * c >= 1.0 - 1e-15)
}

/// `|0⟩⟨1| ⊗ A + |1⟩⟨0| ⊗ A†`.
pub fn hermitian_dilation(a: &CMat) -> Result<CMat, NumericsError> {
    let n = require_square(a)?;
    let mut h = CMat::zeros(2 * n, 2 * n);
    h.view_mut((0, n), (n, n)).copy_from(a);
    h.view_mut((n, 0), (n, n)).copy_from(&a.adjoint());
    Ok(h)
}

fn require_square(a: &CMat) -> Result<usize, NumericsError> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(NumericsError::Shape {
            expected: "non-empty square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(a.nrows())
}

#[derive(Debug, Clone)]
pub struct HermitianSpectrum {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `u` is the eigenvector for `eigenvalues[u]`.
    pub eigenvectors: CMat,
}

impl HermitianSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vector(&self, u: usize) -> CVec {
        self.eigenvectors.column(u).into_owned()
    }

    pub fn reconstruct(&self) -> CMat {
        let d = CMat::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|&x| re(x)),
        ));
        &self.eigenvectors * d * self.eigenvectors.adjoint()
    }

    /// Apply `f(λ)` spectrally.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> CMat {
        let d = CMat::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|&x| f(x)),
        ));
        &self.eigenvectors * d * self.eigenvectors.adjoint()
    }

    /// Coefficients `γ_u = ⟨φ_u|v⟩`.
    pub fn expand(&self, v: &CVec) -> EigenbasisExpansion {
        EigenbasisExpansion { coefficients: (self.eigenvectors.adjoint() * v).iter().copied().collect() }
    }

    pub fn norm(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn min_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenbasisExpansion {
    pub coefficients: Vec<C64>,
}

impl EigenbasisExpansion {
    pub fn weight(&self) -> f64 {
        self.coefficients.iter().map(|z| z.norm_sqr()).sum()
    }
}

pub fn is_hermitian(h: &CMat, tol: f64) -> bool {
    h.nrows() == h.ncols() && (h - h.adjoint()).norm() <= tol.max(tol * h.norm())
}

pub fn spectral_decompose(h: &CMat) -> Result<HermitianSpectrum, NumericsError> {
    let n = require_square(h)?;
    let asym = (h - h.adjoint()).norm();
    if asym > TAU_UNIT * h.norm().max(1.0) {
        return Err(NumericsError::Contract(format!("matrix is not Hermitian (‖H−H†‖ = {asym:e})")));
    }
    let sym = (h + h.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = CMat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        fix_phase(&mut col);
        vecs.set_column(k, &col);
    }
    Ok(HermitianSpectrum { eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(), eigenvectors: vecs })
}

/// Rotate so the first non-negligible component is real and positive.
pub fn fix_phase(v: &mut CVec) {
    let cut = 1e-12 * v.norm();
    if let Some(z) = v.iter().find(|z| z.norm() > cut).copied() {
        let ph = z.conj() / z.norm();
        for x in v.iter_mut() {
            *x *= ph;
        }
    }
}

/// Largest singular value.
pub fn op_norm(a: &CMat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn is_unitary(u: &CMat, tol: f64) -> bool {
    u.nrows() == u.ncols() && op_norm(&(u.adjoint() * u - CMat::identity(u.nrows(), u.ncols()))) <= tol
}

pub fn is_projection(p: &CMat, tol: f64) -> bool {
    p.nrows() == p.ncols() && op_norm(&(p * p - p)) <= tol && op_norm(&(p - p.adjoint())) <= tol
}

pub fn is_state(v: &CVec, tol: f64) -> bool {
    (v.norm() - 1.0).abs() <= tol
}

pub fn basis(n: usize, k: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[k] = ONE;
    v
}

pub fn normalized(v: &CVec) -> CVec {
    let n = v.norm();
    if n == 0.0 {
        v.clone()
    } else {
        v.unscale(n)
    }
}

/// `|⟨a|b⟩|²` for normalized inputs.
pub fn fidelity(a: &CVec, b: &CVec) -> f64 {
    let n = a.norm() * b.norm();
    if n == 0.0 {
        return 0.0;
    }
    (a.dotc(b).norm() / n).powi(2)
}

/// Distance between normalized vectors after removing the relative global phase.
pub fn phase_distance(a: &CVec, b: &CVec) -> f64 {
    let a = normalized(a);
    let b = normalized(b);
    let ov = a.dotc(&b);
    let ph = if ov.norm() > 0.0 { ov / ov.norm() } else { ONE };
    (b - a * ph).norm()
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// JSON schema for matrices: `{rows, cols, entries: [[re, im], ...]}` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<[f64; 2]>,
}

impl From<&CMat> for MatrixJson {
    fn from(m: &CMat) -> Self {
        let mut entries = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                entries.push([m[(i, j)].re, m[(i, j)].im]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), entries }
    }
}

impl TryFrom<&MatrixJson> for CMat {
    type Error = NumericsError;
    fn try_from(j: &MatrixJson) -> Result<Self, Self::Error> {
        if j.entries.len() != j.rows * j.cols {
            return Err(NumericsError::Shape {
                expected: format!("{} entries", j.rows * j.cols),
                got: format!("{}", j.entries.len()),
            });
        }
        Ok(CMat::from_fn(j.rows, j.cols, |r, col| {
            let [a, b] = j.entries[r * j.cols + col];
            c(a, b)
        }))
    }
}

/// Vectors use the same schema with `dim` in place of rows/cols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorJson {
    pub dim: usize,
    pub entries: Vec<[f64; 2]>,
}

impl From<&CVec> for VectorJson {
    fn from(v: &CVec) -> Self {
        VectorJson { dim: v.len(), entries: v.iter().map(|z| [z.re, z.im]).collect() }
    }
}

impl TryFrom<&VectorJson> for CVec {
    type Error = NumericsError;
    fn try_from(j: &VectorJson) -> Result<Self, Self::Error> {
        if j.entries.len() != j.dim {
            return Err(NumericsError::Shape { expected: format!("{} entries", j.dim), got: j.entries.len().to_string() });
        }
        Ok(CVec::from_iterator(j.dim, j.entries.iter().map(|[a, b]| c(*a, *b))))
    }
}

pub mod random {
    //! Seeded generators used by tests and the CLI.
    use super::*;
    use rand::Rng;

    pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        // Box-Muller; avoids pulling in a distributions crate for one call
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn complex_gaussian<R: Rng>(rng: &mut R) -> C64 {
        c(gaussian(rng), gaussian(rng)) / std::f64::consts::SQRT_2
    }

    pub fn state<R: Rng>(rng: &mut R, n: usize) -> CVec {
        normalized(&CVec::from_fn(n, |_, _| complex_gaussian(rng)))
    }

    pub fn hermitian<R: Rng>(rng: &mut R, n: usize) -> CMat {
        let g = CMat::from_fn(n, n, |_, _| complex_gaussian(rng));
        (&g + g.adjoint()).scale(0.5)
    }

    /// Haar-ish unitary from the QR factor of a Gaussian matrix.
    pub fn unitary<R: Rng>(rng: &mut R, n: usize) -> CMat {
        let g = CMat::from_fn(n, n, |_, _| complex_gaussian(rng));
        let qr = g.qr();
        let q = qr.q();
        let r = qr.r();
        let mut out = q.clone();
        for j in 0..n {
            let d = r[(j, j)];
            let ph = if d.norm() > 0.0 { d / d.norm() } else { ONE };
            for i in 0..n {
                out[(i, j)] = q[(i, j)] * ph;
            }
        }
        out
    }

    /// Hermitian matrix with a prescribed spectrum in a random eigenbasis.
    pub fn hermitian_with_spectrum<R: Rng>(rng: &mut R, eigenvalues: &[f64]) -> CMat {
        let n = eigenvalues.len();
        let u = unitary(rng, n);
        let d = CMat::from_diagonal(&CVec::from_iterator(n, eigenvalues.iter().map(|&x| re(x))));
        let h = &u * d * u.adjoint();
        (&h + h.adjoint()).scale(0.5)
    }
}
