//! Block preconditioning `S = sΠ + (I − Π)` and the linear systems it is
//! applied to: the self-preconditioned solver, the truncated-Taylor ODE system,
//! the padded Chebyshev system and the eigenvalue applications built on it.
//!
//! The large application systems are block lower triangular with identity
//! diagonal blocks, so they are solved by forward substitution and their norms
//! are estimated by power iteration instead of dense factorizations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dinv::{inverse_poly_degree, DinvError, LinearSystemInstance};
use crate::encodings::{cheb_sign_approx, clenshaw, EncodingError};
use crate::numerics::{is_projection, op_norm, random, re, CMat, CVec, NumericsError, C64, ONE, ZERO};
use crate::vtaa::{tunable_step_count, QueryCost, VtaaError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecondError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("scale s = {s} outside (0, 1)")]
    InvalidPreconditioner { s: f64 },
    #[error("precondition failed: {0}")]
    PreconditionFailure(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("system of dimension {dim} exceeds the cap {cap}")]
    Resource { dim: usize, cap: usize },
    #[error("singular system")]
    Singular,
    #[error(transparent)]
    Dinv(#[from] DinvError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Vtaa(#[from] VtaaError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Largest dimension at which norms are computed from a dense SVD.
pub const DENSE_NORM_CAP: usize = 400;
pub const DIM_CAP: usize = 4096;

fn block(v: &CVec, i: usize, d: usize) -> CVec {
    v.rows(i * d, d).into_owned()
}

/// The subspace a preconditioner scales.
#[derive(Debug, Clone, PartialEq)]
pub enum CondSubspace {
    /// An explicit projection on the full space.
    Dense(CMat),
    /// `|u⟩⟨u| ⊗ I_d` for a unit ancilla vector `u`.
    Ancilla { u: CVec, d: usize },
}

impl CondSubspace {
    pub fn dim(&self) -> usize {
        match self {
            CondSubspace::Dense(p) => p.nrows(),
            CondSubspace::Ancilla { u, d } => u.len() * d,
        }
    }

    pub fn project(&self, v: &CVec) -> CVec {
        match self {
            CondSubspace::Dense(p) => p * v,
            CondSubspace::Ancilla { u, d } => {
                let mut coeff = CVec::zeros(*d);
                for (a, ua) in u.iter().enumerate() {
                    if *ua != ZERO {
                        coeff += block(v, a, *d) * ua.conj();
                    }
                }
                let mut out = CVec::zeros(v.len());
                for (a, ua) in u.iter().enumerate() {
                    if *ua != ZERO {
                        out.rows_mut(a * d, *d).copy_from(&(&coeff * *ua));
                    }
                }
                out
            }
        }
    }
}

/// `S = sΠ + (I − Π)` with `0 < s < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub subspace: CondSubspace,
    pub s: f64,
}

impl Preconditioner {
    pub fn dim(&self) -> usize {
        self.subspace.dim()
    }

    fn scale_by(&self, v: &CVec, f: f64) -> CVec {
        let p = self.subspace.project(v);
        v + p * re(f - 1.0)
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        self.scale_by(v, self.s)
    }

    pub fn apply_inverse(&self, v: &CVec) -> CVec {
        self.scale_by(v, 1.0 / self.s)
    }

    /// `S` as a dense matrix.
    pub fn matrix(&self) -> CMat {
        dense_from(self.dim(), |v| self.apply(v))
    }

    pub fn inverse_matrix(&self) -> CMat {
        dense_from(self.dim(), |v| self.apply_inverse(v))
    }

    /// `‖(1−s)/2·(I−2Π) + (1+s)/2·I − S‖`; the combination has unit normalization.
    pub fn lcu_defect(&self) -> f64 {
        let n = self.dim();
        let p = dense_from(n, |v| self.subspace.project(v));
        let id = CMat::identity(n, n);
        let lcu = (&id - &p * re(2.0)) * re((1.0 - self.s) / 2.0) + &id * re((1.0 + self.s) / 2.0);
        op_norm(&(lcu - self.matrix()))
    }
}

fn dense_from(n: usize, f: impl Fn(&CVec) -> CVec) -> CMat {
    let mut m = CMat::zeros(n, n);
    for k in 0..n {
        let mut e = CVec::zeros(n);
        e[k] = ONE;
        m.set_column(k, &f(&e));
    }
    m
}

fn check_scale(s: f64) -> Result<(), PrecondError> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(PrecondError::InvalidPreconditioner { s })
    }
}

pub fn scaling_operator(projection: &CMat, s: f64) -> Result<Preconditioner, PrecondError> {
    check_scale(s)?;
    if !is_projection(projection, 1e-10) {
        return Err(PrecondError::Parameter("Π must be an orthogonal projection".into()));
    }
    Ok(Preconditioner { subspace: CondSubspace::Dense(projection.clone()), s })
}

pub fn ancilla_preconditioner(u: &CVec, d: usize, s: f64) -> Result<Preconditioner, PrecondError> {
    check_scale(s)?;
    let n = u.norm();
    if (n - 1.0).abs() > 1e-10 {
        return Err(PrecondError::Parameter(format!("ancilla vector has norm {n}")));
    }
    Ok(Preconditioner { subspace: CondSubspace::Ancilla { u: u.clone(), d }, s })
}

/// `‖F‖` for a linear map given by its action and adjoint action.
pub fn operator_norm(dim: usize, f: impl Fn(&CVec) -> CVec, f_adj: impl Fn(&CVec) -> CVec) -> f64 {
    if dim <= DENSE_NORM_CAP {
        return op_norm(&dense_from(dim, f));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = random::state(&mut rng, dim);
    let mut est = 0.0;
    for _ in 0..2000 {
        let w = f_adj(&f(&v));
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        let next = n.sqrt();
        v = w.unscale(n);
        if (next - est).abs() <= 1e-12 * next {
            return next;
        }
        est = next;
    }
    est
}

/// One off-diagonal block `scale · (mat or I)`.
#[derive(Debug, Clone)]
pub struct Block {
    pub col: usize,
    pub scale: C64,
    pub mat: Option<Arc<CMat>>,
}

impl Block {
    fn act(&self, x: &CVec) -> CVec {
        match &self.mat {
            Some(m) => (m.as_ref() * x) * self.scale,
            None => x * self.scale,
        }
    }

    fn act_adjoint(&self, x: &CVec) -> CVec {
        match &self.mat {
            Some(m) => (m.adjoint() * x) * self.scale.conj(),
            None => x * self.scale.conj(),
        }
    }
}

/// Block lower-triangular matrix with identity diagonal blocks.
#[derive(Debug, Clone)]
pub struct BlockLower {
    pub d: usize,
    /// Strictly lower blocks of each block row.
    pub rows: Vec<Vec<Block>>,
}

impl BlockLower {
    fn new(nblocks: usize, d: usize) -> Self {
        BlockLower { d, rows: vec![Vec::new(); nblocks] }
    }

    fn push(&mut self, row: usize, col: usize, scale: C64, mat: Option<Arc<CMat>>) {
        debug_assert!(col < row);
        self.rows[row].push(Block { col, scale, mat });
    }

    pub fn blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks() * self.d
    }

    pub fn apply(&self, x: &CVec) -> CVec {
        let mut out = x.clone();
        for (r, row) in self.rows.iter().enumerate() {
            for b in row {
                let y = b.act(&block(x, b.col, self.d));
                let mut dst = out.rows_mut(r * self.d, self.d);
                dst += y;
            }
        }
        out
    }

    pub fn apply_adjoint(&self, x: &CVec) -> CVec {
        let mut out = x.clone();
        for (r, row) in self.rows.iter().enumerate() {
            let xr = block(x, r, self.d);
            for b in row {
                let mut dst = out.rows_mut(b.col * self.d, self.d);
                dst += b.act_adjoint(&xr);
            }
        }
        out
    }

    /// `M⁻¹v` by forward substitution.
    pub fn solve(&self, v: &CVec) -> CVec {
        let d = self.d;
        let mut x = v.clone();
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = CVec::zeros(d);
            for b in row {
                acc += b.act(&block(&x, b.col, d));
            }
            let mut dst = x.rows_mut(r * d, d);
            dst -= acc;
        }
        x
    }

    /// `M⁻†v` by backward substitution.
    pub fn solve_adjoint(&self, v: &CVec) -> CVec {
        let d = self.d;
        let mut y = v.clone();
        for r in (0..self.blocks()).rev() {
            let yr = block(&y, r, d);
            for b in &self.rows[r] {
                let mut dst = y.rows_mut(b.col * d, d);
                dst -= b.act_adjoint(&yr);
            }
        }
        y
    }

    pub fn matrix(&self) -> CMat {
        let d = self.d;
        let n = self.dim();
        let mut m = CMat::identity(n, n);
        for (r, row) in self.rows.iter().enumerate() {
            for b in row {
                let blk = match &b.mat {
                    Some(a) => a.as_ref() * b.scale,
                    None => CMat::identity(d, d) * b.scale,
                };
                let mut view = m.view_mut((r * d, b.col * d), (d, d));
                view += blk;
            }
        }
        m
    }

    pub fn norm(&self) -> f64 {
        operator_norm(self.dim(), |v| self.apply(v), |v| self.apply_adjoint(v))
    }

    pub fn inverse_norm(&self) -> f64 {
        operator_norm(self.dim(), |v| self.solve(v), |v| self.solve_adjoint(v))
    }

    /// `d×d` block `(row, col)` of `M⁻¹`.
    pub fn inverse_block(&self, row: usize, col: usize) -> CMat {
        let d = self.d;
        let mut out = CMat::zeros(d, d);
        for q in 0..d {
            let mut e = CVec::zeros(self.dim());
            e[col * d + q] = ONE;
            out.set_column(q, &block(&self.solve(&e), row, d));
        }
        out
    }
}

fn check_cap(dim: usize, cap: usize) -> Result<(), PrecondError> {
    if dim > cap {
        Err(PrecondError::Resource { dim, cap })
    } else {
        Ok(())
    }
}

/// Truncated-Taylor time-marching system `C_{n,k,p}(M)` for `M = A/α`.
#[derive(Debug, Clone)]
pub struct TaylorSystem {
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub matrix: BlockLower,
}

impl TaylorSystem {
    /// Block indices `n(k+1), …, n(k+1)+p` holding the propagated state.
    pub fn success_blocks(&self) -> std::ops::RangeInclusive<usize> {
        let s = self.n * (self.k + 1);
        s..=s + self.p
    }

    /// `|0⟩|b⟩`.
    pub fn initial_state(&self, b: &CVec) -> CVec {
        let mut v = CVec::zeros(self.matrix.dim());
        v.rows_mut(0, b.len()).copy_from(b);
        v
    }
}

pub fn build_taylor_system(m: &CMat, n: usize, k: usize, p: usize, cap: usize) -> Result<TaylorSystem, PrecondError> {
    if n == 0 || k == 0 || p == 0 {
        return Err(PrecondError::Parameter("n, k and p must be positive".into()));
    }
    let d = m.nrows();
    let blocks = n * (k + 1) + p + 1;
    check_cap(blocks * d, cap)?;
    let a = Arc::new(m.clone());
    let mut c = BlockLower::new(blocks, d);
    for i in 0..n {
        let base = i * (k + 1);
        for j in 1..=k {
            c.push(base + j, base + j - 1, re(-1.0 / j as f64), Some(a.clone()));
        }
        for j in 0..=k {
            c.push((i + 1) * (k + 1), base + j, -ONE, None);
        }
    }
    let s = n * (k + 1);
    for j in 1..=p {
        c.push(s + j, s + j - 1, -ONE, None);
    }
    Ok(TaylorSystem { n, k, p, matrix: c })
}

/// `n` steps of `v ← Σ_{j≤k} M^j v / j!`, returning every intermediate state.
pub fn taylor_stepping_oracle(m: &CMat, b: &CVec, n: usize, k: usize) -> Vec<CVec> {
    let mut out = vec![b.clone()];
    let mut v = b.clone();
    for _ in 0..n {
        let mut term = v.clone();
        let mut next = v.clone();
        for j in 1..=k {
            term = (m * term) * re(1.0 / j as f64);
            next += &term;
        }
        v = next;
        out.push(v.clone());
    }
    out
}

/// Chebyshev polynomials of the second kind `U_0..U_{n−1}` at a matrix argument.
pub fn chebyshev_u_matrices(x: &CMat, n: usize) -> Vec<CMat> {
    let d = x.nrows();
    let mut out: Vec<CMat> = Vec::with_capacity(n);
    for l in 0..n {
        let u = match l {
            0 => CMat::identity(d, d),
            1 => x * re(2.0),
            _ => x * &out[l - 1] * re(2.0) - &out[l - 2],
        };
        out.push(u);
    }
    out
}

pub fn chebyshev_u(x: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let u = match l {
            0 => 1.0,
            1 => 2.0 * x,
            _ => 2.0 * x * out[l - 1] - out[l - 2],
        };
        out.push(u);
    }
    out
}

/// `Pad(M)` with an `n`-block Chebyshev part and `ηn` copy rows.
#[derive(Debug, Clone)]
pub struct PaddedSystem {
    pub n: usize,
    pub eta: usize,
    pub matrix: BlockLower,
}

pub fn build_padded_system(m: &CMat, n: usize, eta: usize, cap: usize) -> Result<PaddedSystem, PrecondError> {
    if n == 0 {
        return Err(PrecondError::Parameter("n must be positive".into()));
    }
    let d = m.nrows();
    let blocks = n * (1 + eta);
    check_cap(blocks * d, cap)?;
    let a = Arc::new(m.clone());
    let mut c = BlockLower::new(blocks, d);
    for i in 1..n {
        c.push(i, i - 1, re(-2.0), Some(a.clone()));
        if i >= 2 {
            c.push(i, i - 2, ONE, None);
        }
    }
    for i in n..blocks {
        c.push(i, i - 1, -ONE, None);
    }
    Ok(PaddedSystem { n, eta, matrix: c })
}

impl PaddedSystem {
    /// Worst `‖(Pad⁻¹)_{l,0} − U_l(M)‖` over `l < n`.
    pub fn inverse_structure_error(&self, m: &CMat) -> f64 {
        let us = chebyshev_u_matrices(m, self.n);
        let d = self.matrix.d;
        let mut worst: f64 = 0.0;
        for q in 0..d {
            let mut e = CVec::zeros(self.matrix.dim());
            e[q] = ONE;
            let x = self.matrix.solve(&e);
            for (l, u) in us.iter().enumerate() {
                worst = worst.max((block(&x, l, d) - u.column(q)).norm());
            }
        }
        worst
    }
}

/// A polynomial given in the monomial or the Chebyshev-T basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "basis", content = "coeffs")]
pub enum Polynomial {
    Monomial(Vec<f64>),
    Chebyshev(Vec<f64>),
}

impl Polynomial {
    /// Coefficients `c_k` of `Σ c_k T_k`.
    pub fn chebyshev(&self) -> Vec<f64> {
        match self {
            Polynomial::Chebyshev(c) => c.clone(),
            Polynomial::Monomial(a) => {
                let mut out = vec![0.0; a.len().max(1)];
                // Chebyshev coefficients of x^j, updated by x·T_k = (T_{k+1} + T_{|k−1|})/2
                let mut pow = vec![1.0];
                for (j, &aj) in a.iter().enumerate() {
                    for (k, &c) in pow.iter().enumerate() {
                        out[k] += aj * c;
                    }
                    if j + 1 < a.len() {
                        let mut next = vec![0.0; pow.len() + 1];
                        for (k, &c) in pow.iter().enumerate() {
                            if k == 0 {
                                next[1] += c;
                            } else {
                                next[k + 1] += c / 2.0;
                                next[k - 1] += c / 2.0;
                            }
                        }
                        pow = next;
                    }
                }
                out
            }
        }
    }

    pub fn degree(&self) -> usize {
        let c = self.chebyshev();
        c.iter().rposition(|x| *x != 0.0).unwrap_or(0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        clenshaw(&self.chebyshev(), x)
    }

    /// `p(M)` for a square matrix.
    pub fn eval_matrix(&self, m: &CMat) -> CMat {
        let c = self.chebyshev();
        let d = m.nrows();
        let (mut b1, mut b2) = (CMat::zeros(d, d), CMat::zeros(d, d));
        for &ck in c.iter().skip(1).rev() {
            let b0 = CMat::identity(d, d) * re(ck) + m * &b1 * re(2.0) - &b2;
            b2 = b1;
            b1 = b0;
        }
        CMat::identity(d, d) * re(c.first().copied().unwrap_or(0.0)) + m * b1 - b2
    }

    /// `max |p|` on `[−1/2, 1/2]` over a uniform grid.
    pub fn max_half(&self, points: usize) -> f64 {
        let pts = points.max(2);
        (0..pts).map(|i| self.eval(-0.5 + i as f64 / (pts - 1) as f64).abs()).fold(0.0, f64::max)
    }
}

/// Coefficients in the rescaled basis (`T̃_0 = 1/2`, `T̃_k = T_k`) and the
/// ancilla state built from their second differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebCoeffState {
    pub n: usize,
    pub beta: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub alpha: f64,
    /// Amplitude at slot `n−1−k` is `(β̃_k − β̃_{k+2})/α`.
    pub state: Vec<f64>,
}

pub fn cheb_coeff_state(p: &Polynomial, n: usize) -> Result<ChebCoeffState, PrecondError> {
    let beta = p.chebyshev();
    if n == 0 || p.degree() + 1 > n {
        return Err(PrecondError::Parameter(format!("degree {} does not fit n = {n}", p.degree())));
    }
    let mut bt = vec![0.0; n + 2];
    for (k, &b) in beta.iter().enumerate().take(n) {
        bt[k] = if k == 0 { 2.0 * b } else { b };
    }
    let diffs: Vec<f64> = (0..n).map(|k| bt[k] - bt[k + 2]).collect();
    let alpha = diffs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if alpha == 0.0 {
        return Err(PrecondError::Parameter("zero polynomial".into()));
    }
    let mut state = vec![0.0; n];
    for (k, dk) in diffs.iter().enumerate() {
        state[n - 1 - k] = dk / alpha;
    }
    bt.truncate(n);
    let mut beta = beta;
    beta.resize(n, 0.0);
    Ok(ChebCoeffState { n, beta, beta_tilde: bt, alpha, state })
}

impl ChebCoeffState {
    /// `½ Σ_k (β̃_k − β̃_{k+2}) U_k(x)`, which equals `p(x)`.
    pub fn u_series(&self, x: f64) -> f64 {
        let u = chebyshev_u(x, self.n);
        (0..self.n).map(|k| self.state[self.n - 1 - k] * self.alpha * u[k]).sum::<f64>() / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyBoundsReport {
    pub n: usize,
    pub p_max: f64,
    /// `√n·α_β̃`.
    pub lemma_rhs: f64,
    pub lemma_holds: bool,
    /// `max_x Σ_{j<n} U_j(x)²` on `[−1/2, 1/2]`.
    pub u_sum_max: f64,
    pub u_sum_min: f64,
    pub u_sum_bound_holds: bool,
    pub two_sided_holds: bool,
}

impl PolyBoundsReport {
    pub fn all_hold(&self) -> bool {
        self.lemma_holds && self.u_sum_bound_holds && self.two_sided_holds
    }
}

pub fn u_square_sum(x: f64, n: usize) -> f64 {
    chebyshev_u(x, n).iter().map(|u| u * u).sum()
}

pub fn check_poly_bounds(p: &Polynomial, n: usize, points: usize) -> Result<PolyBoundsReport, PrecondError> {
    let st = cheb_coeff_state(p, n)?;
    let p_max = p.max_half(points);
    let lemma_rhs = (n as f64).sqrt() * st.alpha;
    let pts = points.max(2);
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..pts {
        let s = u_square_sum(-0.5 + i as f64 / (pts - 1) as f64, n);
        hi = hi.max(s);
        lo = lo.min(s);
    }
    let nf = n as f64;
    let r3 = 3f64.sqrt() / 3.0;
    Ok(PolyBoundsReport {
        n,
        p_max,
        lemma_rhs,
        lemma_holds: p_max < lemma_rhs,
        u_sum_max: hi,
        u_sum_min: lo,
        u_sum_bound_holds: hi <= 2.0 * nf / 3.0 + 1.0 + 1e-12,
        two_sided_holds: lo >= nf / 2.0 - r3 - 1e-12 && hi <= 4.0 / 3.0 * (nf / 2.0 + r3) + 1e-12,
    })
}

/// Applies the inverse-polynomial surrogate `(1 − (1−σ²)^b)/σ` to the singular
/// values of `M/α`, where `b = ⌈κ² ln(κ/ε)⌉`.
pub fn qsvt_inverse_apply(m: &CMat, alpha: f64, kappa: f64, eps: f64, v: &CVec) -> Result<CVec, PrecondError> {
    let svd = (m / re(alpha)).svd(true, true);
    let (u, vt) = (svd.u.ok_or(PrecondError::Singular)?, svd.v_t.ok_or(PrecondError::Singular)?);
    let b = (kappa * kappa * (kappa / eps).ln()).ceil();
    let coeffs = u.adjoint() * v;
    let scaled = CVec::from_iterator(
        coeffs.len(),
        coeffs.iter().zip(svd.singular_values.iter()).map(|(c, &s)| {
            let f = if s > 0.0 { (1.0 - (1.0 - s * s).powf(b)) / s } else { 0.0 };
            c * f
        }),
    );
    Ok(vt.adjoint() * scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPrecondReport {
    pub s: f64,
    pub t: f64,
    pub alpha_a: f64,
    pub alpha_ainv: f64,
    pub solution_norm: f64,
    /// `‖(SA)⁻¹‖`.
    pub inverse_norm: f64,
    /// `√17·α_{A⁻¹}`.
    pub inverse_norm_bound: f64,
    /// `‖(SA)⁻¹b‖/(√17·α_{A⁻¹})`.
    pub amplitude: f64,
    pub fidelity: f64,
    /// `‖(SA)⁻¹Sb/‖·‖ − A⁻¹b/‖·‖‖` from exact solves.
    pub invariance_error: f64,
    pub degree: u64,
    pub rounds: u32,
    pub ledger: QueryCost,
}

impl SelfPrecondReport {
    pub fn guarantees_hold(&self) -> bool {
        self.inverse_norm <= self.inverse_norm_bound * (1.0 + 1e-12) && self.amplitude >= 1.0 / 17f64.sqrt() - 1e-12
    }
}

/// Preconditions with `Π = |b⟩⟨b|`, `s = t/(2α_{A⁻¹})` and inverts `SA` with
/// the inverse-polynomial surrogate.
pub fn self_preconditioned_solve(
    inst: &LinearSystemInstance,
    t: f64,
    eps: f64,
) -> Result<(CVec, SelfPrecondReport), PrecondError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PrecondError::Parameter(format!("ε must lie in (0, 1), got {eps}")));
    }
    let a = &inst.a;
    let b = &inst.b;
    let x = inst.direct_solution()?;
    let norm = x.norm();
    if !(t / 2.0 < norm && norm < 2.0 * t) {
        return Err(PrecondError::PreconditionFailure(format!(
            "estimate t = {t} outside (‖A⁻¹b‖/2, 2‖A⁻¹b‖) for ‖A⁻¹b‖ = {norm}"
        )));
    }
    let svals = a.clone().svd(false, false).singular_values;
    let smin = svals.min();
    let alpha_a = inst.alpha_a.unwrap_or_else(|| svals.max());
    let alpha_ainv = inst.alpha_ainv.unwrap_or(1.0 / smin);
    let s = t / (2.0 * alpha_ainv);
    let pre = scaling_operator(&(b * b.adjoint()), s)?;
    let sa = pre.matrix() * a;
    let lu = sa.clone().lu();
    let y = lu.solve(b).ok_or(PrecondError::Singular)?;
    let sb = pre.apply(b);
    let y_sb = lu.solve(&sb).ok_or(PrecondError::Singular)?;
    let invariance_error = (y_sb.unscale(y_sb.norm()) - x.unscale(norm)).norm();
    let inverse_norm = 1.0 / sa.clone().svd(false, false).singular_values.min();
    let bound = 17f64.sqrt() * alpha_ainv;
    let amplitude = y.norm() / bound;
    let kappa = alpha_a * bound;
    let out = qsvt_inverse_apply(&sa, alpha_a, kappa, eps / 4.0, b)?;
    let out = out.unscale(out.norm());
    let fidelity = out.dotc(&x.unscale(norm)).norm_sqr();
    let degree = inverse_poly_degree(kappa, eps);
    let rounds = tunable_step_count(1.0, amplitude / 2.0)?;
    let n = 2 * rounds as u64 + 1;
    let ledger = QueryCost::new(n * degree, n * (2 * degree + 1));
    Ok((
        out,
        SelfPrecondReport {
            s,
            t,
            alpha_a,
            alpha_ainv,
            solution_norm: norm,
            inverse_norm,
            inverse_norm_bound: bound,
            amplitude,
            fidelity,
            invariance_error,
            degree,
            rounds,
            ledger,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub s: f64,
    pub inverse_norm_plain: f64,
    pub inverse_norm_precond: f64,
    /// `√(‖M⁻¹Π‖²/s² + ‖M⁻¹(I−Π)‖²)`.
    pub inflation_bound: f64,
    pub solution_norm_plain: f64,
    pub solution_norm_precond: f64,
    /// `solution_norm_precond / solution_norm_plain`, expected `1/s`.
    pub boost: f64,
    pub inflation_holds: bool,
    pub boost_exact: bool,
}

pub fn norm_report(m: &BlockLower, pre: &Preconditioner, v: &CVec) -> NormReport {
    let n = m.dim();
    let proj = |x: &CVec| pre.subspace.project(x);
    let inv_plain = m.inverse_norm();
    let inv_pre = operator_norm(n, |x| m.solve(&pre.apply_inverse(x)), |x| pre.apply_inverse(&m.solve_adjoint(x)));
    let on = operator_norm(n, |x| m.solve(&proj(x)), |x| proj(&m.solve_adjoint(x)));
    let off = operator_norm(n, |x| m.solve(&(x - proj(x))), |x| {
        let y = m.solve_adjoint(x);
        &y - proj(&y)
    });
    let inflation_bound = (on * on / (pre.s * pre.s) + off * off).sqrt();
    let sol_plain = m.solve(v).norm();
    let sol_pre = m.solve(&pre.apply_inverse(v)).norm();
    let boost = sol_pre / sol_plain;
    NormReport {
        s: pre.s,
        inverse_norm_plain: inv_plain,
        inverse_norm_precond: inv_pre,
        inflation_bound,
        solution_norm_plain: sol_plain,
        solution_norm_precond: sol_pre,
        boost,
        inflation_holds: inv_pre <= inflation_bound * (1.0 + 1e-9),
        boost_exact: (boost * pre.s - 1.0).abs() <= 1e-9,
    }
}

/// The linear systems that take a preconditioner in the applications.
#[derive(Debug, Clone)]
pub enum AppSystem {
    Taylor { m: CMat, n: usize, k: usize, p: usize, b: CVec },
    PaddedQeve { m: CMat, n: usize, psi: CVec },
    PaddedQevt { m: CMat, poly: Polynomial, psi: CVec },
}

/// A built application system with its preconditioner and right-hand side.
#[derive(Debug, Clone)]
pub struct PreconditionedSystem {
    pub matrix: BlockLower,
    pub precond: Preconditioner,
    pub rhs: CVec,
    pub coeff_state: Option<ChebCoeffState>,
}

impl PreconditionedSystem {
    /// `(SM)⁻¹ rhs`.
    pub fn solve(&self) -> CVec {
        self.matrix.solve(&self.precond.apply_inverse(&self.rhs))
    }
}

pub fn precondition_application(sys: &AppSystem, cap: usize) -> Result<(PreconditionedSystem, NormReport), PrecondError> {
    let built = build_application(sys, cap)?;
    let rep = norm_report(&built.matrix, &built.precond, &built.rhs);
    Ok((built, rep))
}

fn build_application(sys: &AppSystem, cap: usize) -> Result<PreconditionedSystem, PrecondError> {
    match sys {
        AppSystem::Taylor { m, n, k, p, b } => {
            let t = build_taylor_system(m, *n, *k, *p, cap)?;
            let blocks = t.matrix.blocks();
            let mut u = CVec::zeros(blocks);
            u[0] = ONE;
            let s = 1.0 / ((k * n) as f64).sqrt();
            let pre = ancilla_preconditioner(&u, m.nrows(), s).or_else(|e| match e {
                // k = n = 1 gives s = 1; scale just below it
                PrecondError::InvalidPreconditioner { .. } if *k * *n == 1 => ancilla_preconditioner(&u, m.nrows(), 0.999),
                e => Err(e),
            })?;
            let rhs = t.initial_state(b);
            Ok(PreconditionedSystem { matrix: t.matrix, precond: pre, rhs, coeff_state: None })
        }
        AppSystem::PaddedQeve { m, n, psi } => {
            if *n < 3 {
                return Err(PrecondError::Parameter("the eigenvalue estimator needs n ≥ 3".into()));
            }
            let pad = build_padded_system(m, *n, 0, cap)?;
            let mut u = CVec::zeros(*n);
            u[0] = re(std::f64::consts::FRAC_1_SQRT_2);
            u[2] = re(-std::f64::consts::FRAC_1_SQRT_2);
            let pre = ancilla_preconditioner(&u, m.nrows(), 1.0 / (*n as f64).sqrt())?;
            let rhs = crate::numerics::kron(&CMat::from_column_slice(*n, 1, u.as_slice()), &CMat::from_column_slice(psi.len(), 1, psi.as_slice()));
            Ok(PreconditionedSystem { matrix: pad.matrix, precond: pre, rhs: rhs.column(0).into_owned(), coeff_state: None })
        }
        AppSystem::PaddedQevt { m, poly, psi } => {
            let n = poly.degree() + 1;
            let st = cheb_coeff_state(poly, n)?;
            let pad = build_padded_system(m, n, 1, cap)?;
            let mut u = CVec::zeros(2 * n);
            for (j, &a) in st.state.iter().enumerate() {
                u[j] = re(a);
            }
            let s = poly.max_half(4001) / ((n as f64).sqrt() * st.alpha);
            let pre = ancilla_preconditioner(&u, m.nrows(), s)?;
            let mut rhs = CVec::zeros(pad.matrix.dim());
            let d = psi.len();
            for j in 0..n {
                rhs.rows_mut(j * d, d).copy_from(&(psi * u[j]));
            }
            Ok(PreconditionedSystem { matrix: pad.matrix, precond: pre, rhs, coeff_state: Some(st) })
        }
    }
}

/// `A = SΛS⁻¹` with real spectrum and an explicit eigenbasis.
#[derive(Debug, Clone)]
pub struct NonnormalInstance {
    pub basis: CMat,
    pub eigenvalues: Vec<f64>,
}

impl NonnormalInstance {
    pub fn matrix(&self) -> Result<CMat, PrecondError> {
        let inv = self.basis.clone().try_inverse().ok_or(PrecondError::Singular)?;
        let lam = CMat::from_diagonal(&CVec::from_iterator(self.eigenvalues.len(), self.eigenvalues.iter().map(|&x| re(x))));
        Ok(&self.basis * lam * inv)
    }

    pub fn kappa_s(&self) -> f64 {
        let s = self.basis.clone().svd(false, false).singular_values;
        s.max() / s.min()
    }

    /// Unit eigenvector `ψ_j`.
    pub fn eigenvector(&self, j: usize) -> CVec {
        let v = self.basis.column(j).into_owned();
        v.unscale(v.norm())
    }

    /// `α_A = max(‖A‖, 2 max|λ|)`, so that the spectrum of `A/α_A` lies in `[−1/2, 1/2]`.
    pub fn alpha(&self) -> Result<f64, PrecondError> {
        let lmax = self.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        Ok(op_norm(&self.matrix()?).max(2.0 * lmax))
    }

    /// `p(A/α)` through the eigenbasis.
    pub fn apply_poly(&self, p: &Polynomial, alpha: f64, v: &CVec) -> Result<CVec, PrecondError> {
        let inv = self.basis.clone().try_inverse().ok_or(PrecondError::Singular)?;
        let c = inv * v;
        let scaled = CVec::from_iterator(c.len(), c.iter().zip(&self.eigenvalues).map(|(ci, &l)| ci * p.eval(l / alpha)));
        Ok(&self.basis * scaled)
    }
}

/// Random eigenbasis with condition number exactly `kappa_s`.
pub fn nonnormal_instance<R: Rng>(rng: &mut R, eigenvalues: &[f64], kappa_s: f64) -> NonnormalInstance {
    let d = eigenvalues.len();
    let u = random::unitary(rng, d);
    let v = random::unitary(rng, d);
    let sig = CVec::from_iterator(
        d,
        (0..d).map(|i| re(if d == 1 { 1.0 } else { kappa_s.powf(i as f64 / (d - 1) as f64) })),
    );
    NonnormalInstance { basis: u * CMat::from_diagonal(&sig) * v, eigenvalues: eigenvalues.to_vec() }
}

/// Query counts of one application run under the inverse-polynomial charge model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppLedger {
    pub kappa: f64,
    pub degree: u64,
    /// Post-selection amplitude before amplification.
    pub amplitude: f64,
    pub rounds: u32,
    pub cost: QueryCost,
}

fn app_ledger(m: &BlockLower, inverse_norm: f64, success: f64, eps: f64, oracle_b_per_attempt: u64) -> Result<AppLedger, PrecondError> {
    let kappa = (m.norm() * inverse_norm).max(1.0 + 1e-12);
    let degree = inverse_poly_degree(kappa, eps);
    let amplitude = (success / 2.0).min(1.0);
    let rounds = tunable_step_count(1.0, amplitude)?;
    let n = 2 * rounds as u64 + 1;
    Ok(AppLedger { kappa, degree, amplitude, rounds, cost: QueryCost::new(n * degree, n * oracle_b_per_attempt) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeReport {
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub error: f64,
    /// `‖e^{tA}b‖`.
    pub final_norm: f64,
    /// `max_τ ‖e^{τA}b‖` on the τ-grid.
    pub max_norm: f64,
    pub grid: usize,
    pub norms: NormReport,
    pub ledger: AppLedger,
    pub ledger_plain: AppLedger,
}

/// `e^{tA}b/‖e^{tA}b‖` from the preconditioned Taylor system.
pub fn run_ode(a: &CMat, b: &CVec, t: f64, eps: f64, grid: usize) -> Result<(CVec, OdeReport), PrecondError> {
    if !(t > 0.0) || !(eps > 0.0 && eps < 1.0) {
        return Err(PrecondError::Parameter("need t > 0 and 0 < ε < 1".into()));
    }
    let b = b.unscale(b.norm());
    let norm_a = op_norm(a);
    let n = ((t * norm_a).ceil() as usize).max(1);
    let m = a * re(t / n as f64);
    let mut k = 1;
    let mut fact = 2.0;
    while n as f64 * std::f64::consts::E / fact > eps / 4.0 {
        k += 1;
        fact *= (k + 1) as f64;
    }
    let sys = AppSystem::Taylor { m, n, k, p: n, b: b.clone() };
    let (built, norms) = precondition_application(&sys, DIM_CAP)?;
    let x = built.solve();
    let tay = build_taylor_system(match &sys {
        AppSystem::Taylor { m, .. } => m,
        _ => unreachable!(),
    }, n, k, n, DIM_CAP)?;
    let d = b.len();
    let mut out = CVec::zeros(d);
    let mut success = 0.0;
    for i in tay.success_blocks() {
        let blk = block(&x, i, d);
        success += blk.norm_squared();
        out += blk;
    }
    let out = out.unscale(out.norm());
    let exact = (a * re(t)).exp() * &b;
    let final_norm = exact.norm();
    let error = (&out - exact.unscale(final_norm)).norm();
    let grid = grid.max(2);
    let max_norm = (0..=grid).map(|i| ((a * re(t * i as f64 / grid as f64)).exp() * &b).norm()).fold(0.0, f64::max);
    let frac = (success / x.norm_squared()).sqrt();
    let ledger = app_ledger(&built.matrix, norms.inverse_norm_precond, frac * norms.solution_norm_precond / norms.inverse_norm_precond, eps, 1)?;
    let ledger_plain = app_ledger(&built.matrix, norms.inverse_norm_plain, frac * norms.solution_norm_plain / norms.inverse_norm_plain, eps, 1)?;
    Ok((out, OdeReport { n, k, p: n, error, final_norm, max_norm, grid, norms, ledger, ledger_plain }))
}

/// `c·T̃_l(x)` least-squares fit of history amplitudes; returns `(x, residual)`.
pub fn fit_history(h: &[C64], points: usize) -> (f64, f64) {
    let hh: f64 = h.iter().map(|z| z.norm_sqr()).sum();
    let resid = |x: f64| {
        let mut tt = 0.0;
        let mut th = ZERO;
        let (mut t0, mut t1) = (1.0, x);
        for (l, hl) in h.iter().enumerate() {
            let tl = match l {
                0 => 0.5,
                1 => x,
                _ => {
                    let t2 = 2.0 * x * t1 - t0;
                    t0 = t1;
                    t1 = t2;
                    t2
                }
            };
            tt += tl * tl;
            th += hl * tl;
        }
        hh - th.norm_sqr() / tt
    };
    let pts = points.max(3);
    let step = 1.0 / (pts - 1) as f64;
    let (mut best, mut best_r) = (0.0, f64::INFINITY);
    for i in 0..pts {
        let x = -0.5 + i as f64 * step;
        let r = resid(x);
        if r < best_r {
            best = x;
            best_r = r;
        }
    }
    // golden-section refinement inside the neighbouring grid cells
    let (mut lo, mut hi) = ((best - step).max(-0.5), (best + step).min(0.5));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if resid(x1) < resid(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let x = (lo + hi) / 2.0;
    (x, resid(x).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeveReport {
    pub n: usize,
    pub alpha: f64,
    pub estimate: f64,
    pub residual: f64,
    /// `‖(S·Pad)⁻¹ rhs‖ / n`.
    pub norm_over_n: f64,
    pub norms: NormReport,
    pub ledger: AppLedger,
}

/// Eigenvalue estimate from the preconditioned Chebyshev history state.
pub fn run_qeve(inst: &NonnormalInstance, psi: &CVec, eps: f64) -> Result<(f64, QeveReport), PrecondError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PrecondError::Parameter(format!("ε must lie in (0, 1), got {eps}")));
    }
    let alpha = inst.alpha()?;
    let n = ((4.0 * alpha / eps).ceil() as usize).max(3);
    let m = inst.matrix()? / re(alpha);
    let psi = psi.unscale(psi.norm());
    let (built, norms) = precondition_application(&AppSystem::PaddedQeve { m, n, psi: psi.clone() }, DIM_CAP)?;
    let x = built.solve();
    let d = psi.len();
    let h: Vec<C64> = (0..n).map(|l| psi.dotc(&block(&x, l, d))).collect();
    let (xhat, residual) = fit_history(&h, 4001);
    let ledger = app_ledger(&built.matrix, norms.inverse_norm_precond, norms.solution_norm_precond / norms.inverse_norm_precond, 0.1, 1)?;
    Ok((
        xhat * alpha,
        QeveReport { n, alpha, estimate: xhat * alpha, residual, norm_over_n: norms.solution_norm_precond / n as f64, norms, ledger },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QevtReport {
    pub n: usize,
    pub alpha: f64,
    pub s: f64,
    pub p_max: f64,
    pub error: f64,
    pub norms: NormReport,
    pub ledger: AppLedger,
    pub ledger_plain: AppLedger,
}

/// `p(A/α)ψ/‖·‖` from the padded system with the coefficient-state preconditioner.
pub fn run_qevt(inst: &NonnormalInstance, poly: &Polynomial, psi: &CVec, eps: f64) -> Result<(CVec, QevtReport), PrecondError> {
    let alpha = inst.alpha()?;
    let m = inst.matrix()? / re(alpha);
    let psi = psi.unscale(psi.norm());
    let (built, norms) = precondition_application(&AppSystem::PaddedQevt { m, poly: poly.clone(), psi: psi.clone() }, DIM_CAP)?;
    let n = poly.degree() + 1;
    let d = psi.len();
    let x = built.solve();
    let mut out = CVec::zeros(d);
    let mut success = 0.0;
    for l in n..2 * n {
        let blk = block(&x, l, d);
        success += blk.norm_squared();
        out += blk;
    }
    if out.norm() == 0.0 {
        return Err(PrecondError::Domain("p(A/α)ψ vanishes".into()));
    }
    let out = out.unscale(out.norm());
    let want = inst.apply_poly(poly, alpha, &psi)?;
    let error = (&out - want.unscale(want.norm())).norm();
    let frac = (success / x.norm_squared()).sqrt();
    let ledger = app_ledger(&built.matrix, norms.inverse_norm_precond, frac * norms.solution_norm_precond / norms.inverse_norm_precond, eps, 1)?;
    let ledger_plain = app_ledger(&built.matrix, norms.inverse_norm_plain, frac * norms.solution_norm_plain / norms.inverse_norm_plain, eps, 1)?;
    Ok((
        out,
        QevtReport { n, alpha, s: built.precond.s, p_max: poly.max_half(4001), error, norms, ledger, ledger_plain },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateReport {
    pub delta: f64,
    pub gamma0: f64,
    pub kappa_s: f64,
    pub degree: usize,
    /// `degree / ((α/δ)·ln(κ_S/(|γ_0|ε)))`.
    pub degree_constant: f64,
    pub fidelity: f64,
    pub qevt: QevtReport,
}

/// Ground state of a gapped real spectrum via `p(x) = (1 − g(x))/2`, with `g`
/// the sign approximant of margin `δ/(2α)`.
pub fn run_ground_state(inst: &NonnormalInstance, psi: &CVec, delta: f64, eps: f64) -> Result<(CVec, GroundStateReport), PrecondError> {
    let mut order: Vec<usize> = (0..inst.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| inst.eigenvalues[i].total_cmp(&inst.eigenvalues[j]));
    let (l0, l1) = (inst.eigenvalues[order[0]], inst.eigenvalues.get(*order.get(1).unwrap_or(&order[0])).copied().unwrap_or(f64::INFINITY));
    if !(l0 <= -delta / 2.0 && l1 >= delta / 2.0) {
        return Err(PrecondError::PreconditionFailure(format!("spectral gap δ = {delta} violated by λ_0 = {l0}, λ_1 = {l1}")));
    }
    let alpha = inst.alpha()?;
    let psi = psi.unscale(psi.norm());
    let inv = inst.basis.clone().try_inverse().ok_or(PrecondError::Singular)?;
    let coords = inv * &psi;
    let col0 = inst.basis.column(order[0]).norm();
    let gamma0 = coords[order[0]].norm() * col0;
    let kappa_s = inst.kappa_s();
    let target = (eps * gamma0 / (2.0 * kappa_s)).min(0.5);
    let nu = delta / (2.0 * alpha);
    let g = cheb_sign_approx(nu, target)?;
    let mut c: Vec<f64> = g.coeffs.iter().map(|x| -x / 2.0).collect();
    c[0] += 0.5;
    let poly = Polynomial::Chebyshev(c);
    let (out, qevt) = run_qevt(inst, &poly, &psi, eps)?;
    let gs = inst.eigenvector(order[0]);
    let fidelity = gs.dotc(&out).norm_sqr();
    let degree = poly.degree();
    let degree_constant = degree as f64 / ((alpha / delta) * (kappa_s / (gamma0 * eps)).ln());
    Ok((out, GroundStateReport { delta, gamma0, kappa_s, degree, degree_constant, fidelity, qevt }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QevtBlockReport {
    pub n: usize,
    /// `α_{p,cond} = ‖p‖_max·‖(S·Pad)⁻¹‖/n`.
    pub alpha_cond: f64,
    /// `α_{p,cond}/(‖p‖_max·κ_S)`.
    pub normalization_constant: f64,
    /// `‖α_{p,cond}·B − p(A/α)‖`.
    pub block_error: f64,
    /// Rounds to amplify to `p(A/α)/(2‖p(A/α)‖)`.
    pub rounds: u32,
}

/// Block encoding `B = p(A/α)/α_{p,cond}` read off the preconditioned padded inverse.
pub fn run_qevt_block(inst: &NonnormalInstance, poly: &Polynomial) -> Result<(CMat, QevtBlockReport), PrecondError> {
    let alpha = inst.alpha()?;
    let m = inst.matrix()? / re(alpha);
    let d = m.nrows();
    let mut e0 = CVec::zeros(d);
    e0[0] = ONE;
    let (built, norms) = precondition_application(&AppSystem::PaddedQevt { m: m.clone(), poly: poly.clone(), psi: e0 }, DIM_CAP)?;
    let n = poly.degree() + 1;
    let st = built.coeff_state.as_ref().expect("qevt systems carry their coefficient state");
    let norm_inv = norms.inverse_norm_precond;
    let mut blk = CMat::zeros(d, d);
    for q in 0..d {
        let mut rhs = CVec::zeros(built.matrix.dim());
        for j in 0..n {
            rhs[j * d + q] = re(st.state[j]);
        }
        let x = built.matrix.solve(&built.precond.apply_inverse(&rhs));
        let mut col = CVec::zeros(d);
        for l in n..2 * n {
            col += block(&x, l, d);
        }
        blk.set_column(q, &(col / re((n as f64).sqrt() * 2.0 * norm_inv)));
    }
    let p_max = poly.max_half(4001);
    let alpha_cond = p_max * norm_inv / n as f64;
    let pa = poly.eval_matrix(&m);
    let block_error = (&blk * re(alpha_cond) - &pa).norm() / pa.norm().max(1e-300);
    let rounds = tunable_step_count(1.0, op_norm(&pa) / (2.0 * alpha_cond))?;
    Ok((
        blk,
        QevtBlockReport { n, alpha_cond, normalization_constant: alpha_cond / (p_max * inst.kappa_s()), block_error, rounds },
    ))
}
