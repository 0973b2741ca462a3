//! Block encodings, qubitization, and the threshold-function machinery:
//! odd Chebyshev sign approximants, threshold quartets, the Dirichlet ratio.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc_inv};
use thiserror::Error;

use crate::numerics::{
    is_hermitian, spectral_decompose, CMat, CVec, HermitianSpectrum, NumericsError, C64, I, ONE, TAU_UNIT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("normalization {alpha} is below the operator norm {norm}")]
    Normalization { alpha: f64, norm: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("sign approximation failed: achieved band error {achieved:e}, target {target:e}")]
    ApproximationFailure { achieved: f64, target: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Smallest integer power of three that is at least `x`.
pub fn pow3_at_least(x: f64) -> i32 {
    let mut e = x.log(3.0).floor() as i32 - 1;
    while 3f64.powi(e) < x * (1.0 - 1e-14) {
        e += 1;
    }
    e
}

/// Smallest integer power of three strictly above `x`.
pub fn pow3_above(x: f64) -> i32 {
    let mut e = x.log(3.0).floor() as i32 - 1;
    while 3f64.powi(e) <= x * (1.0 + 1e-14) {
        e += 1;
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rescaling {
    /// `α_A = 3^exp_a`.
    pub exp_a: i32,
    /// `α_{A⁻¹} = 3^exp_inv`.
    pub exp_inv: i32,
}

impl Rescaling {
    /// Round `α_A` up to a power of three and `α_{A⁻¹}` to the next power of
    /// three strictly above it. An empty clock register is bumped to one stage.
    pub fn round(alpha_a: f64, alpha_ainv: f64) -> Self {
        let exp_a = pow3_at_least(alpha_a);
        let mut exp_inv = pow3_above(alpha_ainv);
        if exp_a + exp_inv <= 0 {
            exp_inv = 1 - exp_a;
        }
        Rescaling { exp_a, exp_inv }
    }

    pub fn alpha_a(&self) -> f64 {
        3f64.powi(self.exp_a)
    }

    pub fn alpha_ainv(&self) -> f64 {
        3f64.powi(self.exp_inv)
    }

    pub fn m(&self) -> usize {
        (self.exp_a + self.exp_inv) as usize
    }

    pub fn kappa(&self) -> f64 {
        3f64.powi(self.exp_a + self.exp_inv)
    }
}

/// `A/α_A = G†UG` for a Hermitian `A`, with `U` Hermitian and unitary.
#[derive(Debug, Clone)]
pub struct BlockEncoding {
    pub u: CMat,
    pub g: CMat,
    pub alpha_a: f64,
    pub alpha_ainv: Option<f64>,
    pub rescaling: Option<Rescaling>,
    a: CMat,
    spectrum: HermitianSpectrum,
}

impl BlockEncoding {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.a
    }

    pub fn spectrum(&self) -> &HermitianSpectrum {
        &self.spectrum
    }

    /// `G†UG`.
    pub fn encoded(&self) -> CMat {
        self.g.adjoint() * &self.u * &self.g
    }

    /// Eigenvalues of `A/α_A`, in the order of [`Self::spectrum`].
    pub fn scaled_eigenvalues(&self) -> Vec<f64> {
        self.spectrum.eigenvalues.iter().map(|l| l / self.alpha_a).collect()
    }

    pub fn m(&self) -> Option<usize> {
        self.rescaling.map(|r| r.m())
    }

    pub fn kappa(&self) -> Option<f64> {
        self.alpha_ainv.map(|b| b * self.alpha_a)
    }

    /// Checks the Hermitian-encoding and qubitization contracts; returns the worst residual.
    pub fn contract_residual(&self) -> f64 {
        let d = self.dim();
        let e = self.encoded();
        let herm = (&e - e.adjoint()).norm();
        let sq = self.g.adjoint() * &self.u * &self.u * &self.g - CMat::identity(d, d);
        let enc = (&e - self.a.unscale(self.alpha_a)).norm();
        herm.max(sq.norm()).max(enc)
    }
}

pub fn build_block_encoding(a: &CMat, alpha_a: f64) -> Result<BlockEncoding, EncodingError> {
    if !is_hermitian(a, TAU_UNIT) {
        return Err(EncodingError::Contract("block encodings here require Hermitian input".into()));
    }
    if !(alpha_a > 0.0) {
        return Err(EncodingError::Parameter(format!("normalization must be positive, got {alpha_a}")));
    }
    let spectrum = spectral_decompose(a)?;
    let norm = spectrum.norm();
    if alpha_a < norm * (1.0 - 1e-12) {
        return Err(EncodingError::Normalization { alpha: alpha_a, norm });
    }
    let d = a.nrows();
    let b = a.unscale(alpha_a);
    let s = spectrum.apply_fn(|l| {
        let x = l / alpha_a;
        C64::new((1.0 - x * x).max(0.0).sqrt(), 0.0)
    });
    let mut u = CMat::zeros(2 * d, 2 * d);
    u.view_mut((0, 0), (d, d)).copy_from(&b);
    u.view_mut((0, d), (d, d)).copy_from(&s);
    u.view_mut((d, 0), (d, d)).copy_from(&s);
    u.view_mut((d, d), (d, d)).copy_from(&(-&b));
    let mut g = CMat::zeros(2 * d, d);
    g.view_mut((0, 0), (d, d)).fill_with_identity();
    Ok(BlockEncoding { u, g, alpha_a, alpha_ainv: None, rescaling: None, a: a.clone(), spectrum })
}

/// Re-encode with `α_A ≥ 2‖A‖` and both normalizations integer powers of three.
pub fn rescale_for_solver(be: &BlockEncoding, alpha_ainv: f64) -> Result<BlockEncoding, EncodingError> {
    let min = be.spectrum.min_abs();
    if min <= 1e-14 * be.spectrum.norm().max(1.0) {
        return Err(EncodingError::Domain("matrix is singular".into()));
    }
    if alpha_ainv < (1.0 / min) * (1.0 - 1e-12) {
        return Err(EncodingError::Normalization { alpha: alpha_ainv, norm: 1.0 / min });
    }
    let r = Rescaling::round(be.alpha_a.max(2.0 * be.spectrum.norm()), alpha_ainv);
    let mut out = build_block_encoding(&be.a, r.alpha_a())?;
    out.alpha_ainv = Some(r.alpha_ainv());
    out.rescaling = Some(r);
    Ok(out)
}

/// `W = (2GG† − I)U`.
pub fn walk_operator(be: &BlockEncoding) -> Result<CMat, EncodingError> {
    let res = be.contract_residual();
    if res > 1e-8 {
        return Err(EncodingError::Contract(format!("qubitization prerequisites fail (residual {res:e})")));
    }
    let n = be.u.nrows();
    let refl = (&be.g * be.g.adjoint()).scale(2.0) - CMat::identity(n, n);
    Ok(refl * &be.u)
}

#[derive(Debug, Clone)]
pub struct QubitizedSubspace {
    /// `λ_u/α_A`.
    pub lambda: f64,
    pub phi0: CVec,
    /// Absent for one-dimensional subspaces.
    pub phi1: Option<CVec>,
    pub phi_plus: CVec,
    pub phi_minus: Option<CVec>,
    /// `arccos(λ_u/α_A)`; the minus vector carries the negated phase.
    pub theta: f64,
}

impl QubitizedSubspace {
    pub fn dimension(&self) -> usize {
        if self.phi1.is_some() {
            2
        } else {
            1
        }
    }

    /// Worst deviation from the canonical matrix forms of `U` and `GG†`.
    pub fn representation_residual(&self, be: &BlockEncoding) -> f64 {
        let ggt = &be.g * be.g.adjoint();
        let Some(phi1) = &self.phi1 else {
            let v = &self.phi0;
            let uu = v.dotc(&(&be.u * v));
            let gg = v.dotc(&(&ggt * v));
            return (uu - C64::new(self.lambda.signum(), 0.0)).norm().max((gg - ONE).norm());
        };
        let basis = [&self.phi0, phi1];
        let s = (1.0 - self.lambda * self.lambda).sqrt();
        let want_u = [[self.lambda, s], [s, -self.lambda]];
        let want_g = [[1.0, 0.0], [0.0, 0.0]];
        let mut worst: f64 = 0.0;
        for (i, bi) in basis.iter().enumerate() {
            for (j, bj) in basis.iter().enumerate() {
                let uu = bi.dotc(&(&be.u * *bj));
                let gg = bi.dotc(&(&ggt * *bj));
                worst = worst.max((uu - C64::new(want_u[i][j], 0.0)).norm());
                worst = worst.max((gg - C64::new(want_g[i][j], 0.0)).norm());
            }
        }
        worst
    }
}

pub fn qubitize(be: &BlockEncoding) -> Result<Vec<QubitizedSubspace>, EncodingError> {
    let res = be.contract_residual();
    if res > 1e-8 {
        return Err(EncodingError::Contract(format!("qubitization prerequisites fail (residual {res:e})")));
    }
    let mut out = Vec::with_capacity(be.dim());
    for (u, &lam) in be.spectrum.eigenvalues.iter().enumerate() {
        let mu = (lam / be.alpha_a).clamp(-1.0, 1.0);
        let phi0 = &be.g * be.spectrum.vector(u);
        if 1.0 - mu.abs() < 1e-12 {
            out.push(QubitizedSubspace {
                lambda: mu.signum(),
                phi_plus: phi0.clone(),
                phi0,
                phi1: None,
                phi_minus: None,
                theta: mu.signum().acos(),
            });
            continue;
        }
        let s = (1.0 - mu * mu).sqrt();
        let phi1 = (&be.u * &phi0 - phi0.scale(mu)).unscale(s);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = (&phi0 + &phi1 * I).scale(h);
        let minus = (&phi0 - &phi1 * I).scale(h);
        out.push(QubitizedSubspace {
            lambda: mu,
            phi0,
            phi1: Some(phi1),
            phi_plus: plus,
            phi_minus: Some(minus),
            theta: mu.acos(),
        });
    }
    Ok(out)
}

/// Clenshaw evaluation of `Σ c_k T_k(x)`.
pub fn clenshaw(coeffs: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in coeffs.iter().skip(1).rev() {
        let b0 = ck + 2.0 * x * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    coeffs.first().copied().unwrap_or(0.0) + x * b1 - b2
}

/// `e^{-x} I_j(x)` for `j = 0..=n` via Miller's backward recurrence,
/// normalized with `s_0 + 2 Σ s_j = 1`.
pub fn scaled_bessel_i(x: f64, n: usize) -> Vec<f64> {
    if x == 0.0 {
        let mut v = vec![0.0; n + 1];
        v[0] = 1.0;
        return v;
    }
    let start = ((184.0 * x).sqrt() as usize + 50).max(n + 20);
    let mut vals = vec![0.0; start + 2];
    vals[start] = 1e-280;
    for j in (1..=start).rev() {
        vals[j - 1] = vals[j + 1] + (2.0 * j as f64 / x) * vals[j];
        if vals[j - 1] > 1e250 {
            for v in vals[j - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let total = vals[0] + 2.0 * vals[1..].iter().sum::<f64>();
    vals.truncate(n + 1);
    vals.iter().map(|v| v / total).collect()
}

/// An odd polynomial `g = Σ β_j T_j` approximating `sign(x)` outside `(−ν, ν)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignApprox {
    pub nu: f64,
    pub eps: f64,
    /// Steepness of the underlying `erf(kx)`.
    pub k: f64,
    /// Chebyshev coefficients; even entries are zero.
    pub coeffs: Vec<f64>,
    /// Worst band violation measured on the verification grid (0 when inside bands).
    pub achieved: f64,
}

impl SignApprox {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        clenshaw(&self.coeffs, x)
    }

    /// Worst violation of the band conditions on `points` samples per band.
    pub fn band_violation(&self, points: usize) -> f64 {
        let mut worst: f64 = 0.0;
        let pts = points.max(2);
        for i in 0..pts {
            let x = self.nu + (1.0 - self.nu) * i as f64 / (pts - 1) as f64;
            for (y, sign) in [(self.eval(x), 1.0), (self.eval(-x), -1.0)] {
                let y = y * sign;
                worst = worst.max((1.0 - self.eps) - y).max(y - 1.0);
            }
        }
        for i in 0..pts {
            let x = -1.0 + 2.0 * i as f64 / (pts - 1) as f64;
            worst = worst.max(self.eval(x).abs() - 1.0);
        }
        worst.max(0.0)
    }
}

/// Chebyshev coefficients of `erf(kx)` truncated once the tail is below `delta`,
/// then divided by `1 + delta` so the result stays inside `[−1, 1]`.
fn erf_coefficients(k: f64, delta: f64) -> Vec<f64> {
    let x = k * k / 2.0;
    let guess = ((184.0 * x).sqrt() as usize) + 50;
    let s = scaled_bessel_i(x, guess + 1);
    let pref = 2.0 * k / PI.sqrt();
    let mut beta: Vec<f64> = (0..guess)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            pref * sign * (s[j] + s[j + 1]) / (2 * j + 1) as f64
        })
        .collect();
    let mut tail = 0.0;
    let mut cut = beta.len();
    for j in (0..beta.len()).rev() {
        if tail + beta[j].abs() > delta {
            cut = j + 1;
            break;
        }
        tail += beta[j].abs();
    }
    beta.truncate(cut.max(1));
    let mut coeffs = vec![0.0; 2 * beta.len()];
    for (j, b) in beta.iter().enumerate() {
        coeffs[2 * j + 1] = b / (1.0 + delta);
    }
    coeffs
}

pub const BAND_GRID: usize = 10_000;

pub fn cheb_sign_approx(nu: f64, eps: f64) -> Result<SignApprox, EncodingError> {
    if !(nu > 0.0 && nu < 1.0) || !(eps > 0.0 && eps < 1.0) {
        return Err(EncodingError::Parameter(format!("need 0 < ν, ε < 1, got ν = {nu}, ε = {eps}")));
    }
    // erf(kν) ≥ 1 − ε/2
    let mut k = erfc_inv(eps / 2.0) / nu;
    while erf(k * nu) < 1.0 - eps / 2.0 {
        k *= 1.0 + 1e-9;
    }
    let mut delta = eps / 8.0;
    let mut last = f64::INFINITY;
    for _ in 0..8 {
        let mut approx = SignApprox { nu, eps, k, coeffs: erf_coefficients(k, delta), achieved: 0.0 };
        let v = approx.band_violation(BAND_GRID);
        if v == 0.0 {
            return Ok(approx);
        }
        approx.achieved = v;
        last = v;
        delta /= 2.0;
    }
    Err(EncodingError::ApproximationFailure { achieved: last, target: eps })
}

/// Values of the quartet `F = f_a I + i f_b Z + i f_c X + i f_d Y` at one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartet {
    pub fa: f64,
    pub fb: f64,
    pub fc: f64,
    pub fd: f64,
}

impl Quartet {
    pub fn norm_sqr(&self) -> f64 {
        self.fa * self.fa + self.fb * self.fb + self.fc * self.fc + self.fd * self.fd
    }

    /// The 2×2 operator in the computational basis.
    pub fn matrix(&self) -> [[C64; 2]; 2] {
        let a = C64::new(self.fa, 0.0);
        [
            [a + I * self.fb, I * self.fc + self.fd],
            [I * self.fc - self.fd, a - I * self.fb],
        ]
    }

    /// `F|0⟩ = (f_a + i f_b)|0⟩ + (i f_c − f_d)|1⟩`.
    pub fn xi(&self) -> (C64, C64) {
        let m = self.matrix();
        (m[0][0], m[1][0])
    }

    /// Operator-norm distance to another quartet: the Euclidean distance of the Pauli coefficients.
    pub fn pauli_distance(&self, other: &Quartet) -> f64 {
        ((self.fa - other.fa).powi(2)
            + (self.fb - other.fb).powi(2)
            + (self.fc - other.fc).powi(2)
            + (self.fd - other.fd).powi(2))
        .sqrt()
    }

    pub fn ideal_pass(sign: f64) -> Self {
        Quartet { fa: sign, fb: 0.0, fc: 0.0, fd: 0.0 }
    }

    pub fn ideal_stop(sign: f64) -> Self {
        Quartet { fa: 0.0, fb: 0.0, fc: sign, fd: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdQuartet {
    pub theta0: f64,
    pub phi: f64,
    pub eps: f64,
    pub approx: SignApprox,
    /// First-stage `(f_a, f_b)` at the origin, used by the renormalization.
    fa1_0: f64,
    fb1_0: f64,
}

impl ThresholdQuartet {
    pub fn degree(&self) -> usize {
        self.approx.degree()
    }

    /// Oracle queries per application.
    pub fn query_charge(&self) -> u64 {
        2 * self.degree() as u64
    }

    /// Periodic sign `G(θ) = g(sin θ)`.
    pub fn periodic_sign(&self, theta: f64) -> f64 {
        self.approx.eval(theta.sin())
    }

    fn stage1(&self, theta: f64) -> (f64, f64, f64) {
        let g1 = self.periodic_sign(theta - self.theta0);
        let g2 = self.periodic_sign(-theta - self.theta0);
        let fc = (g1 - g2) / 2.0;
        let fa = (-g1 - g2) / 2.0;
        let fb = (1.0 - fa * fa - fc * fc).max(0.0).sqrt();
        (fa, fb, fc)
    }

    pub fn eval(&self, theta: f64) -> Quartet {
        let (fa1, fb1, fc) = self.stage1(theta);
        let cap = (1.0 - fc * fc).max(0.0).sqrt();
        let fa = (fa1 * self.fa1_0 + fb1 * self.fb1_0).clamp(-cap, cap);
        let fb = (1.0 - fa * fa - fc * fc).max(0.0).sqrt();
        Quartet { fa, fb, fc, fd: 0.0 }
    }

    /// Closed forms of the first-stage `f_c` and `f_a` as sine/cosine series.
    pub fn fourier_stage1(&self, theta: f64) -> (f64, f64) {
        let mut fc = 0.0;
        let mut fa = 0.0;
        for (j, &b) in self.approx.coeffs.iter().enumerate() {
            if j % 2 == 0 || b == 0.0 {
                continue;
            }
            let s = if (j / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let jf = j as f64;
            fc += b * s * (jf * theta).sin() * (jf * self.theta0).cos();
            fa += b * s * (jf * theta).cos() * (jf * self.theta0).sin();
        }
        (fc, fa)
    }

    /// Worst violation of the band table over `points` samples per band.
    pub fn band_report(&self, points: usize) -> QuartetBands {
        let (t0, ph, e) = (self.theta0, self.phi, self.eps);
        let pts = points.max(2);
        let grid = |lo: f64, hi: f64| (0..pts).map(move |i| lo + (hi - lo) * i as f64 / (pts - 1) as f64);
        let mut r = QuartetBands::default();
        if t0 - ph >= 0.0 {
            for th in grid(0.0, t0 - ph) {
                let q = self.eval(th);
                r.pass = r.pass.max((1.0 - 4.0 * e) - q.fa).max(q.fa - 1.0).max(q.fc.abs() - e / 2.0);
            }
        }
        if t0 + ph <= PI - t0 - ph {
            for th in grid(t0 + ph, PI - t0 - ph) {
                let q = self.eval(th);
                r.flip = r.flip.max((1.0 - e) - q.fc).max(q.fc - 1.0);
            }
        }
        if PI - t0 + ph <= PI {
            for th in grid(PI - t0 + ph, PI) {
                let q = self.eval(th);
                r.negate = r.negate.max(q.fa - (-1.0 + 4.0 * e)).max(-1.0 - q.fa).max(q.fc.abs() - e / 2.0);
            }
        }
        r.pass = r.pass.max(0.0);
        r.flip = r.flip.max(0.0);
        r.negate = r.negate.max(0.0);
        r
    }
}

/// Band violations (zero when the band table holds).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuartetBands {
    pub pass: f64,
    pub flip: f64,
    pub negate: f64,
}

impl QuartetBands {
    pub fn worst(&self) -> f64 {
        self.pass.max(self.flip).max(self.negate)
    }
}

pub fn threshold_quartet(theta0: f64, phi: f64, eps: f64) -> Result<ThresholdQuartet, EncodingError> {
    if !(phi > 0.0 && phi <= theta0 && theta0 <= FRAC_PI_2 * (1.0 + 1e-15)) {
        return Err(EncodingError::Parameter(format!("need 0 < φ ≤ θ0 ≤ π/2, got θ0 = {theta0}, φ = {phi}")));
    }
    let approx = cheb_sign_approx(phi.sin(), eps)?;
    let mut q = ThresholdQuartet { theta0, phi, eps, approx, fa1_0: 1.0, fb1_0: 0.0 };
    let (fa, fb, _) = q.stage1(0.0);
    q.fa1_0 = fa;
    q.fb1_0 = fb;
    Ok(q)
}

type QuartetKey = (u64, u64, u64);

/// Memoized [`threshold_quartet`]; quartets are immutable so sharing is safe.
pub fn threshold_quartet_cached(theta0: f64, phi: f64, eps: f64) -> Result<Arc<ThresholdQuartet>, EncodingError> {
    static CACHE: OnceLock<Mutex<HashMap<QuartetKey, Arc<ThresholdQuartet>>>> = OnceLock::new();
    let key = (theta0.to_bits(), phi.to_bits(), eps.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(q) = cache.lock().expect("quartet cache poisoned").get(&key) {
        return Ok(q.clone());
    }
    let q = Arc::new(threshold_quartet(theta0, phi, eps)?);
    cache.lock().expect("quartet cache poisoned").insert(key, q.clone());
    Ok(q)
}

/// `sin(ρθ)/(ρ sin θ)` together with its two-sided bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletValue {
    pub ratio: f64,
    pub lower: f64,
    pub upper: f64,
}

impl DirichletValue {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower <= self.ratio + tol && self.ratio <= self.upper + tol
    }
}

pub fn dirichlet_ratio(rho: u32, theta: f64) -> Result<DirichletValue, EncodingError> {
    if rho < 3 || rho % 2 == 0 {
        return Err(EncodingError::Parameter(format!("ρ must be odd and at least 3, got {rho}")));
    }
    let r = rho as f64;
    if !(theta >= 0.0 && r * theta <= FRAC_PI_2 * (1.0 + 1e-15)) {
        return Err(EncodingError::Parameter(format!("need 0 ≤ ρθ ≤ π/2, got θ = {theta}")));
    }
    let s = theta.sin();
    let ratio = if theta == 0.0 { 1.0 } else { (r * theta).sin() / (r * s) };
    let q = r * r * s * s;
    Ok(DirichletValue { ratio, lower: 1.0 - q / 6.0, upper: 1.0 - (4.0 * PI - 8.0) / PI.powi(3) * q })
}

/// Sector-local helper: the 2×2 `F(θ)` acting on `(a0, a1)`.
pub fn apply_quartet(q: &Quartet, a0: C64, a1: C64) -> (C64, C64) {
    let m = q.matrix();
    (m[0][0] * a0 + m[0][1] * a1, m[1][0] * a0 + m[1][1] * a1)
}

pub fn quartet_matrix(q: &Quartet) -> CMat {
    let m = q.matrix();
    CMat::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{op_norm, random, re};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unitary_phases(w: &CMat) -> Vec<f64> {
        let (_, t) = w.clone().schur().unpack();
        (0..t.nrows()).map(|i| t[(i, i)].arg()).collect()
    }

    fn diag(xs: &[f64]) -> CMat {
        CMat::from_diagonal(&CVec::from_iterator(xs.len(), xs.iter().map(|&x| re(x))))
    }

    #[test]
    fn zero_matrix_encoding() {
        let be = build_block_encoding(&CMat::zeros(2, 2), 1.0).unwrap();
        let mut want = CMat::zeros(4, 4);
        want.view_mut((0, 2), (2, 2)).fill_with_identity();
        want.view_mut((2, 0), (2, 2)).fill_with_identity();
        assert!((be.u.clone() - want).norm() < 1e-14);
    }

    #[test]
    fn diagonal_encoding_rescales() {
        let be = build_block_encoding(&diag(&[1.0, -1.0]), 2.0).unwrap();
        let e = be.encoded();
        assert!((e[(0, 0)].re - 0.5).abs() < 1e-14 && (e[(1, 1)].re + 0.5).abs() < 1e-14);
        assert!(be.contract_residual() < 1e-12);
    }

    #[test]
    fn random_encoding_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random::hermitian(&mut rng, 4);
        let n = op_norm(&a);
        let be = build_block_encoding(&a, 2.0 * n).unwrap();
        assert!((be.encoded() - a.unscale(2.0 * n)).norm() < 1e-10);
        assert!(crate::numerics::is_unitary(&be.u, 1e-10));
        assert!(matches!(build_block_encoding(&a, 0.5 * n), Err(EncodingError::Normalization { .. })));
    }

    #[test]
    fn power_of_three_rounding() {
        assert_eq!(pow3_at_least(4.0), 2);
        assert_eq!(pow3_at_least(3.0), 1);
        assert_eq!(pow3_at_least(1.0), 0);
        assert_eq!(pow3_above(1.0), 1);
        assert_eq!(pow3_above(2.0), 1);
        assert_eq!(pow3_above(4.0), 2);
        assert_eq!(pow3_at_least(0.2), -1);
        // degenerate κ = 1 gets a nonempty clock register
        let r = Rescaling { exp_a: 0, exp_inv: 0 };
        assert_eq!(r.m(), 0);
        let r = Rescaling::round(1.0, 1.0 / 3.0);
        assert_eq!(r.m(), 1);
    }

    #[test]
    fn rescale_examples() {
        // ‖A‖ = 2 and ‖A⁻¹‖ = 2
        let be = build_block_encoding(&diag(&[2.0, 0.5]), 2.0).unwrap();
        let r = rescale_for_solver(&be, 2.0).unwrap();
        assert_eq!(r.alpha_a, 9.0);
        assert_eq!(r.alpha_ainv, Some(3.0));
        assert_eq!(r.m(), Some(3));
        // identity
        let be = build_block_encoding(&CMat::identity(3, 3), 1.0).unwrap();
        let r = rescale_for_solver(&be, 1.0).unwrap();
        assert_eq!((r.alpha_a, r.alpha_ainv, r.m()), (3.0, Some(3.0), Some(2)));
        // singular
        let be = build_block_encoding(&diag(&[1.0, 0.0]), 1.0).unwrap();
        assert!(matches!(rescale_for_solver(&be, 10.0), Err(EncodingError::Domain(_))));
        let be = build_block_encoding(&diag(&[1.0, 0.1]), 1.0).unwrap();
        assert!(rescale_for_solver(&be, 5.0).is_err());
    }

    #[test]
    fn walk_phases() {
        for (mu, want) in [(0.0, FRAC_PI_2), (0.5, PI / 3.0)] {
            let be = build_block_encoding(&diag(&[mu]), 1.0).unwrap();
            let w = walk_operator(&be).unwrap();
            let mut args = unitary_phases(&w);
            args.sort_by(f64::total_cmp);
            assert!((args[0] + want).abs() < 1e-12 && (args[1] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn walk_spectrum_matches_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random::hermitian(&mut rng, 4);
        let be = build_block_encoding(&a, 2.0 * op_norm(&a)).unwrap();
        let w = walk_operator(&be).unwrap();
        let mut got = unitary_phases(&w);
        let mut want: Vec<f64> = be.scaled_eigenvalues().iter().flat_map(|m| [m.acos(), -m.acos()]).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn qubitization_structure() {
        let be = build_block_encoding(&diag(&[1.0, 0.3, -0.5]), 1.0).unwrap();
        let subs = qubitize(&be).unwrap();
        assert_eq!(subs[0].dimension(), 1);
        assert!(subs[1].dimension() == 2 && subs[2].dimension() == 2);
        for s in &subs {
            assert!(s.representation_residual(&be) < 1e-10);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random::hermitian(&mut rng, 4);
        let be = build_block_encoding(&a, 2.0 * op_norm(&a)).unwrap();
        let subs = qubitize(&be).unwrap();
        let w = walk_operator(&be).unwrap();
        let mut vecs = vec![];
        for s in &subs {
            assert!(s.representation_residual(&be) < 1e-10);
            let p = s.phi_plus.clone();
            let m = s.phi_minus.clone().unwrap();
            assert!((&w * &p - &p * C64::from_polar(1.0, s.theta)).norm() < 1e-10);
            assert!((&w * &m - &m * C64::from_polar(1.0, -s.theta)).norm() < 1e-10);
            vecs.push(s.phi0.clone());
            vecs.push(s.phi1.clone().unwrap());
        }
        for i in 0..vecs.len() {
            for j in 0..i {
                assert!(vecs[i].dotc(&vecs[j]).norm() < 1e-10);
            }
        }
    }

    /// Chebyshev coefficients by Gauss-Chebyshev quadrature, independent of the Bessel route.
    /// The statrs erf is good to a few 1e-12, which sets the tolerance.
    fn quadrature_coeffs(f: impl Fn(f64) -> f64, n: usize, nodes: usize) -> Vec<f64> {
        let vals: Vec<f64> =
            (0..nodes).map(|i| f((PI * (i as f64 + 0.5) / nodes as f64).cos())).collect();
        (0..=n)
            .map(|j| {
                let s: f64 = vals
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * j as f64 * (i as f64 + 0.5) / nodes as f64).cos())
                    .sum();
                s * if j == 0 { 1.0 } else { 2.0 } / nodes as f64
            })
            .collect()
    }

    #[test]
    fn bessel_coefficients_match_quadrature() {
        for k in [2.0, 7.5, 30.0] {
            let c = erf_coefficients(k, 1e-15);
            let q = quadrature_coeffs(|x| erf(k * x), c.len() - 1, 4 * c.len() + 64);
            let scale = 1.0 + 1e-15;
            for (a, b) in c.iter().zip(&q) {
                assert!((a * scale - b).abs() < 1e-10, "k = {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scaled_bessel_known_values() {
        // e^{-1} I_0(1) = 0.46575960759364043, e^{-1} I_1(1) = 0.2079104153497085
        let s = scaled_bessel_i(1.0, 3);
        assert!((s[0] - 0.46575960759364043).abs() < 1e-14);
        assert!((s[1] - 0.2079104153497085).abs() < 1e-14);
        // large argument stays finite and normalized
        let s = scaled_bessel_i(5e5, 10);
        assert!(s.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!((s[0] - 1.0 / (2.0 * PI * 5e5).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn sign_approx_bands() {
        let g = cheb_sign_approx(0.5, 0.1).unwrap();
        assert_eq!(g.band_violation(BAND_GRID), 0.0);
        for i in 0..=1000 {
            let x = -1.0 + 2.0 * i as f64 / 1000.0;
            assert!((g.eval(-x) + g.eval(x)).abs() < 1e-12);
        }
        let fine = cheb_sign_approx(0.5, 0.01).unwrap();
        assert!(fine.degree() > g.degree());
        assert!(cheb_sign_approx(0.0, 0.1).is_err());
        assert!(cheb_sign_approx(0.5, 1.0).is_err());
    }

    #[test]
    fn sign_approx_narrow_margin() {
        let g = cheb_sign_approx(0.004, 1e-7).unwrap();
        assert_eq!(g.band_violation(BAND_GRID), 0.0);
        assert!(g.degree() < 20_000);
    }

    #[test]
    fn quartet_examples() {
        let eps = 1e-3;
        let q = threshold_quartet(PI / 6.0, PI / 6.0, eps).unwrap();
        let v = q.eval(FRAC_PI_2);
        assert!(v.fc >= 1.0 - eps && v.fc <= 1.0);
        let z = q.eval(0.0);
        assert!((z.fa - 1.0).abs() < 1e-15 && z.fc == 0.0);
        for i in 0..=2000 {
            let th = -PI + 2.0 * PI * i as f64 / 2000.0;
            let a = q.eval(th);
            let b = q.eval(-th);
            assert!((a.fc + b.fc).abs() < 1e-12);
            assert!((a.fa - b.fa).abs() < 1e-12);
            assert!((a.fb - b.fb).abs() < 1e-12);
            assert!((a.norm_sqr() - 1.0).abs() < 1e-10);
            assert_eq!(a.fd, 0.0);
        }
        assert!(threshold_quartet(0.2, 0.3, eps).is_err());
        assert!(threshold_quartet(2.0, 0.3, eps).is_err());
    }

    #[test]
    fn quartet_closed_forms_and_bands() {
        let gamma: f64 = 1.0 / 9.0;
        let (a, b) = (gamma.acos(), (gamma / 3.0).acos());
        let q = threshold_quartet((a + b) / 2.0, (b - a) / 2.0, 1e-4).unwrap();
        for i in 0..200 {
            let th = -PI + 2.0 * PI * i as f64 / 199.0;
            let (fc, fa) = q.fourier_stage1(th);
            let (fa1, _, fc1) = q.stage1(th);
            assert!((fc - fc1).abs() < 1e-10 && (fa - fa1).abs() < 1e-10);
        }
        assert_eq!(q.band_report(BAND_GRID).worst(), 0.0);
    }

    #[test]
    fn quartet_is_unitary_in_pauli_metric() {
        let q = threshold_quartet(0.9, 0.2, 1e-3).unwrap();
        for i in 0..100 {
            let v = q.eval(-PI + 0.0628 * i as f64);
            let m = quartet_matrix(&v);
            assert!(crate::numerics::is_unitary(&m, 1e-10));
            let w = q.eval(0.3 + 0.01 * i as f64);
            let d = op_norm(&(quartet_matrix(&v) - quartet_matrix(&w)));
            assert!((d - v.pauli_distance(&w)).abs() < 1e-10);
        }
    }

    #[test]
    fn quartet_serializes() {
        let q = threshold_quartet(PI / 6.0, PI / 6.0, 0.01).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        let back: ThresholdQuartet = serde_json::from_str(&s).unwrap();
        assert_eq!(back.eval(1.0), q.eval(1.0));
    }

    #[test]
    fn dirichlet_examples() {
        let v = dirichlet_ratio(3, PI / 6.0).unwrap();
        assert!((v.ratio - 2.0 / 3.0).abs() < 1e-14);
        assert!((v.ratio - (1.0 - 4.0 / 3.0 * (PI / 6.0).sin().powi(2))).abs() < 1e-14);
        assert_eq!(dirichlet_ratio(7, 0.0).unwrap().ratio, 1.0);
        assert!((dirichlet_ratio(7, 1e-9).unwrap().ratio - 1.0).abs() < 1e-12);
        let v = dirichlet_ratio(5, 0.25).unwrap();
        assert!(v.holds(0.0));
        assert!(dirichlet_ratio(4, 0.1).is_err());
        assert!(dirichlet_ratio(5, 0.5).is_err());
        assert!(dirichlet_ratio(5, -0.1).is_err());
    }
}
