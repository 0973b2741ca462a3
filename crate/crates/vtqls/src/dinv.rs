//! The discretized inverse state: a clock/flag variable-time algorithm built
//! from branch marking and branch-controlled gapped phase estimation on the
//! walk operator, its deterministic amplification schedule, solution-norm
//! estimation, and the linear-system solve on top of it.
//!
//! Everything is simulated sector by sector. The walk operator leaves each
//! 2-dimensional space `span{φ_{u,+}, φ_{u,−}}` invariant, so the full
//! register `clock ⊗ flag ⊗ branch ⊗ ancilla ⊗ walk` splits into one block
//! of dimension `32m` per eigenpair of `A`.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_6};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encodings::{
    build_block_encoding, rescale_for_solver, threshold_quartet_cached, BlockEncoding, EncodingError, Quartet,
    ThresholdQuartet,
};
use crate::numerics::{
    is_hermitian, CMat, CVec, MatrixJson, NumericsError, VectorJson, C64, I, ONE, TAU_UNIT, ZERO,
};
use crate::vtaa::{
    run_nested, run_tunable, tunable_step_count, AmplificationSchedule, AmplitudeTrace, Backend, CostLedger,
    LedgerLine, Operator, QueryCost, RunOptions, ThresholdVector, VariableTimeAlgorithm, VtaaError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DinvError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("deterministic schedule violated: planned {planned:?}, realized {realized:?}")]
    ScheduleViolation { planned: Vec<u32>, realized: Vec<u32> },
    #[error("no amplification depth l ≤ {max} reached the stopping gate")]
    NoStop { max: usize },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Vtaa(#[from] VtaaError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which pieces are replaced by their band-exact limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    /// GPE outside its transition bands is exactly `|0⟩`, `i|1⟩` or `−|0⟩`.
    pub exact_gpe: bool,
    pub exact_marking: bool,
}

impl Mode {
    pub const IDEAL: Mode = Mode { exact_gpe: true, exact_marking: true };
    pub const EXACT_MARKING: Mode = Mode { exact_gpe: false, exact_marking: true };
    pub const PHYSICAL: Mode = Mode { exact_gpe: false, exact_marking: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinvSpec {
    pub c: f64,
    pub eps_bm: f64,
    pub eps_gpe: f64,
    pub eps_blk: f64,
    pub mode: Mode,
    /// Per-stage GPE accuracies for stages `1..m`, replacing the error schedule.
    pub eps_stages: Option<Vec<f64>>,
    pub dim_cap: usize,
}

impl Default for DinvSpec {
    fn default() -> Self {
        DinvSpec {
            c: 1.001,
            eps_bm: 1e-3,
            eps_gpe: 1e-2,
            eps_blk: 1e-3,
            mode: Mode::PHYSICAL,
            eps_stages: None,
            dim_cap: 4096,
        }
    }
}

impl DinvSpec {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<(), DinvError> {
        if !(self.c > 1.0 && self.c < 3.0) {
            return Err(DinvError::Parameter(format!("c must lie in (1, 3), got {}", self.c)));
        }
        for (name, e) in [("eps_bm", self.eps_bm), ("eps_gpe", self.eps_gpe), ("eps_blk", self.eps_blk)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(DinvError::Parameter(format!("{name} must lie in (0, 1), got {e}")));
            }
        }
        Ok(())
    }
}

/// Per-stage GPE accuracies for stages `1..m` (stage `m` has no GPE).
///
/// `ε/l` on the last `l−1` GPE stages, halving geometrically below them.
pub fn error_schedule(eps_gpe: f64, m: usize, l: usize) -> Vec<f64> {
    let l = l.max(1);
    let lf = l as f64;
    (1..m)
        .map(|j| {
            if j + l >= m + 2 {
                eps_gpe / lf
            } else {
                eps_gpe / (lf * 2f64.powi((m + 1 - l - j) as i32))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystemInstance {
    pub a: CMat,
    pub b: CVec,
    /// Upper bound on `‖A‖`; the spectral norm when absent.
    pub alpha_a: Option<f64>,
    /// Upper bound on `‖A⁻¹‖`; the exact value when absent.
    pub alpha_ainv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub a: MatrixJson,
    pub b: VectorJson,
    pub alpha_a: Option<f64>,
    pub alpha_ainv: Option<f64>,
}

impl From<&LinearSystemInstance> for InstanceJson {
    fn from(i: &LinearSystemInstance) -> Self {
        InstanceJson { a: (&i.a).into(), b: (&i.b).into(), alpha_a: i.alpha_a, alpha_ainv: i.alpha_ainv }
    }
}

impl TryFrom<&InstanceJson> for LinearSystemInstance {
    type Error = DinvError;
    fn try_from(j: &InstanceJson) -> Result<Self, DinvError> {
        LinearSystemInstance::new(CMat::try_from(&j.a)?, CVec::try_from(&j.b)?)
            .map(|i| LinearSystemInstance { alpha_a: j.alpha_a, alpha_ainv: j.alpha_ainv, ..i })
    }
}

impl LinearSystemInstance {
    pub fn new(a: CMat, b: CVec) -> Result<Self, DinvError> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(DinvError::Parameter(format!("A is {}×{} but b has {} entries", a.nrows(), a.ncols(), b.len())));
        }
        let n = b.norm();
        if !(n > 0.0) {
            return Err(DinvError::Parameter("b must be nonzero".into()));
        }
        Ok(LinearSystemInstance { a, b: b.unscale(n), alpha_a: None, alpha_ainv: None })
    }

    /// The Hermitian dilation `|0⟩⟨1|⊗A + |1⟩⟨0|⊗A†` with right-hand side `|0⟩|b⟩`.
    /// Its solution is `|1⟩ ⊗ A⁻¹b`.
    pub fn dilated(&self) -> Self {
        let n = self.b.len();
        let mut h = CMat::zeros(2 * n, 2 * n);
        h.view_mut((0, n), (n, n)).copy_from(&self.a);
        h.view_mut((n, 0), (n, n)).copy_from(&self.a.adjoint());
        let mut b = CVec::zeros(2 * n);
        b.rows_mut(0, n).copy_from(&self.b);
        LinearSystemInstance { a: h, b, alpha_a: self.alpha_a, alpha_ainv: self.alpha_ainv }
    }

    pub fn is_hermitian(&self) -> bool {
        is_hermitian(&self.a, TAU_UNIT)
    }

    /// `A⁻¹b` by direct LU solve.
    pub fn direct_solution(&self) -> Result<CVec, DinvError> {
        self.a
            .clone()
            .lu()
            .solve(&self.b)
            .ok_or_else(|| DinvError::Degenerate("A is singular".into()))
    }
}

/// Spectral data of a rescaled instance.
#[derive(Debug, Clone)]
pub struct Setup {
    pub be: BlockEncoding,
    pub m: usize,
    pub alpha_a: f64,
    pub alpha_ainv: f64,
    /// `λ_u/α_A`.
    pub mu: Vec<f64>,
    /// `⟨φ_u|b⟩`.
    pub gamma: Vec<C64>,
    /// `k` with `|μ_u| ∈ [3^{−(k+1)}, 3^{−k})`.
    pub band: Vec<usize>,
    pub b: CVec,
}

/// Clock band of a scaled eigenvalue.
pub fn band_of(mu: f64) -> usize {
    let a = mu.abs();
    let mut k = 0;
    while a < 3f64.powi(-(k as i32 + 1)) {
        k += 1;
    }
    k
}

pub fn analyze(inst: &LinearSystemInstance) -> Result<Setup, DinvError> {
    if !inst.is_hermitian() {
        return Err(DinvError::Parameter("the solver expects a Hermitian matrix; use dilated()".into()));
    }
    let base = build_block_encoding(&inst.a, inst.alpha_a.unwrap_or(f64::MIN_POSITIVE).max(spectral_norm(&inst.a)?))?;
    let min = base.spectrum().min_abs();
    if min <= 1e-14 {
        return Err(DinvError::Degenerate("A is singular".into()));
    }
    let be = rescale_for_solver(&base, inst.alpha_ainv.unwrap_or(1.0 / min))?;
    let alpha_ainv = be.alpha_ainv.expect("rescaled encodings carry α_A⁻¹");
    let m = be.m().expect("rescaled encodings carry m");
    let spec = be.spectrum();
    let gamma: Vec<C64> = (0..spec.dim()).map(|u| spec.vector(u).dotc(&inst.b)).collect();
    let mu = be.scaled_eigenvalues();
    let band = mu.iter().map(|&x| band_of(x)).collect();
    Ok(Setup { alpha_a: be.alpha_a, alpha_ainv, m, mu, gamma, band, b: inst.b.clone(), be })
}

fn spectral_norm(a: &CMat) -> Result<f64, DinvError> {
    Ok(crate::numerics::spectral_decompose(a)?.norm())
}

impl Setup {
    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn lambda(&self, u: usize) -> f64 {
        self.mu[u] * self.alpha_a
    }

    /// `‖A⁻¹b‖`.
    pub fn solution_norm(&self) -> f64 {
        (0..self.d()).map(|u| self.gamma[u].norm_sqr() / self.lambda(u).powi(2)).sum::<f64>().sqrt()
    }

    /// `A⁻¹b/‖A⁻¹b‖`.
    pub fn solution(&self) -> CVec {
        let spec = self.be.spectrum();
        let x = (0..self.d()).fold(CVec::zeros(self.d()), |acc, u| acc + spec.vector(u) * (self.gamma[u] / self.lambda(u)));
        let n = x.norm();
        x.unscale(n)
    }

    /// `‖A⁻¹b‖²/α_{A⁻¹}²`.
    pub fn p_succ(&self) -> f64 {
        (self.solution_norm() / self.alpha_ainv).powi(2)
    }

    /// Total simulated dimension `32·m·d`.
    pub fn dim(&self) -> usize {
        ClockFlagLayout { m: self.m, sectors: self.d() }.dim()
    }
}

/// Register layout: clock (m values) ⊗ flag (two qubits) ⊗ branch ⊗ quartet
/// ancilla ⊗ walk pair `(φ_{u,+}, φ_{u,−})`, one block per eigenpair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockFlagLayout {
    pub m: usize,
    pub sectors: usize,
}

impl ClockFlagLayout {
    pub const GOOD: usize = 0;
    pub const CONTD: usize = 1;
    pub const BAD: usize = 2;
    /// Flag `|11⟩`, unreachable from the initial state.
    pub const UNUSED: usize = 3;

    pub fn sector_dim(&self) -> usize {
        32 * self.m
    }

    pub fn dim(&self) -> usize {
        self.sector_dim() * self.sectors
    }

    /// Sector-local index.
    pub fn index(&self, clock: usize, flag: usize, branch: usize, anc: usize, w: usize) -> usize {
        (((clock * 4 + flag) * 2 + branch) * 2 + anc) * 2 + w
    }

    fn decode(&self, i: usize) -> (usize, usize) {
        let local = i % self.sector_dim();
        (local / 32, (local / 8) % 4)
    }

    /// `Π_j`: clock `< j` with flag good or bad; `Π_m = I`.
    pub fn projection(&self, j: usize) -> Operator {
        if j == self.m {
            return Operator::Identity(self.dim());
        }
        Operator::mask((0..self.dim()).map(|i| {
            let (clock, flag) = self.decode(i);
            clock < j && (flag == Self::GOOD || flag == Self::BAD)
        }))
    }

    pub fn flag_projection(&self) -> Operator {
        Operator::mask((0..self.dim()).map(|i| self.decode(i).1 == Self::BAD))
    }

    /// `|clock, flag⟩|+⟩|+⟩ ⊗ G|φ_u⟩` scaled by `coeffs[u]`.
    pub fn embed(&self, clock: usize, flag: usize, coeffs: &[C64]) -> CVec {
        let mut v = CVec::zeros(self.dim());
        let amp = FRAC_1_SQRT_2.powi(3);
        for (u, &cu) in coeffs.iter().enumerate() {
            let off = u * self.sector_dim();
            for br in 0..2 {
                for anc in 0..2 {
                    for w in 0..2 {
                        v[off + self.index(clock, flag, br, anc, w)] += cu * amp;
                    }
                }
            }
        }
        v
    }

    /// `⟨clock, flag, +, +| ⊗ ⟨φ_{u,0}|` on each sector.
    pub fn extract(&self, v: &CVec, clock: usize, flag: usize) -> Vec<C64> {
        let amp = FRAC_1_SQRT_2.powi(3);
        (0..self.sectors)
            .map(|u| {
                let off = u * self.sector_dim();
                let mut s = ZERO;
                for br in 0..2 {
                    for anc in 0..2 {
                        for w in 0..2 {
                            s += v[off + self.index(clock, flag, br, anc, w)] * amp;
                        }
                    }
                }
                s
            })
            .collect()
    }
}

type Qm = [[C64; 2]; 2];

fn scale_qm(q: Qm, s: C64) -> Qm {
    [[q[0][0] * s, q[0][1] * s], [q[1][0] * s, q[1][1] * s]]
}

fn adjoint_qm(q: Qm) -> Qm {
    [[q[0][0].conj(), q[1][0].conj()], [q[0][1].conj(), q[1][1].conj()]]
}

/// GPE quartet at stage `j` for a walk phase with `cos θ = μ` and sign `s`.
fn gpe_value(q: &ThresholdQuartet, gamma: f64, mu: f64, sign: f64, exact: bool) -> Quartet {
    if exact {
        if mu >= gamma {
            return Quartet::ideal_pass(1.0);
        }
        if mu <= -gamma {
            return Quartet::ideal_pass(-1.0);
        }
        if mu.abs() <= gamma / 3.0 {
            return Quartet::ideal_stop(sign);
        }
    }
    q.eval(sign * mu.acos())
}

fn bm_value(q: &ThresholdQuartet, mu: f64, sign: f64, exact: bool) -> Quartet {
    if exact {
        Quartet::ideal_stop(sign)
    } else {
        q.eval(sign * mu.acos())
    }
}

/// GPE parameters at stage `j`: passband `μ ≥ 3^{−j}`, stopband `|μ| ≤ 3^{−j−1}`.
pub fn gpe_quartet(j: usize, eps: f64) -> Result<Arc<ThresholdQuartet>, EncodingError> {
    let g = 3f64.powi(-(j as i32));
    let (a, b) = (g.acos(), (g / 3.0).acos());
    threshold_quartet_cached((a + b) / 2.0, (b - a) / 2.0, eps * eps / 8.0)
}

/// Branch-marking quartet with `f_c ≈ sgn θ` on `|θ| ∈ [π/3, 2π/3]`.
pub fn bm_quartet(eps_bm: f64) -> Result<Arc<ThresholdQuartet>, EncodingError> {
    threshold_quartet_cached(FRAC_PI_6, FRAC_PI_6, eps_bm * eps_bm / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Mark,
    Unmark,
    FlipQ2(usize),
    Gpe { clock: usize, stage: usize },
    Rotate { clock: usize, stage: usize },
    Advance(usize),
}

/// Per-sector 2×2 data: GPE and marking matrices at `+θ_u` and `−θ_u`.
#[derive(Debug, Clone)]
struct Sector {
    /// `[F_j(θ), F_j(−θ)]` for stages `1..m`.
    gpe: Vec<[Qm; 2]>,
    /// `[−iF(θ), −iF(−θ)]`.
    bm: [Qm; 2],
}

impl Sector {
    fn apply(&self, lay: &ClockFlagLayout, step: Step, v: &mut [C64]) {
        let idx = |c, f, br, a, w| lay.index(c, f, br, a, w);
        match step {
            Step::Mark | Step::Unmark => {
                for c in 0..lay.m {
                    for f in 0..4 {
                        for w in 0..2 {
                            let k = if step == Step::Mark { self.bm[w] } else { adjoint_qm(self.bm[w]) };
                            let (i0, i1) = (idx(c, f, 1, 0, w), idx(c, f, 1, 1, w));
                            let (x0, x1) = (v[i0], v[i1]);
                            v[i0] = k[0][0] * x0 + k[0][1] * x1;
                            v[i1] = k[1][0] * x0 + k[1][1] * x1;
                        }
                    }
                }
            }
            Step::FlipQ2(c) => {
                for (f0, f1) in [(0, 1), (2, 3)] {
                    for br in 0..2 {
                        for a in 0..2 {
                            for w in 0..2 {
                                v.swap(idx(c, f0, br, a, w), idx(c, f1, br, a, w));
                            }
                        }
                    }
                }
            }
            Step::Gpe { clock, stage } => {
                let [fp, fm] = self.gpe[stage - 1];
                for w in 0..2 {
                    // branch |+⟩ sees F(θ_w), branch |−⟩ sees F(−θ_w)
                    let (f_plus, f_minus) = if w == 0 { (fp, fm) } else { (fm, fp) };
                    let mut mat = [[ZERO; 4]; 4];
                    for q in 0..2 {
                        for q2 in 0..2 {
                            for b in 0..2 {
                                for b2 in 0..2 {
                                    let sgn = if b == b2 { 1.0 } else { -1.0 };
                                    mat[q * 2 + b][q2 * 2 + b2] = (f_plus[q][q2] + f_minus[q][q2] * sgn) * 0.5;
                                }
                            }
                        }
                    }
                    for q1 in 0..2 {
                        for a in 0..2 {
                            let ix: [usize; 4] = std::array::from_fn(|t| idx(clock, q1 * 2 + t / 2, t % 2, a, w));
                            let x: [C64; 4] = std::array::from_fn(|t| v[ix[t]]);
                            for r in 0..4 {
                                v[ix[r]] = (0..4).map(|s| mat[r][s] * x[s]).sum();
                            }
                        }
                    }
                }
            }
            Step::Rotate { clock, stage } => {
                let cth = 3f64.powi(stage as i32 - lay.m as i32);
                let sth = (1.0 - cth * cth).max(0.0).sqrt();
                for br in 0..2 {
                    for a in 0..2 {
                        for w in 0..2 {
                            let (ig, ib) = (idx(clock, ClockFlagLayout::GOOD, br, a, w), idx(clock, ClockFlagLayout::BAD, br, a, w));
                            let (g, b) = (v[ig], v[ib]);
                            v[ig] = g * cth - b * sth;
                            v[ib] = g * sth + b * cth;
                        }
                    }
                }
            }
            Step::Advance(c) => {
                for br in 0..2 {
                    for a in 0..2 {
                        for w in 0..2 {
                            v.swap(idx(c, ClockFlagLayout::CONTD, br, a, w), idx(c + 1, ClockFlagLayout::CONTD, br, a, w));
                        }
                    }
                }
            }
        }
    }

    fn materialize(&self, lay: &ClockFlagLayout, steps: &[Step]) -> CMat {
        let n = lay.sector_dim();
        let mut out = CMat::zeros(n, n);
        let mut col = vec![ZERO; n];
        for k in 0..n {
            col.iter_mut().for_each(|z| *z = ZERO);
            col[k] = ONE;
            for &s in steps {
                self.apply(lay, s, &mut col);
            }
            out.set_column(k, &CVec::from_column_slice(&col));
        }
        out
    }
}

fn stage_steps(m: usize, j: usize, rotate: bool) -> Vec<Step> {
    let mut s = Vec::new();
    if j == 1 {
        s.push(Step::Mark);
    }
    s.push(Step::FlipQ2(j - 1));
    if j < m {
        s.push(Step::Gpe { clock: j - 1, stage: j });
        if rotate {
            s.push(Step::Rotate { clock: j - 1, stage: j });
        }
        s.push(Step::Advance(j - 1));
    }
    s
}

/// The variable-time algorithm for the discretized inverse state together
/// with the data needed to interpret its output.
#[derive(Debug, Clone)]
pub struct InverterVta {
    pub vta: VariableTimeAlgorithm,
    pub layout: ClockFlagLayout,
    pub mode: Mode,
    /// GPE accuracies for stages `1..m`.
    pub eps_stages: Vec<f64>,
    /// `(ξ_{j,u,0}, ξ_{j,u,1})` for `j = 1..=m`, indexed `[u][j−1]`.
    pub xi: Vec<Vec<(C64, C64)>>,
    /// O_A queries per GPE application, stages `1..m`.
    pub gpe_charges: Vec<u64>,
    /// O_A queries per branch-marking application.
    pub bm_charge: u64,
    sectors: Vec<Sector>,
}

pub fn build_inverter_vta(setup: &Setup, spec: &DinvSpec, l: usize) -> Result<InverterVta, DinvError> {
    spec.validate()?;
    let m = setup.m;
    let layout = ClockFlagLayout { m, sectors: setup.d() };
    if layout.dim() > spec.dim_cap {
        return Err(VtaaError::Resource { dim: layout.dim(), cap: spec.dim_cap }.into());
    }
    let eps_stages = match &spec.eps_stages {
        Some(e) if e.len() + 1 == m => e.clone(),
        Some(e) => {
            return Err(DinvError::Parameter(format!("{} stage accuracies supplied for {} GPE stages", e.len(), m - 1)))
        }
        None => error_schedule(spec.eps_gpe, m, l),
    };
    if let Some(e) = eps_stages.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(DinvError::Parameter(format!("stage accuracy {e} outside (0, 1)")));
    }
    let quartets = eps_stages
        .iter()
        .enumerate()
        .map(|(i, &e)| gpe_quartet(i + 1, e))
        .collect::<Result<Vec<_>, _>>()?;
    let bmq = bm_quartet(spec.eps_bm)?;

    let mut sectors = Vec::with_capacity(setup.d());
    let mut xi = Vec::with_capacity(setup.d());
    for &mu in &setup.mu {
        let gpe: Vec<[Qm; 2]> = quartets
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let g = 3f64.powi(-(i as i32 + 1));
                [1.0, -1.0].map(|s| gpe_value(q, g, mu, s, spec.mode.exact_gpe).matrix())
            })
            .collect();
        let bm = [1.0, -1.0].map(|s| scale_qm(bm_value(&bmq, mu, s, spec.mode.exact_marking).matrix(), -I));
        let mut x: Vec<(C64, C64)> = gpe.iter().map(|f| (f[0][0][0], f[0][1][0])).collect();
        x.push((ONE, ZERO));
        xi.push(x);
        sectors.push(Sector { gpe, bm });
    }

    let stages = (1..=m)
        .map(|j| {
            let steps = stage_steps(m, j, true);
            Operator::BlockDiag(sectors.iter().map(|s| s.materialize(&layout, &steps)).collect())
        })
        .collect();
    let gpe_charges: Vec<u64> = quartets.iter().map(|q| q.query_charge()).collect();
    let bm_charge = bmq.query_charge();
    let stage_costs = (1..=m)
        .map(|j| {
            let g = if j < m { gpe_charges[j - 1] } else { 0 };
            QueryCost::new(g + if j == 1 { bm_charge } else { 0 }, 0)
        })
        .collect();
    let psi0 = layout.embed(0, ClockFlagLayout::CONTD, &setup.gamma);
    let vta = VariableTimeAlgorithm {
        projections: (0..=m).map(|j| layout.projection(j)).collect(),
        flag: layout.flag_projection(),
        stages,
        psi0,
        stage_costs,
        prep_cost: QueryCost::new(0, 1),
    };
    Ok(InverterVta { vta, layout, mode: spec.mode, eps_stages, xi, gpe_charges, bm_charge, sectors })
}

impl InverterVta {
    pub fn m(&self) -> usize {
        self.layout.m
    }

    /// `ζ_{j,u} = ξ_{j,u,0} Π_{h<j} ξ_{h,u,1}`, indexed `[u][j−1]`.
    pub fn zeta(&self) -> Vec<Vec<C64>> {
        self.xi
            .iter()
            .map(|x| {
                let mut acc = ONE;
                x.iter()
                    .map(|&(x0, x1)| {
                        let z = x0 * acc;
                        acc *= x1;
                        z
                    })
                    .collect()
            })
            .collect()
    }

    fn block(&self, steps: &[Step]) -> Operator {
        Operator::BlockDiag(self.sectors.iter().map(|s| s.materialize(&self.layout, steps)).collect())
    }

    /// Inverse branch marking on the whole register.
    pub fn unmarking(&self) -> Operator {
        self.block(&[Step::Unmark])
    }

    /// `Γ`: all stages without the rotations, followed by unmarking.
    pub fn clock_map(&self) -> Operator {
        let m = self.m();
        let mut steps: Vec<Step> = (1..=m).flat_map(|j| stage_steps(m, j, false)).collect();
        steps.push(Step::Unmark);
        self.block(&steps)
    }

    /// `Σ_u Σ_j c_{j,u} |j−1, good, +, +⟩ ⊗ G|φ_u⟩` where `c_{j,u} = ζ_{j,u}3^j/3^m γ_u`
    /// for the clock values selected by `keep(j, k_u)`.
    pub fn dinv_vector(&self, setup: &Setup, keep: impl Fn(usize, usize) -> bool) -> CVec {
        let m = self.m();
        let z = self.zeta();
        let mut v = CVec::zeros(self.layout.dim());
        for j in 1..=m {
            let scale = 3f64.powi(j as i32 - m as i32);
            let coeffs: Vec<C64> = (0..setup.d())
                .map(|u| if keep(j, setup.band[u]) { z[u][j - 1] * setup.gamma[u] * scale } else { ZERO })
                .collect();
            v += self.layout.embed(j - 1, ClockFlagLayout::GOOD, &coeffs);
        }
        v
    }

    /// `ψ_{d-inv}`: only clock values `k` and `k−1` for band `k`.
    pub fn psi_dinv(&self, setup: &Setup) -> CVec {
        self.dinv_vector(setup, |j, k| j == k || j == k + 1)
    }

    /// `ψ_{d-inv,m}`: every clock value.
    pub fn psi_dinv_m(&self, setup: &Setup) -> CVec {
        self.dinv_vector(setup, |_, _| true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityFamily {
    pub p_succ: f64,
    pub p_dinv_1: f64,
    pub p_dinv: f64,
    pub p_dinv_m: f64,
    pub p_bm: f64,
    /// `Σ_j ε_{gpe,j}`.
    pub eps_gpe: f64,
    pub eps_bm: f64,
}

/// `p_dinv_1`, `p_dinv` and `p_dinv_m` from the spectrum and the cumulative
/// coefficients of `inv`; `p_bm` from its plain composition.
pub fn probability_family(setup: &Setup, inv: &InverterVta, eps_bm: f64) -> ProbabilityFamily {
    let m = setup.m as i32;
    let z = inv.zeta();
    let (mut p1, mut pd, mut pm) = (0.0, 0.0, 0.0);
    for u in 0..setup.d() {
        let g2 = setup.gamma[u].norm_sqr();
        let k = setup.band[u];
        p1 += g2 * 9f64.powi(k as i32 + 1 - m);
        for j in 1..=setup.m {
            let t = g2 * z[u][j - 1].norm_sqr() * 9f64.powi(j as i32 - m);
            pm += t;
            if j == k || j == k + 1 {
                pd += t;
            }
        }
    }
    let b = inv.vta.plain_amplitudes();
    ProbabilityFamily {
        p_succ: setup.p_succ(),
        p_dinv_1: p1,
        p_dinv: pd,
        p_dinv_m: pm,
        p_bm: b[setup.m].powi(2),
        eps_gpe: inv.eps_stages.iter().sum(),
        eps_bm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheck {
    pub name: String,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub holds: bool,
}

impl ChainCheck {
    fn new(name: &str, lower: f64, value: f64, upper: f64) -> Self {
        let slack = 1e-12 * value.abs().max(1e-300).max(upper.abs());
        let holds = lower <= value + slack && value <= upper + slack;
        ChainCheck { name: name.into(), lower, value, upper, holds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub l: usize,
    pub ideal: ProbabilityFamily,
    pub real: ProbabilityFamily,
    /// `Σ_{j>m−l} b_j(X)² 9^{j−m+l}` for the ideal, exact-marking and physical algorithms.
    pub sums: [f64; 3],
    pub chains: Vec<ChainCheck>,
    /// Per eigenvalue, whether the cumulative coefficients obey the leakage bounds.
    pub leakage_holds: bool,
}

impl BoundsReport {
    pub fn all_hold(&self) -> bool {
        self.chains.iter().all(|c| c.holds) && self.leakage_holds
    }
}

fn threshold_sum(vta: &VariableTimeAlgorithm, l: usize) -> f64 {
    let m = vta.m();
    let b = vta.plain_amplitudes();
    ((m + 1 - l.min(m))..=m).filter(|&j| j >= 1).map(|j| b[j].powi(2) * 9f64.powi((j + l) as i32 - m as i32)).sum()
}

/// Checks every cumulative-coefficient leakage bound of one algorithm.
pub fn leakage_bounds_hold(setup: &Setup, inv: &InverterVta) -> bool {
    let z = inv.zeta();
    let m = setup.m;
    let eps = &inv.eps_stages;
    (0..setup.d()).all(|u| {
        let k = setup.band[u];
        (1..=m).all(|j| {
            let a = z[u][j - 1].norm();
            if j + 1 <= k {
                a <= eps[j - 1] + 1e-12
            } else if j >= k + 2 {
                a <= ((k + 1)..j).map(|h| eps[h - 1]).product::<f64>() + 1e-12
            } else {
                true
            }
        })
    })
}

/// Builds the ideal, exact-marking and physical algorithms at depth `l` and
/// checks all probability and threshold-sum chains.
pub fn check_multiplicative_bounds(setup: &Setup, spec: &DinvSpec, l: usize) -> Result<BoundsReport, DinvError> {
    let a = build_inverter_vta(setup, &spec.clone().with_mode(Mode::IDEAL), l)?;
    let b = build_inverter_vta(setup, &spec.clone().with_mode(Mode::EXACT_MARKING), l)?;
    let c = build_inverter_vta(setup, &spec.clone().with_mode(Mode::PHYSICAL), l)?;
    let ideal = probability_family(setup, &a, spec.eps_bm);
    let mut real = probability_family(setup, &b, spec.eps_bm);
    real.p_bm = c.vta.plain_amplitudes()[setup.m].powi(2);
    let sums = [threshold_sum(&a.vta, l), threshold_sum(&b.vta, l), threshold_sum(&c.vta, l)];
    let nine_l = 9f64.powi(l as i32);
    let e = real.eps_gpe;
    let f = &real;
    let chains = vec![
        ChainCheck::new("p_dinv_1/9 ≤ p_succ ≤ p_dinv_1", f.p_dinv_1 / 9.0, f.p_succ, f.p_dinv_1),
        ChainCheck::new("p_dinv_1(1−ε²)/9 ≤ p_dinv ≤ p_dinv_1", f.p_dinv_1 * (1.0 - e * e) / 9.0, f.p_dinv, f.p_dinv_1),
        ChainCheck::new(
            "p_dinv ≤ p_dinv_m ≤ p_dinv(1+729ε²/(1−ε)²)",
            f.p_dinv,
            f.p_dinv_m,
            f.p_dinv * (1.0 + 729.0 * e * e / (1.0 - e).powi(2)),
        ),
        ChainCheck::new("|p_dinv_m − p_bm| ≤ 4ε_bm", 0.0, (f.p_dinv_m - f.p_bm).abs(), 4.0 * spec.eps_bm),
        ChainCheck::new("ideal threshold sum", ideal.p_dinv * nine_l, sums[0], 1.25 * ideal.p_dinv * nine_l),
        ChainCheck::new("exact-marking threshold sum", f.p_dinv_m * nine_l, sums[1], 1.25 * f.p_dinv_m * nine_l),
        ChainCheck::new("marking perturbation", 0.0, (sums[1] - sums[2]).abs(), 1.125 * 4.0 * spec.eps_bm * nine_l),
    ];
    let leakage_holds = leakage_bounds_hold(setup, &b) && leakage_bounds_hold(setup, &a);
    Ok(BoundsReport { l, ideal, real, sums, chains, leakage_holds })
}

/// `Floor(log₃(2/(√5·c·√p)))`, or 0 when the argument is below 1.
pub fn plan_depth(c: f64, sqrt_p: f64) -> Result<usize, DinvError> {
    if !(sqrt_p > 0.0) || !sqrt_p.is_finite() {
        return Err(DinvError::Parameter(format!("amplitude estimate must be positive, got {sqrt_p}")));
    }
    let x = 2.0 / (5f64.sqrt() * c * sqrt_p);
    let mut l = 0usize;
    while 3f64.powi(l as i32 + 1) <= x {
        l += 1;
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPlan {
    pub l: usize,
    pub thresholds: ThresholdVector,
    pub schedule: AmplificationSchedule,
    pub sum_alpha: f64,
}

impl DeterministicPlan {
    pub fn within_budget(&self) -> bool {
        self.sum_alpha <= 1.0 + 1e-12
    }
}

/// Thresholds `α_j = c²9^{j−m+l}b_j²` on the last `l` stages and the schedule
/// `(1,…,1,3,…,3)` they should produce.
pub fn plan_for_depth(vta: &VariableTimeAlgorithm, c: f64, l: usize) -> Result<DeterministicPlan, DinvError> {
    let m = vta.m();
    if l > m {
        return Err(DinvError::Parameter(format!("depth l = {l} exceeds the {m} available stages")));
    }
    let b = vta.plain_amplitudes();
    let alpha: Vec<f64> = (1..=m)
        .map(|j| if j + l > m { c * c * 9f64.powi((j + l) as i32 - m as i32) * b[j] * b[j] } else { 0.0 })
        .collect();
    let r = (1..=m).map(|j| u32::from(j + l > m)).collect();
    let sum_alpha = alpha.iter().sum();
    Ok(DeterministicPlan { l, thresholds: ThresholdVector { alpha }, schedule: AmplificationSchedule { r }, sum_alpha })
}

pub fn deterministic_plan(vta: &VariableTimeAlgorithm, c: f64, sqrt_p_estimate: f64) -> Result<DeterministicPlan, DinvError> {
    plan_for_depth(vta, c, plan_depth(c, sqrt_p_estimate)?)
}

#[derive(Debug, Clone)]
pub struct DinvRun {
    pub l: usize,
    pub plan: DeterministicPlan,
    pub inverter: InverterVta,
    pub trace: AmplitudeTrace,
    /// Nested-amplification counts plus the final unmarking line.
    pub ledger: CostLedger,
    /// Unmarked output `Γ`-frame state.
    pub state: CVec,
    /// Normalized good part of [`Self::state`].
    pub good: CVec,
    pub final_amplitude: f64,
    /// `√5/(9c)`.
    pub amplitude_floor: f64,
}

impl DinvRun {
    pub fn amplitude_ok(&self) -> bool {
        self.final_amplitude >= self.amplitude_floor
    }

    /// `‖good − ψ/‖ψ‖‖` for a reference vector.
    pub fn distance_to(&self, reference: &CVec) -> f64 {
        (&self.good - reference.unscale(reference.norm())).norm()
    }
}

fn depth_fixed_point(setup: &Setup, spec: &DinvSpec) -> Result<(usize, InverterVta), DinvError> {
    let mut seen: Vec<usize> = Vec::new();
    let mut l = 0;
    loop {
        let inv = build_inverter_vta(setup, spec, l)?;
        let next = plan_depth(spec.c, inv.vta.plain_amplitudes()[setup.m])?.min(setup.m);
        if next == l {
            return Ok((l, inv));
        }
        if seen.contains(&next) || seen.len() > 8 {
            // oscillation between neighbouring depths: keep the smaller one
            let lo = l.min(next);
            return Ok((lo, build_inverter_vta(setup, spec, lo)?));
        }
        seen.push(l);
        l = next;
    }
}

/// Runs Tunable VTAA with the deterministic thresholds. Without an estimate
/// the depth is computed from the algorithm's own success amplitude.
pub fn prepare_dinv(setup: &Setup, spec: &DinvSpec, sqrt_p_estimate: Option<f64>) -> Result<DinvRun, DinvError> {
    let (l, inverter) = match sqrt_p_estimate {
        Some(est) => {
            let l = plan_depth(spec.c, est)?;
            (l, build_inverter_vta(setup, spec, l)?)
        }
        None => depth_fixed_point(setup, spec)?,
    };
    let plan = plan_for_depth(&inverter.vta, spec.c, l)?;
    let opts = RunOptions { dim_cap: spec.dim_cap, ..Default::default() };
    let out = run_tunable(&inverter.vta, &plan.thresholds, Backend::Matrix, &opts)?;
    if out.schedule != plan.schedule {
        return Err(DinvError::ScheduleViolation { planned: plan.schedule.r.clone(), realized: out.schedule.r });
    }
    let state = inverter.unmarking().apply(&out.state.expect("matrix backend returns a state"));
    let good = inverter.vta.flag.complement().apply(&state);
    let n = good.norm();
    if n == 0.0 {
        return Err(DinvError::Degenerate("no good amplitude".into()));
    }
    let mut ledger = out.ledger;
    ledger.extra.push(LedgerLine { label: "finalize".into(), cost: QueryCost::new(inverter.bm_charge, 0) });
    Ok(DinvRun {
        l,
        plan,
        final_amplitude: out.trace.final_amplitude,
        amplitude_floor: 5f64.sqrt() / (9.0 * spec.c),
        trace: out.trace,
        ledger,
        state,
        good: good.unscale(n),
        inverter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    ExactAmplitude,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub mode: EstimationMode,
    /// Additive amplitude-estimation accuracy.
    pub accuracy: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig { mode: EstimationMode::ExactAmplitude, accuracy: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    /// Depth at which the upper gate was first exceeded.
    pub l: usize,
    /// `2/(√5·3^{l+1}·c)`, an estimate of the success amplitude.
    pub sqrt_p: f64,
    /// `sqrt_p · α_{A⁻¹}`, an estimate of `‖A⁻¹b‖`.
    pub solution_norm: f64,
    /// Observed amplitude per depth tried.
    pub observed: Vec<f64>,
    /// True amplitude per depth tried.
    pub true_amplitudes: Vec<f64>,
    pub ledger: QueryCost,
    /// `Σ_l δ_l` over the depths tried.
    pub failure_budget: f64,
}

/// Upper gate `4√5/(45c)` of the stopping rule.
pub fn upper_gate(c: f64) -> f64 {
    4.0 * 5f64.sqrt() / (45.0 * c)
}

/// Lower gate `√5/(15c)`.
pub fn lower_gate(c: f64) -> f64 {
    5f64.sqrt() / (15.0 * c)
}

/// Increases the depth until the amplified amplitude clears the upper gate.
///
/// `alpha_p` is a lower bound on the success probability of the prepared
/// state. Depths start at 0 so that large success probabilities stop at once.
pub fn estimate_solution_norm<R: Rng>(
    setup: &Setup,
    spec: &DinvSpec,
    alpha_p: f64,
    cfg: &EstimationConfig,
    rng: &mut R,
) -> Result<NormEstimate, DinvError> {
    if !(alpha_p > 0.0 && alpha_p <= 1.0) {
        return Err(DinvError::Parameter(format!("probability lower bound must lie in (0, 1], got {alpha_p}")));
    }
    let max_l = plan_depth(spec.c, alpha_p.sqrt())?;
    let gate = upper_gate(spec.c);
    let mut observed = Vec::new();
    let mut truth = Vec::new();
    let mut ledger = QueryCost::default();
    let mut failure_budget = 0.0;
    let opts = RunOptions { dim_cap: spec.dim_cap, ..Default::default() };
    for l in 0..=setup.m.min(max_l + 2) {
        let inv = build_inverter_vta(setup, spec, l)?;
        let plan = plan_for_depth(&inv.vta, spec.c, l)?;
        let out = run_nested(&inv.vta, &plan.schedule, Backend::Matrix, &opts)?;
        let a = out.trace.final_amplitude;
        let delta = 1.0 / ((max_l as f64 - l as f64 + 3.0).max(2.0)).powi(2);
        failure_budget += delta;
        let run_cost = out.ledger.counted;
        let y = match cfg.mode {
            EstimationMode::ExactAmplitude => {
                ledger += run_cost;
                a
            }
            EstimationMode::Stochastic => {
                let reps = (3.0 * std::f64::consts::PI / cfg.accuracy).ceil() as u64
                    * (2 * (2.6 * (1.0 / delta).ln()).ceil() as u64 + 1);
                ledger += run_cost * reps;
                if rng.random::<f64>() < delta {
                    if a > gate {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    (a + rng.random_range(-cfg.accuracy..=cfg.accuracy)).clamp(0.0, 1.0)
                }
            }
        };
        observed.push(y);
        truth.push(a);
        if y > gate {
            let sqrt_p = 2.0 / (5f64.sqrt() * 3f64.powi(l as i32 + 1) * spec.c);
            return Ok(NormEstimate {
                l,
                sqrt_p,
                solution_norm: sqrt_p * setup.alpha_ainv,
                observed,
                true_amplitudes: truth,
                ledger,
                failure_budget,
            });
        }
    }
    Err(DinvError::NoStop { max: setup.m.min(max_l + 2) })
}

/// Chebyshev degree `2j₀+1` of the inverse polynomial for condition number `κ`
/// and accuracy `ε`.
pub fn inverse_poly_degree(kappa: f64, eps: f64) -> u64 {
    let b = (kappa * kappa * (kappa / eps).ln()).ceil();
    let j0 = (b * (4.0 * b / eps).ln()).sqrt().ceil();
    2 * j0 as u64 + 1
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Normalized output in the system register.
    pub x: CVec,
    pub fidelity: f64,
    /// Success amplitude of inversion plus uncomputation on the normalized state.
    pub amplitude: f64,
    /// `‖inverted ψ_{d-inv}‖²` relative to the unnormalized state.
    pub p_blk: f64,
    pub final_rounds: u32,
    pub success_probability: f64,
    pub dinv: DinvRun,
    pub lines: Vec<LedgerLine>,
    /// One attempt: preparation, inversion and uncomputation.
    pub attempt: QueryCost,
    /// `(2r+1)` attempts.
    pub total: QueryCost,
}

/// Prepares `ψ_{d-inv}`, applies the clock-controlled inverse, uncomputes the
/// clock and amplifies the outcome.
pub fn solve_qls(setup: &Setup, spec: &DinvSpec, sqrt_p_estimate: Option<f64>) -> Result<SolveReport, DinvError> {
    if setup.gamma.iter().all(|g| g.norm() == 0.0) {
        return Err(DinvError::Degenerate("b has no weight on the spectrum".into()));
    }
    let run = prepare_dinv(setup, spec, sqrt_p_estimate)?;
    let lay = run.inverter.layout;
    let m = setup.m;
    let invert = |v: &CVec| {
        let mut out = CVec::zeros(v.len());
        for u in 0..setup.d() {
            let off = u * lay.sector_dim();
            for k in 0..m {
                let scale = 3f64.powi(-(k as i32 + 2));
                let f = if setup.mu[u].abs() >= scale { scale / (2.0 * setup.mu[u]) } else { 0.0 };
                for i in 0..8 {
                    let ix = off + lay.index(k, ClockFlagLayout::GOOD, 0, 0, 0) + i;
                    out[ix] = v[ix] * f;
                }
            }
        }
        out
    };
    let gamma_map = run.inverter.clock_map();
    let finish = |v: &CVec| lay.extract(&gamma_map.apply_adjoint(&invert(v)), 0, ClockFlagLayout::CONTD);

    let coeffs = finish(&run.good);
    let spec_vecs = setup.be.spectrum();
    let x_raw = (0..setup.d()).fold(CVec::zeros(setup.d()), |acc, u| acc + spec_vecs.vector(u) * coeffs[u]);
    let amplitude = x_raw.norm();
    if amplitude == 0.0 {
        return Err(DinvError::Degenerate("inversion annihilated the state".into()));
    }
    let x = x_raw.unscale(amplitude);
    let fidelity = setup.solution().dotc(&x).norm_sqr();

    let unnormalized = run.inverter.psi_dinv(setup);
    let p_blk = invert(&unnormalized).norm_squared();

    let final_rounds = tunable_step_count(1.0, amplitude)?;
    let n = (2 * final_rounds + 1) as f64;
    let success_probability = (n * amplitude.min(1.0).asin()).sin().powi(2);

    let kappa = 3f64.powi(m as i32 + 1);
    let degree = inverse_poly_degree(kappa, spec.eps_blk);
    let uncompute = run.inverter.gpe_charges.iter().sum::<u64>() + 2 * run.inverter.bm_charge;
    let mut lines = vec![LedgerLine { label: "prepare".into(), cost: run.ledger.total() }];
    lines.push(LedgerLine { label: "invert".into(), cost: QueryCost::new(degree, 0) });
    lines.push(LedgerLine { label: "uncompute".into(), cost: QueryCost::new(uncompute, 0) });
    let attempt = lines.iter().fold(QueryCost::default(), |a, l| a + l.cost);
    let total = attempt * (2 * final_rounds as u64 + 1);
    Ok(SolveReport {
        x,
        fidelity,
        amplitude,
        p_blk,
        final_rounds,
        success_probability,
        dinv: run,
        lines,
        attempt,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineCost {
    pub degree: u64,
    pub rounds: u32,
    pub amplitude: f64,
    pub cost: QueryCost,
}

/// Inverse polynomial of degree `D` on `A/α_A` followed by plain amplitude
/// amplification of the `‖A⁻¹b‖/(2α_{A⁻¹})` amplitude.
pub fn qsvt_aa_baseline(setup: &Setup, eps: f64) -> Result<BaselineCost, DinvError> {
    let kappa = setup.alpha_a * setup.alpha_ainv;
    let degree = inverse_poly_degree(kappa, eps);
    let amplitude = setup.p_succ().sqrt() / 2.0;
    let rounds = tunable_step_count(1.0, amplitude)?;
    let n = 2 * rounds as u64 + 1;
    Ok(BaselineCost { degree, rounds, amplitude, cost: QueryCost::new(n * degree, n) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroverExpected {
    pub d: usize,
    pub w: usize,
    /// `‖A⁻¹‖ = √d`.
    pub inverse_norm: f64,
    /// `√((5d²−8d+4)/d²)`.
    pub solution_norm: f64,
    /// `|⟨w|x̂⟩|²` for the exact solution.
    pub outcome_probability: f64,
    /// `(|⟨w|x̂⟩| − 1/60)²`.
    pub floor: f64,
    /// `(13/(8√5) − 1/60)²`, valid for every `d ≥ 15`.
    pub uniform_floor: f64,
}

pub const GROVER_EPS: f64 = 1.0 / 60.0;

pub fn grover_fixture(d: usize, w: usize) -> Result<(LinearSystemInstance, GroverExpected), DinvError> {
    if d < 15 {
        return Err(DinvError::Parameter(format!("the lower-bound instance needs d ≥ 15, got {d}")));
    }
    if w >= d {
        return Err(DinvError::Parameter(format!("marked index {w} out of range for d = {d}")));
    }
    let df = d as f64;
    let plus = CVec::from_element(d, C64::new(1.0 / df.sqrt(), 0.0));
    let pp = &plus * plus.adjoint();
    let a = (CMat::identity(d, d) - &pp).unscale(df.sqrt()) + pp;
    let mut b = CVec::from_element(d, C64::new(1.0 / df.sqrt(), 0.0));
    b[w] = -b[w];
    let inst = LinearSystemInstance::new(a, b)?;
    let overlap = (1.0 - 2.0 / df) / df.sqrt() - 2.0 * (1.0 - 1.0 / df);
    let norm2 = (5.0 * df * df - 8.0 * df + 4.0) / (df * df);
    let outcome_probability = overlap * overlap / norm2;
    let expected = GroverExpected {
        d,
        w,
        inverse_norm: df.sqrt(),
        solution_norm: norm2.sqrt(),
        outcome_probability,
        floor: (outcome_probability.sqrt() - GROVER_EPS).powi(2),
        uniform_floor: (13.0 / (8.0 * 5f64.sqrt()) - GROVER_EPS).powi(2),
    };
    Ok((inst, expected))
}

pub mod fixtures {
    //! Seeded random instances with controlled spectra.
    use super::*;
    use crate::numerics::random;

    /// Eigenvalues `±|λ|` with `|λ|` log-uniform in `[lo, hi]`.
    pub fn log_uniform_spectrum<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..d)
            .map(|_| {
                let t: f64 = rng.random();
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                s * (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            })
            .collect()
    }

    pub fn random_instance<R: Rng>(rng: &mut R, d: usize, kappa: f64) -> LinearSystemInstance {
        let eig = log_uniform_spectrum(rng, d, 1.0 / kappa, 1.0);
        let a = random::hermitian_with_spectrum(rng, &eig);
        let b = random::state(rng, d);
        LinearSystemInstance::new(a, b).expect("generated shapes agree")
    }

    /// One eigenvalue per clock band `k = 0..m`, with `|λ|` inside band `k`
    /// and rescaling to `α_A = 1`, `α_{A⁻¹} = 3^m`.
    pub fn banded_instance<R: Rng>(rng: &mut R, m: usize) -> LinearSystemInstance {
        banded_instance_with(rng, m, 1)
    }

    /// `per_band` eigenvalues in each clock band `k = 0..m`.
    pub fn banded_instance_with<R: Rng>(rng: &mut R, m: usize, per_band: usize) -> LinearSystemInstance {
        let eig: Vec<f64> = (0..m)
            .flat_map(|k| std::iter::repeat_n(k, per_band))
            .map(|k| {
                let t: f64 = rng.random_range(0.05..0.95);
                let lo = 3f64.powi(-(k as i32 + 1));
                let hi = 3f64.powi(-(k as i32)).min(0.5);
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                s * (lo + t * (hi - lo))
            })
            .collect();
        let a = random::hermitian_with_spectrum(rng, &eig);
        let b = random::state(rng, eig.len());
        LinearSystemInstance { a, b, alpha_a: Some(0.5), alpha_ainv: Some(0.999 * 3f64.powi(m as i32)) }
    }
}
