//! Variable-time amplitude amplification: axiom checks, nested amplification on
//! an exact matrix backend and an analytic amplitude backend, Tunable VTAA
//! scheduling, and the cost bookkeeping that goes with it.

use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{op_norm, CMat, CVec, C64, ONE, TAU_AMP, TAU_UNIT, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VtaaError {
    #[error("stage {stage} overshoots: (2r+1)a = {value}")]
    Overshoot { stage: usize, value: f64 },
    #[error("dimension {dim} exceeds the matrix backend cap {cap}")]
    Resource { dim: usize, cap: usize },
    #[error("index error: {0}")]
    Index(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("stage {stage} has zero amplitude but a positive threshold")]
    Unreachable { stage: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Linear operators with enough structure to keep the simulator cheap.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Identity(usize),
    Dense(CMat),
    /// Square blocks along the diagonal.
    BlockDiag(Vec<CMat>),
    Diagonal(Vec<C64>),
    /// `phase · (I − 2vv†)` with unit `v`.
    Householder { v: CVec, phase: C64 },
}

impl Operator {
    pub fn dim(&self) -> usize {
        match self {
            Operator::Identity(n) => *n,
            Operator::Dense(m) => m.nrows(),
            Operator::BlockDiag(b) => b.iter().map(|m| m.nrows()).sum(),
            Operator::Diagonal(d) => d.len(),
            Operator::Householder { v, .. } => v.len(),
        }
    }

    pub fn zero_projection(n: usize) -> Self {
        Operator::Diagonal(vec![ZERO; n])
    }

    pub fn mask(bits: impl IntoIterator<Item = bool>) -> Self {
        Operator::Diagonal(bits.into_iter().map(|b| if b { ONE } else { ZERO }).collect())
    }

    /// Unitary `P` with `P|0⟩ = ψ`.
    pub fn preparation(psi: &CVec) -> Self {
        let n = psi.len();
        let p0 = psi[0];
        let phase = if p0.norm() > 1e-300 { p0 / p0.norm() } else { ONE };
        let mut v = -psi.clone();
        v[0] += phase;
        let nv = v.norm();
        if nv < 1e-15 {
            return Operator::Diagonal((0..n).map(|i| if i == 0 { phase } else { ONE }).collect());
        }
        // the reflection swaps phase·e0 and ψ since ⟨phase·e0, ψ⟩ is real
        Operator::Householder { v: v.unscale(nv), phase }
    }

    pub fn apply(&self, x: &CVec) -> CVec {
        match self {
            Operator::Identity(_) => x.clone(),
            Operator::Dense(m) => m * x,
            Operator::BlockDiag(blocks) => {
                let mut out = CVec::zeros(x.len());
                let mut off = 0;
                for b in blocks {
                    let n = b.nrows();
                    let y = b * x.rows(off, n);
                    out.rows_mut(off, n).copy_from(&y);
                    off += n;
                }
                out
            }
            Operator::Diagonal(d) => CVec::from_iterator(x.len(), d.iter().zip(x.iter()).map(|(a, b)| a * b)),
            Operator::Householder { v, phase } => {
                let s = v.dotc(x);
                (x - v * (s * 2.0)) * *phase
            }
        }
    }

    pub fn apply_adjoint(&self, x: &CVec) -> CVec {
        match self {
            Operator::Identity(_) => x.clone(),
            Operator::Dense(m) => m.adjoint() * x,
            Operator::BlockDiag(blocks) => {
                let mut out = CVec::zeros(x.len());
                let mut off = 0;
                for b in blocks {
                    let n = b.nrows();
                    let y = b.adjoint() * x.rows(off, n);
                    out.rows_mut(off, n).copy_from(&y);
                    off += n;
                }
                out
            }
            Operator::Diagonal(d) => {
                CVec::from_iterator(x.len(), d.iter().zip(x.iter()).map(|(a, b)| a.conj() * b))
            }
            Operator::Householder { v, phase } => {
                let s = v.dotc(x);
                (x - v * (s * 2.0)) * phase.conj()
            }
        }
    }

    pub fn adjoint(&self) -> Operator {
        match self {
            Operator::Identity(n) => Operator::Identity(*n),
            Operator::Dense(m) => Operator::Dense(m.adjoint()),
            Operator::BlockDiag(b) => Operator::BlockDiag(b.iter().map(|m| m.adjoint()).collect()),
            Operator::Diagonal(d) => Operator::Diagonal(d.iter().map(|z| z.conj()).collect()),
            Operator::Householder { v, phase } => Operator::Householder { v: v.clone(), phase: phase.conj() },
        }
    }

    pub fn to_dense(&self) -> CMat {
        match self {
            Operator::Identity(n) => CMat::identity(*n, *n),
            Operator::Dense(m) => m.clone(),
            Operator::BlockDiag(blocks) => {
                let n = self.dim();
                let mut out = CMat::zeros(n, n);
                let mut off = 0;
                for b in blocks {
                    out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
                    off += b.nrows();
                }
                out
            }
            Operator::Diagonal(d) => CMat::from_diagonal(&CVec::from_column_slice(d)),
            Operator::Householder { v, phase } => {
                (CMat::identity(v.len(), v.len()) - (v * v.adjoint()).scale(2.0)) * *phase
            }
        }
    }

    fn partition(&self) -> Option<Vec<usize>> {
        match self {
            Operator::BlockDiag(b) => Some(b.iter().map(|m| m.nrows()).collect()),
            _ => None,
        }
    }

    fn as_blocks(&self, partition: &[usize]) -> Option<Vec<CMat>> {
        match self {
            Operator::BlockDiag(b) if b.iter().map(|m| m.nrows()).eq(partition.iter().copied()) => Some(b.clone()),
            Operator::Identity(_) => Some(partition.iter().map(|&n| CMat::identity(n, n)).collect()),
            Operator::Diagonal(d) => {
                let mut off = 0;
                Some(
                    partition
                        .iter()
                        .map(|&n| {
                            let m = CMat::from_diagonal(&CVec::from_column_slice(&d[off..off + n]));
                            off += n;
                            m
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// `self · other`, keeping structure where possible.
    pub fn compose(&self, other: &Operator) -> Operator {
        use Operator::*;
        match (self, other) {
            (Identity(_), o) => o.clone(),
            (s, Identity(_)) => s.clone(),
            (Diagonal(a), Diagonal(b)) => Diagonal(a.iter().zip(b).map(|(x, y)| x * y).collect()),
            _ => {
                let part = self.partition().or_else(|| other.partition());
                if let Some(p) = part {
                    if let (Some(a), Some(b)) = (self.as_blocks(&p), other.as_blocks(&p)) {
                        return BlockDiag(a.iter().zip(&b).map(|(x, y)| x * y).collect());
                    }
                }
                Dense(self.to_dense() * other.to_dense())
            }
        }
    }

    /// Operator norm of `self − other`.
    pub fn distance(&self, other: &Operator) -> f64 {
        use Operator::*;
        match (self, other) {
            (Diagonal(a), Diagonal(b)) => a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max),
            (Identity(_), Identity(_)) => 0.0,
            _ => {
                let part = self.partition().or_else(|| other.partition());
                if let Some(p) = part {
                    if let (Some(a), Some(b)) = (self.as_blocks(&p), other.as_blocks(&p)) {
                        return a.iter().zip(&b).map(|(x, y)| op_norm(&(x - y))).fold(0.0, f64::max);
                    }
                }
                if let (Diagonal(_) | Identity(_), Diagonal(_) | Identity(_)) = (self, other) {
                    let n = self.dim();
                    let a = self.as_blocks(&[n]).unwrap();
                    let b = other.as_blocks(&[n]).unwrap();
                    return (0..n).map(|i| (a[0][(i, i)] - b[0][(i, i)]).norm()).fold(0.0, f64::max);
                }
                op_norm(&(self.to_dense() - other.to_dense()))
            }
        }
    }

    /// `I − self`.
    pub fn complement(&self) -> Operator {
        match self {
            Operator::Diagonal(d) => Operator::Diagonal(d.iter().map(|z| ONE - z).collect()),
            Operator::Identity(n) => Operator::zero_projection(*n),
            Operator::BlockDiag(b) => {
                Operator::BlockDiag(b.iter().map(|m| CMat::identity(m.nrows(), m.nrows()) - m).collect())
            }
            o => Operator::Dense(CMat::identity(o.dim(), o.dim()) - o.to_dense()),
        }
    }

    /// Worst of `‖P² − P‖` and `‖P − P†‖`.
    pub fn projection_defect(&self) -> f64 {
        self.compose(self).distance(self).max(self.distance(&self.adjoint()))
    }

    pub fn unitarity_defect(&self) -> f64 {
        match self {
            Operator::Identity(_) => 0.0,
            Operator::Householder { v, phase } => (v.norm() - 1.0).abs().max((phase.norm() - 1.0).abs()),
            _ => self.adjoint().compose(self).distance(&Operator::Identity(self.dim())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCost {
    pub oracle_a: u64,
    pub oracle_b: u64,
}

impl QueryCost {
    pub const fn new(oracle_a: u64, oracle_b: u64) -> Self {
        QueryCost { oracle_a, oracle_b }
    }
}

impl Add for QueryCost {
    type Output = QueryCost;
    fn add(self, o: QueryCost) -> QueryCost {
        QueryCost { oracle_a: self.oracle_a + o.oracle_a, oracle_b: self.oracle_b + o.oracle_b }
    }
}

impl AddAssign for QueryCost {
    fn add_assign(&mut self, o: QueryCost) {
        *self = *self + o;
    }
}

impl Mul<u64> for QueryCost {
    type Output = QueryCost;
    fn mul(self, k: u64) -> QueryCost {
        QueryCost { oracle_a: self.oracle_a * k, oracle_b: self.oracle_b * k }
    }
}

#[derive(Debug, Clone)]
pub struct VariableTimeAlgorithm {
    /// `Π_0 … Π_m`.
    pub projections: Vec<Operator>,
    /// `Π_b`.
    pub flag: Operator,
    /// `A_1 … A_m`.
    pub stages: Vec<Operator>,
    pub psi0: CVec,
    pub stage_costs: Vec<QueryCost>,
    pub prep_cost: QueryCost,
}

impl VariableTimeAlgorithm {
    pub fn m(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.psi0.len()
    }

    /// `I − Π_jΠ_b`.
    pub fn potentially_good(&self, j: usize) -> Operator {
        self.projections[j].compose(&self.flag).complement()
    }

    fn check_shapes(&self) -> Result<(), VtaaError> {
        let n = self.dim();
        let m = self.m();
        if self.projections.len() != m + 1 || self.stage_costs.len() != m {
            return Err(VtaaError::Dimension(format!(
                "{} stages need {} projections and {} costs",
                m,
                m + 1,
                m
            )));
        }
        let all = self.projections.iter().chain(self.stages.iter()).chain(std::iter::once(&self.flag));
        for op in all {
            if op.dim() != n {
                return Err(VtaaError::Dimension(format!("operator of dimension {} in a {n}-dimensional algorithm", op.dim())));
            }
        }
        Ok(())
    }

    /// Amplitudes `b_j = ‖Π̄_jΠ_b A_j⋯A_1ψ_0‖` of plain composition, `j = 0..=m`.
    pub fn plain_amplitudes(&self) -> Vec<f64> {
        let mut v = self.psi0.clone();
        let mut out = vec![self.potentially_good(0).apply(&v).norm()];
        for j in 1..=self.m() {
            v = self.stages[j - 1].apply(&v);
            out.push(self.potentially_good(j).apply(&v).norm());
        }
        out
    }

    /// `A_m ⋯ A_1 ψ_0`.
    pub fn plain_state(&self) -> CVec {
        self.stages.iter().fold(self.psi0.clone(), |v, a| a.apply(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub name: String,
    pub passed: bool,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub checks: Vec<AxiomCheck>,
    /// `‖Π̄_jΠ_b A_j⋯A_1ψ_0‖` for `j = 0..=m`.
    pub amplitude_chain: Vec<f64>,
    pub chain_monotone: bool,
}

impl AxiomReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.chain_monotone
    }

    pub fn failed(&self) -> Vec<&AxiomCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub fn validate_axioms(vta: &VariableTimeAlgorithm) -> AxiomReport {
    validate_axioms_with(vta, TAU_UNIT)
}

pub fn validate_axioms_with(vta: &VariableTimeAlgorithm, tol: f64) -> AxiomReport {
    let mut checks = Vec::new();
    let mut push = |name: String, v: f64| checks.push(AxiomCheck { name, passed: v <= tol, violation: v });
    if let Err(e) = vta.check_shapes() {
        push(format!("shapes ({e})"), f64::INFINITY);
        return AxiomReport { checks, amplitude_chain: vec![], chain_monotone: false };
    }
    let n = vta.dim();
    let m = vta.m();
    push("initial state normalized".into(), (vta.psi0.norm() - 1.0).abs());
    push("Π_0 = 0".into(), vta.projections[0].distance(&Operator::zero_projection(n)));
    push("Π_m = I".into(), vta.projections[m].distance(&Operator::Identity(n)));
    push("Π_b is a projection".into(), vta.flag.projection_defect());
    for (j, p) in vta.projections.iter().enumerate() {
        push(format!("Π_{j} is a projection"), p.projection_defect());
        push(format!("Π_b commutes with Π_{j}"), p.compose(&vta.flag).distance(&vta.flag.compose(p)));
    }
    for k in 1..=m {
        for j in 0..k {
            let pk = &vta.projections[k];
            let pj = &vta.projections[j];
            push(format!("Π_{k}Π_{j} = Π_{j}"), pk.compose(pj).distance(pj));
        }
    }
    for (i, a) in vta.stages.iter().enumerate() {
        let j = i + 1;
        push(format!("A_{j} unitary"), a.unitarity_defect());
        let p = &vta.projections[j - 1];
        push(format!("A_{j}Π_{} = Π_{}", j - 1, j - 1), a.compose(p).distance(p));
    }
    let chain = vta.plain_amplitudes();
    let chain_monotone = (chain[0] - 1.0).abs() <= tol && chain.windows(2).all(|w| w[1] <= w[0] + tol);
    AxiomReport { checks, amplitude_chain: chain, chain_monotone }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmplificationSchedule {
    /// `r_1 … r_m`.
    pub r: Vec<u32>,
}

impl AmplificationSchedule {
    pub fn trivial(m: usize) -> Self {
        AmplificationSchedule { r: vec![0; m] }
    }

    pub fn steps(&self) -> Vec<u64> {
        self.r.iter().map(|&r| 2 * r as u64 + 1).collect()
    }

    /// 1-based indices `s_1 < … < s_l` with `r ≥ 1`.
    pub fn nontrivial(&self) -> Vec<usize> {
        self.r.iter().enumerate().filter(|(_, &r)| r > 0).map(|(i, _)| i + 1).collect()
    }

    pub fn l(&self) -> usize {
        self.nontrivial().len()
    }

    pub fn query_product(&self) -> u64 {
        self.steps().iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    /// `α_1 … α_m`.
    pub alpha: Vec<f64>,
}

impl ThresholdVector {
    pub fn zeros(m: usize) -> Self {
        ThresholdVector { alpha: vec![0.0; m] }
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    /// `a_j`.
    pub pre: f64,
    /// `ã_j`.
    pub post: f64,
    /// `ã_j / ((2r_j+1) a_j)`, 1 at trivial stages.
    pub loss: f64,
    /// `b_j` from plain composition.
    pub plain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeTrace {
    pub stages: Vec<StageTrace>,
    pub final_amplitude: f64,
    /// `‖Π̄_b A_m⋯A_1ψ_0‖`.
    pub sqrt_p_succ: f64,
}

impl AmplitudeTrace {
    pub fn total_loss(&self) -> f64 {
        self.stages.iter().map(|s| s.loss).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerLine {
    pub label: String,
    pub cost: QueryCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Instrumented counts from the run itself.
    pub counted: QueryCost,
    /// Applications of `A_j` or `A_j†`, per stage.
    pub stage_applications: Vec<u64>,
    /// Applications of the initial-state preparation or its inverse.
    pub prep_applications: u64,
    /// Closed-form totals for the same schedule.
    pub analytic: QueryCost,
    /// `Π_{k≥j}(2r_k+1)` for `j = 1..=m`.
    pub query_products: Vec<u64>,
    /// Work outside the nested amplification (finalization, inversion, ...).
    pub extra: Vec<LedgerLine>,
}

impl CostLedger {
    pub fn exact(&self) -> bool {
        self.counted == self.analytic
    }

    pub fn extra_total(&self) -> QueryCost {
        self.extra.iter().fold(QueryCost::default(), |a, l| a + l.cost)
    }

    pub fn total(&self) -> QueryCost {
        self.counted + self.extra_total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Matrix,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub dim_cap: usize,
    /// Multiplicative factors applied to measured amplitudes when choosing `r_j`.
    pub amplitude_factors: Option<Vec<f64>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { dim_cap: 4096, amplitude_factors: None }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// `Ã_m|0⟩`; absent for the analytic backend.
    pub state: Option<CVec>,
    pub schedule: AmplificationSchedule,
    pub trace: AmplitudeTrace,
    pub ledger: CostLedger,
}

/// Least `r ≥ 0` with `(2r+1)a ≥ √α/3`.
pub fn tunable_step_count(alpha: f64, a: f64) -> Result<u32, VtaaError> {
    if !(alpha >= 0.0) || !(a >= 0.0) {
        return Err(VtaaError::Parameter(format!("need α ≥ 0 and a ≥ 0, got α = {alpha}, a = {a}")));
    }
    if alpha == 0.0 {
        return Ok(0);
    }
    if a == 0.0 {
        return Err(VtaaError::Unreachable { stage: 0 });
    }
    // the slack keeps exact boundary cases (a = √α/3) at r = 0
    let x = alpha.sqrt() / (6.0 * a) - 0.5;
    Ok((x - 1e-12).ceil().max(0.0) as u32)
}

enum Rule<'a> {
    Fixed(&'a AmplificationSchedule),
    Tunable(&'a ThresholdVector),
}

impl Rule<'_> {
    fn steps_for(&self, j: usize, a: f64) -> Result<u32, VtaaError> {
        match self {
            Rule::Fixed(s) => Ok(s.r[j - 1]),
            Rule::Tunable(t) => tunable_step_count(t.alpha[j - 1], a).map_err(|e| match e {
                VtaaError::Unreachable { .. } => VtaaError::Unreachable { stage: j },
                e => e,
            }),
        }
    }
}

struct Engine<'a> {
    vta: &'a VariableTimeAlgorithm,
    prep: Operator,
    good: Vec<Operator>,
    r: Vec<u32>,
    counted: QueryCost,
    stage_apps: Vec<u64>,
    prep_apps: u64,
}

impl Engine<'_> {
    fn tilde(&mut self, j: usize, v: CVec) -> CVec {
        if j == 0 {
            self.prep_apps += 1;
            self.counted += self.vta.prep_cost;
            return self.prep.apply(&v);
        }
        let mut x = self.prime(j, v);
        for _ in 0..self.r[j - 1] {
            x = self.reflect(j, x);
        }
        x
    }

    fn tilde_adjoint(&mut self, j: usize, v: CVec) -> CVec {
        if j == 0 {
            self.prep_apps += 1;
            self.counted += self.vta.prep_cost;
            return self.prep.apply_adjoint(&v);
        }
        let mut x = v;
        for _ in 0..self.r[j - 1] {
            x = self.reflect_adjoint(j, x);
        }
        self.prime_adjoint(j, x)
    }

    fn charge(&mut self, j: usize) {
        self.stage_apps[j - 1] += 1;
        self.counted += self.vta.stage_costs[j - 1];
    }

    /// `A_j Ã_{j−1}`.
    fn prime(&mut self, j: usize, v: CVec) -> CVec {
        let x = self.tilde(j - 1, v);
        self.charge(j);
        self.vta.stages[j - 1].apply(&x)
    }

    fn prime_adjoint(&mut self, j: usize, v: CVec) -> CVec {
        self.charge(j);
        let x = self.vta.stages[j - 1].apply_adjoint(&v);
        self.tilde_adjoint(j - 1, x)
    }

    /// `−(Ã'_j S_0 Ã'_j†)(I − 2Π̄_jΠ_b)`.
    fn reflect(&mut self, j: usize, x: CVec) -> CVec {
        let g = self.good[j].apply(&x);
        let y = x - g * C64::new(2.0, 0.0);
        let mut y = self.prime_adjoint(j, y);
        y[0] = -y[0];
        -self.prime(j, y)
    }

    fn reflect_adjoint(&mut self, j: usize, x: CVec) -> CVec {
        let mut y = self.prime_adjoint(j, x);
        y[0] = -y[0];
        let y = self.prime(j, y);
        let g = self.good[j].apply(&y);
        -(y - g * C64::new(2.0, 0.0))
    }
}

fn run(vta: &VariableTimeAlgorithm, rule: Rule, backend: Backend, opts: &RunOptions) -> Result<RunOutput, VtaaError> {
    vta.check_shapes()?;
    let m = vta.m();
    if let Rule::Fixed(s) = &rule {
        if s.r.len() != m {
            return Err(VtaaError::Dimension(format!("schedule has {} entries for {m} stages", s.r.len())));
        }
    }
    if let Rule::Tunable(t) = &rule {
        if t.alpha.len() != m {
            return Err(VtaaError::Dimension(format!("threshold vector has {} entries for {m} stages", t.alpha.len())));
        }
    }
    let factor = |j: usize| opts.amplitude_factors.as_ref().map_or(1.0, |f| f[j - 1]);
    let plain = vta.plain_amplitudes();
    match backend {
        Backend::Analytic => {
            let mut r = Vec::with_capacity(m);
            let mut stages = Vec::with_capacity(m);
            let mut a = plain[1];
            for j in 1..=m {
                let rj = rule.steps_for(j, a * factor(j))?;
                let n = (2 * rj + 1) as f64;
                if rj > 0 && n * a > 1.0 + 1e-12 {
                    return Err(VtaaError::Overshoot { stage: j, value: n * a });
                }
                let post = if rj == 0 { a } else { (n * a.min(1.0).asin()).sin() };
                let loss = if rj == 0 || a == 0.0 { 1.0 } else { post / (n * a) };
                stages.push(StageTrace { pre: a, post, loss, plain: plain[j] });
                r.push(rj);
                if j < m {
                    a = if plain[j] > 0.0 { post * plain[j + 1] / plain[j] } else { 0.0 };
                }
            }
            let schedule = AmplificationSchedule { r };
            let totals = cost_totals(&schedule, &vta.stage_costs, vta.prep_cost);
            let final_amplitude = stages.last().map_or(plain[0], |s| s.post);
            Ok(RunOutput {
                state: None,
                trace: AmplitudeTrace { stages, final_amplitude, sqrt_p_succ: plain[m] },
                ledger: CostLedger {
                    counted: totals.total,
                    stage_applications: totals.stage_factors.clone(),
                    prep_applications: totals.prep_factor,
                    analytic: totals.total,
                    query_products: totals.stage_factors,
                    extra: vec![],
                },
                schedule,
            })
        }
        Backend::Matrix => {
            let n = vta.dim();
            if n > opts.dim_cap {
                return Err(VtaaError::Resource { dim: n, cap: opts.dim_cap });
            }
            let good = (0..=m).map(|j| vta.potentially_good(j)).collect();
            let mut eng = Engine {
                vta,
                prep: Operator::preparation(&vta.psi0),
                good,
                r: vec![0; m],
                counted: QueryCost::default(),
                stage_apps: vec![0; m],
                prep_apps: 0,
            };
            let mut e0 = CVec::zeros(n);
            e0[0] = ONE;
            let mut state = eng.tilde(0, e0);
            let mut stages = Vec::with_capacity(m);
            for j in 1..=m {
                eng.charge(j);
                let chi = vta.stages[j - 1].apply(&state);
                let a = eng.good[j].apply(&chi).norm();
                let rj = rule.steps_for(j, a * factor(j))?;
                eng.r[j - 1] = rj;
                let mut x = chi;
                for _ in 0..rj {
                    x = eng.reflect(j, x);
                }
                let post = eng.good[j].apply(&x).norm();
                let nn = (2 * rj + 1) as f64;
                let loss = if rj == 0 || a == 0.0 { 1.0 } else { post / (nn * a) };
                stages.push(StageTrace { pre: a, post, loss, plain: plain[j] });
                state = x;
            }
            let schedule = AmplificationSchedule { r: eng.r.clone() };
            let totals = cost_totals(&schedule, &vta.stage_costs, vta.prep_cost);
            let final_amplitude = stages.last().map_or(plain[0], |s| s.post);
            Ok(RunOutput {
                state: Some(state),
                trace: AmplitudeTrace { stages, final_amplitude, sqrt_p_succ: plain[m] },
                ledger: CostLedger {
                    counted: eng.counted,
                    stage_applications: eng.stage_apps,
                    prep_applications: eng.prep_apps,
                    analytic: totals.total,
                    query_products: totals.stage_factors,
                    extra: vec![],
                },
                schedule,
            })
        }
    }
}

pub fn run_nested(
    vta: &VariableTimeAlgorithm,
    schedule: &AmplificationSchedule,
    backend: Backend,
    opts: &RunOptions,
) -> Result<RunOutput, VtaaError> {
    run(vta, Rule::Fixed(schedule), backend, opts)
}

/// Picks each `r_j` from the running amplitude `a_j` and the threshold `α_j`.
pub fn run_tunable(
    vta: &VariableTimeAlgorithm,
    thresholds: &ThresholdVector,
    backend: Backend,
    opts: &RunOptions,
) -> Result<RunOutput, VtaaError> {
    run(vta, Rule::Tunable(thresholds), backend, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCheck {
    pub sum_alpha: f64,
    pub no_overshoot: bool,
    /// Per stage with `r_j ≥ 1`: `(2r_j+1)a_j < √α_j/3 + 2a_j ≤ √α_j`.
    pub stage_bound_holds: bool,
    pub loss: f64,
    pub loss_bound: f64,
    /// `3^l ≤ Π(2r_{s_u}+1) ≤ (6/5)^{Σα}/√p_succ`.
    pub product_bounds_hold: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseCheck {
    pub alpha: Vec<f64>,
    pub max_alpha: f64,
    /// Whether the reconstructed thresholds drive Tunable VTAA to the same schedule.
    pub schedule_reproduced: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityReport {
    pub forward: Option<ForwardCheck>,
    pub reverse: Option<ReverseCheck>,
}

pub fn universality_check(
    schedule: &AmplificationSchedule,
    trace: &AmplitudeTrace,
    thresholds: Option<&ThresholdVector>,
) -> UniversalityReport {
    let steps = schedule.steps();
    let no_overshoot = trace.stages.iter().zip(&steps).all(|(s, &n)| n == 1 || n as f64 * s.pre <= 1.0 + TAU_AMP);
    let forward = thresholds.filter(|t| t.alpha.iter().all(|&a| (0.0..=1.0).contains(&a))).map(|t| {
        let sum_alpha = t.sum();
        let stage_bound_holds = trace.stages.iter().zip(&steps).zip(&t.alpha).all(|((s, &n), &al)| {
            n == 1 || (n as f64 * s.pre < al.sqrt() / 3.0 + 2.0 * s.pre + TAU_AMP && al.sqrt() / 3.0 + 2.0 * s.pre <= al.sqrt() + TAU_AMP)
        });
        let loss = trace.total_loss();
        let loss_bound = (5.0f64 / 6.0).powf(sum_alpha);
        let prod = schedule.nontrivial().iter().map(|&j| steps[j - 1] as f64).product::<f64>();
        let l = schedule.l() as i32;
        let upper = (1.2f64).powf(sum_alpha) / trace.sqrt_p_succ;
        let product_bounds_hold = 3f64.powi(l) <= prod + 0.5 && prod <= upper * (1.0 + TAU_AMP);
        let holds = sum_alpha <= 1.0 + TAU_AMP
            && no_overshoot
            && stage_bound_holds
            && loss >= loss_bound - TAU_AMP
            && product_bounds_hold;
        ForwardCheck { sum_alpha, no_overshoot, stage_bound_holds, loss, loss_bound, product_bounds_hold, holds }
    });
    let reverse = no_overshoot.then(|| {
        let alpha: Vec<f64> = trace
            .stages
            .iter()
            .zip(&steps)
            .map(|(s, &n)| if n == 1 { 0.0 } else { 9.0 * (n * n) as f64 * s.pre * s.pre })
            .collect();
        let max_alpha = alpha.iter().copied().fold(0.0, f64::max);
        let schedule_reproduced = trace
            .stages
            .iter()
            .zip(&alpha)
            .zip(&schedule.r)
            .all(|((s, &al), &r)| tunable_step_count(al, s.pre).map(|x| x == r).unwrap_or(al == 0.0 && r == 0));
        let eligible = trace.stages.iter().zip(&steps).all(|(s, &n)| n == 1 || s.pre <= 1.0 / (3.0 * n as f64) + TAU_AMP);
        let holds = !eligible || (max_alpha <= 1.0 + TAU_AMP && schedule_reproduced);
        ReverseCheck { alpha, max_alpha, schedule_reproduced, holds }
    });
    UniversalityReport { forward, reverse }
}

/// Both sides of the query-product representation over nontrivial stages `v..=w`.
pub fn query_product_identity(
    trace: &AmplitudeTrace,
    schedule: &AmplificationSchedule,
    v: usize,
    w: usize,
) -> Result<(f64, f64, f64), VtaaError> {
    let s = schedule.nontrivial();
    let l = s.len();
    if l == 0 {
        return Ok((1.0, 1.0, 0.0));
    }
    if !(1 <= v && v <= w && w <= l) {
        return Err(VtaaError::Index(format!("need 1 ≤ v ≤ w ≤ l = {l}, got v = {v}, w = {w}")));
    }
    let steps = schedule.steps();
    let lhs: f64 = (v..=w).map(|u| steps[s[u - 1] - 1] as f64).product();
    let inv_loss: f64 = (v..=w).map(|u| 1.0 / trace.stages[s[u - 1] - 1].loss).product();
    let (post_prev, plain_prev) = if v == 1 {
        (1.0, 1.0)
    } else {
        let st = trace.stages[s[v - 2] - 1];
        (st.post, st.plain)
    };
    let last = trace.stages[s[w - 1] - 1];
    let rhs = inv_loss * (last.post / post_prev) * (plain_prev / last.plain);
    Ok((lhs, rhs, (lhs - rhs).abs()))
}

/// `Σ_v b_v c_v / √α_v`.
pub fn threshold_objective(b: &[f64], c: &[f64], alpha: &[f64]) -> f64 {
    b.iter().zip(c).zip(alpha).map(|((b, c), a)| b * c / a.sqrt()).sum()
}

/// Minimizer of `Σ b_v c_v/√α_v` subject to `Σα_v = 1`, and the minimum `‖b∘c‖_{2/3}`.
pub fn optimize_thresholds(b: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64), VtaaError> {
    if b.len() != c.len() || b.is_empty() {
        return Err(VtaaError::Parameter("need equally many positive amplitudes and costs".into()));
    }
    if b.iter().chain(c).any(|x| !(*x > 0.0)) {
        return Err(VtaaError::Parameter("amplitudes and costs must be positive".into()));
    }
    let w: Vec<f64> = b.iter().zip(c).map(|(b, c)| (b * c).powf(2.0 / 3.0)).collect();
    let s: f64 = w.iter().sum();
    Ok((w.iter().map(|x| x / s).collect(), s.powf(1.5)))
}

/// Merges stages `1..=m−l` into one input algorithm.
pub fn premerge(vta: &VariableTimeAlgorithm, keep_last: usize) -> Result<VariableTimeAlgorithm, VtaaError> {
    let m = vta.m();
    if keep_last > m {
        return Err(VtaaError::Index(format!("cannot keep {keep_last} of {m} stages")));
    }
    let cut = m - keep_last;
    if cut == 0 {
        return Ok(vta.clone());
    }
    let merged = vta.stages[..cut].iter().fold(Operator::Identity(vta.dim()), |acc, a| a.compose(&acc));
    let merged_cost = vta.stage_costs[..cut].iter().fold(QueryCost::default(), |a, &b| a + b);
    let mut stages = vec![merged];
    stages.extend(vta.stages[cut..].iter().cloned());
    let mut costs = vec![merged_cost];
    costs.extend(vta.stage_costs[cut..].iter().copied());
    let mut projections = vec![vta.projections[0].clone()];
    projections.extend(vta.projections[cut..].iter().cloned());
    Ok(VariableTimeAlgorithm {
        projections,
        flag: vta.flag.clone(),
        stages,
        psi0: vta.psi0.clone(),
        stage_costs: costs,
        prep_cost: vta.prep_cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCost {
    pub total: QueryCost,
    /// `Π_k(2r_k+1)`.
    pub prep_factor: u64,
    /// `Π_{k≥j}(2r_k+1)`.
    pub stage_factors: Vec<u64>,
    /// The same total grouped by nontrivial stages.
    pub merged_total: QueryCost,
}

pub fn cost_totals(schedule: &AmplificationSchedule, stage_costs: &[QueryCost], prep_cost: QueryCost) -> AnalyticCost {
    let steps = schedule.steps();
    let m = steps.len();
    let mut stage_factors = vec![1u64; m];
    let mut acc = 1u64;
    for j in (0..m).rev() {
        acc *= steps[j];
        stage_factors[j] = acc;
    }
    let prep_factor = acc;
    let total = stage_costs
        .iter()
        .zip(&stage_factors)
        .fold(prep_cost * prep_factor, |t, (&c, &f)| t + c * f);

    // grouped: c_v sums the stages in (s_{v−1}, s_v], the tail after s_l runs once
    let s = schedule.nontrivial();
    let mut merged_total = prep_cost * prep_factor;
    let mut start = 0;
    for (v, &sv) in s.iter().enumerate() {
        let cv = stage_costs[start..sv].iter().fold(QueryCost::default(), |a, &b| a + b);
        let f: u64 = s[v..].iter().map(|&x| steps[x - 1]).product();
        merged_total += cv * f;
        start = sv;
    }
    merged_total += stage_costs[start..].iter().fold(QueryCost::default(), |a, &b| a + b);
    AnalyticCost { total, prep_factor, stage_factors, merged_total }
}

pub mod fixtures {
    //! Random variable-time algorithms in the canonical clock/flag layout.
    use super::*;
    use crate::numerics::random;
    use rand::Rng;

    /// Clock of `m` values ⊗ flag qubit (|1⟩ = bad) ⊗ `work`-dimensional register.
    /// `A_j` is a random unitary on clock values `≥ j−1` and the identity below.
    pub fn random_vta<R: Rng>(rng: &mut R, m: usize, work: usize) -> VariableTimeAlgorithm {
        let blk = 2 * work;
        let n = m * blk;
        let clock_of = |i: usize| i / blk;
        let is_bad = |i: usize| (i % blk) / work == 1;
        let projections =
            (0..=m).map(|j| Operator::mask((0..n).map(|i| clock_of(i) < j))).collect::<Vec<_>>();
        let flag = Operator::mask((0..n).map(is_bad));
        let stages = (1..=m)
            .map(|j| {
                let lo = (j - 1) * blk;
                let u = random::unitary(rng, n - lo);
                let mut a = CMat::identity(n, n);
                a.view_mut((lo, lo), (n - lo, n - lo)).copy_from(&u);
                Operator::Dense(a)
            })
            .collect();
        // start in clock 0, not bad
        let mut psi0 = CVec::zeros(n);
        for i in 0..work {
            psi0[i] = random::complex_gaussian(rng);
        }
        let psi0 = crate::numerics::normalized(&psi0);
        let stage_costs = (0..m).map(|_| QueryCost::new(rng.random_range(1..6), 0)).collect();
        VariableTimeAlgorithm { projections, flag, stages, psi0, stage_costs, prep_cost: QueryCost::new(0, 1) }
    }

    /// Like [`random_vta`] but each stage only sends a `keep` fraction of the
    /// continuing weight onward, so late-stage amplitudes are small.
    pub fn leaky_vta<R: Rng>(rng: &mut R, m: usize, work: usize, keep: f64) -> VariableTimeAlgorithm {
        let mut vta = random_vta(rng, m, work);
        let blk = 2 * work;
        let n = m * blk;
        let c = keep.sqrt();
        let s = (1.0 - keep).sqrt();
        for j in 1..=m {
            // rotate "not bad" on clock j−1 toward "bad" before the random mixing
            let mut rot = CMat::identity(n, n);
            let lo = (j - 1) * blk;
            for k in 0..work {
                let g = lo + k;
                let b = lo + work + k;
                rot[(g, g)] = C64::new(c, 0.0);
                rot[(b, g)] = C64::new(s, 0.0);
                rot[(g, b)] = C64::new(-s, 0.0);
                rot[(b, b)] = C64::new(c, 0.0);
            }
            let a = vta.stages[j - 1].to_dense();
            vta.stages[j - 1] = Operator::Dense(a * rot);
        }
        vta
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::numerics::random;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn preparation_maps_e0_to_state() {
        let mut r = rng(1);
        for n in [1, 2, 7] {
            let psi = random::state(&mut r, n);
            let p = Operator::preparation(&psi);
            let mut e0 = CVec::zeros(n);
            e0[0] = ONE;
            assert!((p.apply(&e0) - &psi).norm() < 1e-12);
            assert!(p.unitarity_defect() < 1e-12);
            assert!((p.apply_adjoint(&psi) - e0).norm() < 1e-12);
        }
    }

    #[test]
    fn structured_ops_match_dense() {
        let mut r = rng(2);
        let b1 = random::unitary(&mut r, 3);
        let b2 = random::unitary(&mut r, 2);
        let bd = Operator::BlockDiag(vec![b1, b2]);
        let dg = Operator::Diagonal((0..5).map(|_| random::complex_gaussian(&mut r)).collect());
        let hh = Operator::preparation(&random::state(&mut r, 5));
        let x = random::state(&mut r, 5);
        for op in [&bd, &dg, &hh] {
            let d = op.to_dense();
            assert!((op.apply(&x) - &d * &x).norm() < 1e-12);
            assert!((op.apply_adjoint(&x) - d.adjoint() * &x).norm() < 1e-12);
            for other in [&bd, &dg, &hh] {
                let c = op.compose(other);
                assert!((c.to_dense() - &d * other.to_dense()).norm() < 1e-12);
                let dist = op.distance(other);
                assert!((dist - op_norm(&(&d - other.to_dense()))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn canonical_construction_passes_axioms() {
        let vta = random_vta(&mut rng(3), 3, 2);
        let rep = validate_axioms(&vta);
        assert!(rep.all_pass(), "{:?}", rep.failed());
        assert!((rep.amplitude_chain[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_projections_fail_ordering() {
        let mut vta = random_vta(&mut rng(4), 3, 2);
        vta.projections.swap(1, 2);
        let rep = validate_axioms(&vta);
        let bad = rep.failed();
        assert!(bad.iter().any(|c| c.name == "Π_2Π_1 = Π_1" && c.violation > 0.5));
    }

    #[test]
    fn unitary_not_fixing_stopped_branches_fails() {
        let mut r = rng(5);
        let mut vta = random_vta(&mut r, 3, 2);
        let n = vta.dim();
        vta.stages[2] = Operator::Dense(random::unitary(&mut r, n));
        let rep = validate_axioms(&vta);
        assert!(rep.failed().iter().any(|c| c.name == "A_3Π_2 = Π_2" && c.violation > 1e-3));
    }

    #[test]
    fn trivial_schedule_is_plain_composition() {
        let vta = random_vta(&mut rng(6), 3, 2);
        let out = run_nested(&vta, &AmplificationSchedule::trivial(3), Backend::Matrix, &RunOptions::default()).unwrap();
        assert!((out.state.unwrap() - vta.plain_state()).norm() < 1e-12);
        let sum = vta.stage_costs.iter().fold(vta.prep_cost, |a, &b| a + b);
        assert_eq!(out.ledger.counted, sum);
        assert!(out.ledger.exact());
    }

    #[test]
    fn single_stage_triple_angle() {
        // one stage, amplitude 0.1 on the good part
        let n = 2;
        let a = 0.1f64;
        let psi0 = CVec::from_vec(vec![C64::new(a, 0.0), C64::new((1.0 - a * a).sqrt(), 0.0)]);
        let vta = VariableTimeAlgorithm {
            projections: vec![Operator::zero_projection(n), Operator::Identity(n)],
            flag: Operator::mask([false, true]),
            stages: vec![Operator::Identity(n)],
            psi0,
            stage_costs: vec![QueryCost::new(1, 0)],
            prep_cost: QueryCost::new(0, 1),
        };
        let s = AmplificationSchedule { r: vec![1] };
        for backend in [Backend::Matrix, Backend::Analytic] {
            let out = run_nested(&vta, &s, backend, &RunOptions::default()).unwrap();
            assert!((out.trace.final_amplitude - (3.0 * a - 4.0 * a.powi(3))).abs() < 1e-12);
            assert!((out.trace.final_amplitude - 0.296).abs() < 1e-12);
        }
    }

    #[test]
    fn backends_agree_on_random_instances() {
        for seed in 0..6 {
            let vta = leaky_vta(&mut rng(100 + seed), 2, 2, 0.05);
            let b = vta.plain_amplitudes();
            let t = ThresholdVector { alpha: vec![0.5, 0.5] };
            let m = run_tunable(&vta, &t, Backend::Matrix, &RunOptions::default()).unwrap();
            let a = run_tunable(&vta, &t, Backend::Analytic, &RunOptions::default()).unwrap();
            assert_eq!(m.schedule, a.schedule, "b = {b:?}");
            for (x, y) in m.trace.stages.iter().zip(&a.trace.stages) {
                assert!((x.pre - y.pre).abs() < 1e-9 && (x.post - y.post).abs() < 1e-9);
            }
            assert!(m.ledger.exact());
            assert_eq!(m.ledger.counted, a.ledger.analytic);
        }
    }

    #[test]
    fn transition_preservation_ratios() {
        // ratios ‖Q_h A_h⋯Ã_j ψ0‖ / ‖Q_k A_k⋯Ã_j ψ0‖ do not depend on j
        let vta = leaky_vta(&mut rng(7), 4, 2, 0.2);
        let m = 4;
        let (h, k) = (3, 4);
        let mut ratios = vec![];
        for j in 0..=2 {
            let mut r = vec![0u32; m];
            if j > 0 {
                r[j - 1] = 1;
            }
            let mut trunc = vta.clone();
            trunc.stages.truncate(j);
            trunc.stage_costs.truncate(j);
            trunc.projections.truncate(j + 1);
            let mut v = if j == 0 {
                vta.psi0.clone()
            } else {
                r.truncate(j);
                let s = AmplificationSchedule { r };
                run_nested(&trunc, &s, Backend::Matrix, &RunOptions::default()).unwrap().state.unwrap()
            };
            let mut num = 0.0;
            for t in j + 1..=k {
                v = vta.stages[t - 1].apply(&v);
                if t == h {
                    num = vta.potentially_good(h).apply(&v).norm();
                }
            }
            let den = vta.potentially_good(k).apply(&v).norm();
            ratios.push(num / den);
        }
        for w in ratios.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "{ratios:?}");
        }
    }

    #[test]
    fn step_count_examples() {
        assert_eq!(tunable_step_count(1.0, 0.01).unwrap(), 17);
        assert_eq!(tunable_step_count(0.25, 0.04).unwrap(), 2);
        assert_eq!(tunable_step_count(0.09, 0.2).unwrap(), 0);
        assert_eq!(tunable_step_count(0.09, 0.1).unwrap(), 0);
        assert!(matches!(tunable_step_count(0.5, 0.0), Err(VtaaError::Unreachable { .. })));
        assert_eq!(tunable_step_count(0.0, 0.0).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn step_count_is_minimal(alpha in 0.001f64..1.0, a in 0.0005f64..1.0) {
            let r = tunable_step_count(alpha, a).unwrap();
            let target = alpha.sqrt() / 3.0;
            let mut search = 0u32;
            while ((2 * search + 1) as f64) * a < target * (1.0 - 1e-12) {
                search += 1;
            }
            prop_assert_eq!(r, search);
        }
    }

    #[test]
    fn tunable_zero_thresholds_reduce_to_plain() {
        let vta = random_vta(&mut rng(8), 3, 2);
        let out = run_tunable(&vta, &ThresholdVector::zeros(3), Backend::Matrix, &RunOptions::default()).unwrap();
        assert_eq!(out.schedule, AmplificationSchedule::trivial(3));
        assert!((out.state.unwrap() - vta.plain_state()).norm() < 1e-12);
    }

    #[test]
    fn boundary_amplitude_needs_no_steps() {
        let vta = leaky_vta(&mut rng(9), 2, 2, 0.1);
        let b = vta.plain_amplitudes();
        // α_1 chosen so a_1 sits exactly at √α_1/3
        let t = ThresholdVector { alpha: vec![9.0 * b[1] * b[1], 0.0] };
        let out = run_tunable(&vta, &t, Backend::Matrix, &RunOptions::default()).unwrap();
        assert_eq!(out.schedule.r[0], 0);
    }

    #[test]
    fn optimized_thresholds_respect_loss_bound() {
        for seed in 0..5 {
            let vta = leaky_vta(&mut rng(200 + seed), 2, 2, 0.05);
            let b = vta.plain_amplitudes();
            let (alpha, _) = optimize_thresholds(&[b[0], b[1]], &[1.0, 3.0]).unwrap();
            let t = ThresholdVector { alpha };
            let out = run_tunable(&vta, &t, Backend::Matrix, &RunOptions::default()).unwrap();
            let rep = universality_check(&out.schedule, &out.trace, Some(&t));
            let f = rep.forward.unwrap();
            assert!(f.holds, "{f:?}");
            assert!(out.trace.total_loss() >= (5.0f64 / 6.0).powf(t.sum()) - 1e-12);
        }
    }

    #[test]
    fn reverse_reconstruction() {
        let trace = AmplitudeTrace {
            stages: vec![StageTrace { pre: 0.05, post: (3.0 * 0.05f64.asin()).sin(), loss: 1.0, plain: 0.05 }],
            final_amplitude: 0.0,
            sqrt_p_succ: 0.05,
        };
        let rep = universality_check(&AmplificationSchedule { r: vec![1] }, &trace, None);
        let rev = rep.reverse.unwrap();
        assert!((rev.alpha[0] - 0.2025).abs() < 1e-12);
        assert!(rev.holds);

        let vta = random_vta(&mut rng(10), 2, 2);
        let out = run_nested(&vta, &AmplificationSchedule::trivial(2), Backend::Matrix, &RunOptions::default()).unwrap();
        let rep = universality_check(&out.schedule, &out.trace, Some(&ThresholdVector::zeros(2)));
        assert_eq!(rep.reverse.unwrap().alpha, vec![0.0, 0.0]);
        let f = rep.forward.unwrap();
        assert!((f.loss - 1.0).abs() < 1e-15 && f.holds);
    }

    #[test]
    fn analytic_backend_refuses_overshoot() {
        let vta = random_vta(&mut rng(11), 2, 2);
        let err = run_nested(&vta, &AmplificationSchedule { r: vec![3, 0] }, Backend::Analytic, &RunOptions::default());
        assert!(matches!(err, Err(VtaaError::Overshoot { stage: 1, .. })));
        assert!(run_nested(&vta, &AmplificationSchedule { r: vec![3, 0] }, Backend::Matrix, &RunOptions::default()).is_ok());
    }

    #[test]
    fn dimension_cap() {
        let vta = random_vta(&mut rng(12), 2, 2);
        let opts = RunOptions { dim_cap: 4, ..Default::default() };
        assert!(matches!(
            run_nested(&vta, &AmplificationSchedule::trivial(2), Backend::Matrix, &opts),
            Err(VtaaError::Resource { .. })
        ));
    }

    #[test]
    fn query_product_examples() {
        let vta = leaky_vta(&mut rng(13), 3, 2, 0.05);
        let s = AmplificationSchedule { r: vec![0, 1, 0] };
        let out = run_nested(&vta, &s, Backend::Matrix, &RunOptions::default()).unwrap();
        let (l, r, d) = query_product_identity(&out.trace, &s, 1, 1).unwrap();
        assert_eq!(l, 3.0);
        assert!(d < 1e-10, "{l} {r}");

        let s = AmplificationSchedule { r: vec![1, 1, 1] };
        let out = run_nested(&vta, &s, Backend::Matrix, &RunOptions::default()).unwrap();
        for v in 1..=3 {
            for w in v..=3 {
                assert!(query_product_identity(&out.trace, &s, v, w).unwrap().2 < 1e-9);
            }
        }
        assert!(query_product_identity(&out.trace, &s, 2, 1).is_err());
        let t = AmplificationSchedule::trivial(3);
        let out = run_nested(&vta, &t, Backend::Matrix, &RunOptions::default()).unwrap();
        assert_eq!(query_product_identity(&out.trace, &t, 1, 1).unwrap(), (1.0, 1.0, 0.0));
    }

    #[test]
    fn optimizer_examples() {
        let (a, obj) = optimize_thresholds(&[0.5, 0.25], &[1.0, 4.0]).unwrap();
        assert!((a[0] - 0.3865).abs() < 1e-4 && (a[1] - 0.6135).abs() < 1e-4);
        assert!((obj - 2.0809).abs() < 1e-3);
        assert!((threshold_objective(&[0.5, 0.25], &[1.0, 4.0], &a) - obj).abs() < 1e-12);
        let (a, _) = optimize_thresholds(&[0.5, 0.25, 1.0], &[2.0, 4.0, 1.0]).unwrap();
        for x in a {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let (a, obj) = optimize_thresholds(&[0.3], &[2.0]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert!((obj - 0.6).abs() < 1e-12);
        assert!(optimize_thresholds(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn premerge_examples() {
        let vta = leaky_vta(&mut rng(14), 4, 2, 0.3);
        let same = premerge(&vta, 4).unwrap();
        assert_eq!(same.m(), 4);
        let one = premerge(&vta, 0).unwrap();
        assert_eq!(one.m(), 1);
        let sum = vta.stage_costs.iter().fold(QueryCost::default(), |a, &b| a + b);
        assert_eq!(one.stage_costs[0], sum);
        assert!(validate_axioms(&one).all_pass());

        let merged = premerge(&vta, 2).unwrap();
        assert!(validate_axioms(&merged).all_pass());
        let full = run_nested(&vta, &AmplificationSchedule { r: vec![0, 0, 1, 1] }, Backend::Matrix, &RunOptions::default()).unwrap();
        let part = run_nested(&merged, &AmplificationSchedule { r: vec![0, 1, 1] }, Backend::Matrix, &RunOptions::default()).unwrap();
        assert!((full.state.unwrap() - part.state.unwrap()).norm() < 1e-10);
        assert_eq!(full.ledger.counted, part.ledger.counted);
        assert!(premerge(&vta, 5).is_err());
    }

    #[test]
    fn cost_examples() {
        let costs = [QueryCost::new(2, 0), QueryCost::new(3, 0)];
        let prep = QueryCost::new(1, 0);
        let t = cost_totals(&AmplificationSchedule { r: vec![0, 0] }, &costs, prep);
        assert_eq!(t.total.oracle_a, 6);
        let t = cost_totals(&AmplificationSchedule { r: vec![1, 0] }, &costs, prep);
        assert_eq!(t.total.oracle_a, 12);
        assert_eq!(t.merged_total, t.total);
        let t = cost_totals(&AmplificationSchedule { r: vec![0, 0, 1, 1] }, &[QueryCost::new(1, 0); 4], QueryCost::new(0, 1));
        assert_eq!(t.prep_factor, 9);
        assert_eq!(t.total.oracle_b, 9);
        assert_eq!(t.merged_total, t.total);
    }

    proptest! {
        #[test]
        fn ledger_is_exact(seed in 0u64..1000, r1 in 0u32..3, r2 in 0u32..3, r3 in 0u32..2) {
            let vta = random_vta(&mut rng(seed), 3, 1);
            let s = AmplificationSchedule { r: vec![r1, r2, r3] };
            let out = run_nested(&vta, &s, Backend::Matrix, &RunOptions::default()).unwrap();
            prop_assert_eq!(out.ledger.counted, out.ledger.analytic);
            let merged = cost_totals(&s, &vta.stage_costs, vta.prep_cost).merged_total;
            prop_assert_eq!(merged, out.ledger.analytic);
        }

        #[test]
        fn two_thirds_beats_scaled_l1(b in prop::collection::vec(0.01f64..1.0, 1..6), seed in 0u64..1000) {
            let mut r = rng(seed);
            let c: Vec<f64> = b.iter().map(|_| r.random_range(0.1..10.0)).collect();
            let (_, obj) = optimize_thresholds(&b, &c).unwrap();
            let l1: f64 = b.iter().zip(&c).map(|(x, y)| x * y).sum();
            prop_assert!(obj <= (b.len() as f64).sqrt() * l1 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn optimizer_matches_grid_search() {
        let b = [0.4, 0.1, 0.7];
        let c = [2.0, 5.0, 1.0];
        let (_, obj) = optimize_thresholds(&b, &c).unwrap();
        let mut best = f64::INFINITY;
        let n = 400;
        for i in 1..n {
            for j in 1..n - i {
                let a = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                best = best.min(threshold_objective(&b, &c, &a));
            }
        }
        assert!(obj <= best + 1e-12);
        assert!(best - obj < 1e-3 * obj);
    }

    fn random_projection(r: &mut ChaCha8Rng, n: usize, rank: usize) -> CMat {
        let u = random::unitary(r, n);
        let v = u.columns(0, rank).into_owned();
        &v * v.adjoint()
    }

    #[test]
    fn ordered_projection_characterizations() {
        let mut r = rng(15);
        let n = 6;
        let u = random::unitary(&mut r, n);
        let p1 = {
            let v = u.columns(0, 2).into_owned();
            &v * v.adjoint()
        };
        let p2 = {
            let v = u.columns(0, 4).into_owned();
            &v * v.adjoint()
        };
        let is_proj = |m: &CMat| crate::numerics::is_projection(m, 1e-10);
        for (a, b, ordered) in [(&p1, &p2, true), (&p2, &p1, false)] {
            let lhs = (b * a - a).norm() < 1e-10;
            let mid = (a * b * a - a).norm() < 1e-10;
            let diff = is_proj(&(b - a));
            assert_eq!((lhs, mid, diff), (ordered, ordered, ordered));
        }
        let q = random_projection(&mut r, n, 3);
        let lhs = (&q * &p1 - &p1).norm() < 1e-10;
        assert_eq!(lhs, (&p1 * &q * &p1 - &p1).norm() < 1e-10);
        assert_eq!(lhs, is_proj(&(&q - &p1)));
    }

    #[test]
    fn controlled_unitary_characterization() {
        let mut r = rng(16);
        let n = 6;
        let p = Operator::mask((0..n).map(|i| i < 2)).to_dense();
        let id = CMat::identity(n, n);
        let comp = &id - &p;
        let mut fixed = CMat::identity(n, n);
        fixed.view_mut((2, 2), (4, 4)).copy_from(&random::unitary(&mut r, 4));
        let generic = random::unitary(&mut r, n);
        for (u, expect) in [(&fixed, true), (&generic, false)] {
            let a = (u * &p - &p).norm() < 1e-10;
            let b = (u - (&p + &comp * u * &comp)).norm() < 1e-10;
            assert_eq!((a, b), (expect, expect));
        }
    }

    use rand::Rng;
}
