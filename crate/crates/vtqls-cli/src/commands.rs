//! Subcommand drivers. Each writes `<out>/<command>.json` and `<out>/<command>.csv`.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use vtqls::dinv::fixtures::random_instance;
use vtqls::dinv::{
    analyze, build_inverter_vta, check_multiplicative_bounds, estimate_solution_norm, grover_fixture, plan_depth,
    plan_for_depth, prepare_dinv, qsvt_aa_baseline, solve_qls, DinvError, DinvSpec, EstimationConfig, InstanceJson,
    Setup, GROVER_EPS,
};
use vtqls::encodings::dirichlet_ratio;
use vtqls::numerics::{random, re, CMat};
use vtqls::precond::{
    build_padded_system, build_taylor_system, check_poly_bounds, nonnormal_instance, precondition_application,
    qsvt_inverse_apply, run_ode, run_qeve, run_qevt_block, run_ground_state, self_preconditioned_solve, AppSystem,
    Polynomial, PrecondError, DIM_CAP,
};
use vtqls::vtaa::fixtures::{leaky_vta, random_vta};
use vtqls::vtaa::{
    run_nested, run_tunable, universality_check, Backend, RunOptions, ThresholdVector,
    VtaaError,
};

use crate::config::{generate_instance, sweep_instance, ExperimentConfig, SpectrumLaw};
use crate::{BackendArg, CliError};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub backend: Option<BackendArg>,
}

#[derive(Serialize)]
struct Envelope<'a, R> {
    command: &'a str,
    config_hash: String,
    seed: Option<u64>,
    config: &'a ExperimentConfig,
    report: &'a R,
}

impl Context {
    fn hash(&self) -> String {
        self.cfg.hash()
    }

    fn emit<R: Serialize, C: Serialize>(&self, name: &str, report: &R, rows: &[C]) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        let env = Envelope { command: name, config_hash: self.hash(), seed: self.cfg.seed, config: &self.cfg, report };
        let json = self.out.join(format!("{name}.json"));
        fs::write(&json, serde_json::to_string_pretty(&env)?)?;
        let mut w = csv::Writer::from_path(self.out.join(format!("{name}.csv")))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        println!("{name}: wrote {}", json.display());
        Ok(())
    }
}

fn analyzed(inst: &vtqls::dinv::LinearSystemInstance) -> Result<Setup, CliError> {
    analyze(inst).map_err(|e| match e {
        DinvError::Parameter(m) | DinvError::Degenerate(m) => CliError::Config(m),
        e => e.into(),
    })
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let inst = generate_instance(&ctx.cfg)?;
    let json = InstanceJson::from(&inst);
    #[derive(Serialize)]
    struct Row {
        config_hash: String,
        seed: Option<u64>,
        dim: usize,
        b_norm: f64,
    }
    let row = Row { config_hash: ctx.hash(), seed: ctx.cfg.seed, dim: inst.b.len(), b_norm: inst.b.norm() };
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("instance.json"), serde_json::to_string_pretty(&json)?)?;
    ctx.emit("generate", &json, &[row])
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    status: String,
    backend: BackendArg,
    d: usize,
    m: usize,
    kappa: f64,
    p_succ: f64,
    l: Option<usize>,
    schedule: Vec<u32>,
    realized: Option<Vec<u64>>,
    final_amplitude: Option<f64>,
    amplitude_floor: f64,
    fidelity: Option<f64>,
    marked_probability: Option<f64>,
    dinv_o_a: Option<u64>,
    dinv_o_b: Option<u64>,
    ledger_exact: Option<bool>,
    total_o_a: Option<u64>,
    total_o_b: Option<u64>,
}

#[derive(Serialize)]
struct SolveRow {
    config_hash: String,
    seed: Option<u64>,
    backend: String,
    status: String,
    d: usize,
    m: usize,
    l: Option<usize>,
    fidelity: Option<f64>,
    marked_probability: Option<f64>,
    total_o_a: Option<u64>,
    total_o_b: Option<u64>,
}

pub fn solve(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let inst = generate_instance(cfg)?;
    let setup = analyzed(&inst)?;
    let spec = cfg.params.dinv_spec();
    let backend = ctx.backend.unwrap_or(BackendArg::Matrix);
    let marked = (cfg.instance.law == SpectrumLaw::Grover).then_some(cfg.grover.marked);
    let floor = 5f64.sqrt() / (9.0 * spec.c);
    let mut s = SolveSummary {
        status: "ok".into(),
        backend,
        d: setup.d(),
        m: setup.m,
        kappa: setup.alpha_a * setup.alpha_ainv,
        p_succ: setup.p_succ(),
        l: None,
        schedule: vec![],
        realized: None,
        final_amplitude: None,
        amplitude_floor: floor,
        fidelity: None,
        marked_probability: None,
        dinv_o_a: None,
        dinv_o_b: None,
        ledger_exact: None,
        total_o_a: None,
        total_o_b: None,
    };
    let mut failures = Vec::new();
    match backend {
        BackendArg::Matrix => {
            let estimate = match cfg.params.estimate_scale {
                None => None,
                Some(scale) => {
                    let exact = prepare_dinv(&setup, &spec, None)?;
                    Some(exact.inverter.vta.plain_amplitudes()[setup.m] * scale)
                }
            };
            match solve_qls(&setup, &spec, estimate) {
                Err(DinvError::ScheduleViolation { planned, realized }) => {
                    s.status = "schedule-violation".into();
                    s.schedule = planned.clone();
                    s.realized = Some(realized.iter().map(|&r| r as u64).collect());
                    failures.push(format!("deterministic schedule violated: planned {planned:?}, realized {realized:?}"));
                }
                Err(e) => return Err(e.into()),
                Ok(rep) => {
                    s.l = Some(rep.dinv.l);
                    s.schedule = rep.dinv.plan.schedule.r.clone();
                    s.final_amplitude = Some(rep.dinv.final_amplitude);
                    s.fidelity = Some(rep.fidelity);
                    s.marked_probability = marked.map(|w| rep.x[w].norm_sqr());
                    s.dinv_o_a = Some(rep.dinv.ledger.counted.oracle_a);
                    s.dinv_o_b = Some(rep.dinv.ledger.counted.oracle_b);
                    s.ledger_exact = Some(rep.dinv.ledger.exact());
                    s.total_o_a = Some(rep.total.oracle_a);
                    s.total_o_b = Some(rep.total.oracle_b);
                    if !rep.dinv.amplitude_ok() {
                        failures.push(format!("final amplitude {} below {floor}", rep.dinv.final_amplitude));
                    }
                    if !rep.dinv.ledger.exact() {
                        failures.push("instrumented ledger differs from the analytic one".into());
                    }
                }
            }
        }
        BackendArg::Analytic => {
            let inv0 = build_inverter_vta(&setup, &spec, 0)?;
            let sqrt_p = inv0.vta.plain_amplitudes()[setup.m] * cfg.params.estimate_scale.unwrap_or(1.0);
            let l = plan_depth(spec.c, sqrt_p)?;
            let inv = build_inverter_vta(&setup, &spec, l)?;
            let plan = plan_for_depth(&inv.vta, spec.c, l)?;
            let out = run_nested(&inv.vta, &plan.schedule, Backend::Analytic, &RunOptions::default())
                .map_err(DinvError::from)?;
            s.l = Some(l);
            s.schedule = plan.schedule.r.clone();
            s.final_amplitude = Some(out.trace.final_amplitude);
            s.dinv_o_a = Some(out.ledger.counted.oracle_a);
            s.dinv_o_b = Some(out.ledger.counted.oracle_b);
            s.ledger_exact = Some(out.ledger.exact());
            if out.trace.final_amplitude < floor {
                failures.push(format!("final amplitude {} below {floor}", out.trace.final_amplitude));
            }
        }
        BackendArg::Spectral => {
            let base = qsvt_aa_baseline(&setup, cfg.params.eps)?;
            let kappa = setup.alpha_a * setup.alpha_ainv;
            let x = qsvt_inverse_apply(&inst.a, setup.alpha_a, kappa, cfg.params.eps / 4.0, &inst.b)?;
            let x = x.unscale(x.norm());
            s.fidelity = Some(setup.solution().dotc(&x).norm_sqr());
            s.marked_probability = marked.map(|w| x[w].norm_sqr());
            s.total_o_a = Some(base.cost.oracle_a);
            s.total_o_b = Some(base.cost.oracle_b);
        }
    }
    if let Some(f) = s.fidelity {
        if f < 1.0 - cfg.params.eps {
            failures.push(format!("fidelity {f} below 1 − ε"));
        }
    }
    if let Some(p) = s.marked_probability {
        if p <= 0.504 {
            failures.push(format!("marked-outcome probability {p} ≤ 0.504"));
        }
    }
    if !failures.is_empty() && s.status == "ok" {
        s.status = "bound-failure".into();
    }
    let row = SolveRow {
        config_hash: ctx.hash(),
        seed: cfg.seed,
        backend: format!("{backend:?}").to_lowercase(),
        status: s.status.clone(),
        d: s.d,
        m: s.m,
        l: s.l,
        fidelity: s.fidelity,
        marked_probability: s.marked_probability,
        total_o_a: s.total_o_a,
        total_o_b: s.total_o_b,
    };
    ctx.emit("solve", &s, &[row])?;
    fail_on(failures)
}

fn fail_on(failures: Vec<String>) -> Result<(), CliError> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Bound(failures.join("; ")))
    }
}

pub fn solve_precond(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let inst = generate_instance(cfg)?;
    let norm = inst.direct_solution()?.norm();
    let t = norm * cfg.params.estimate_scale.unwrap_or(1.0);
    #[derive(Serialize)]
    struct Row {
        config_hash: String,
        seed: Option<u64>,
        status: String,
        t: f64,
        solution_norm: f64,
        amplitude: Option<f64>,
        inverse_norm_ratio: Option<f64>,
        fidelity: Option<f64>,
        o_a: Option<u64>,
        o_b: Option<u64>,
    }
    let mut row = Row {
        config_hash: ctx.hash(),
        seed: cfg.seed,
        status: "ok".into(),
        t,
        solution_norm: norm,
        amplitude: None,
        inverse_norm_ratio: None,
        fidelity: None,
        o_a: None,
        o_b: None,
    };
    match self_preconditioned_solve(&inst, t, cfg.params.eps) {
        Err(PrecondError::PreconditionFailure(msg)) => {
            row.status = "precondition-failure".into();
            ctx.emit("solve-precond", &serde_json::json!({ "status": row.status, "error": msg }), &[row])?;
            Err(CliError::Bound(msg))
        }
        Err(e) => Err(e.into()),
        Ok((_, rep)) => {
            let mut failures = Vec::new();
            if !rep.guarantees_hold() {
                failures.push("norm or amplitude guarantee violated".to_string());
            }
            if rep.fidelity < 1.0 - cfg.params.eps {
                failures.push(format!("fidelity {} below 1 − ε", rep.fidelity));
            }
            if rep.invariance_error > 1e-10 {
                failures.push(format!("preconditioned solution differs by {}", rep.invariance_error));
            }
            row.amplitude = Some(rep.amplitude);
            row.inverse_norm_ratio = Some(rep.inverse_norm / rep.inverse_norm_bound);
            row.fidelity = Some(rep.fidelity);
            row.o_a = Some(rep.ledger.oracle_a);
            row.o_b = Some(rep.ledger.oracle_b);
            if !failures.is_empty() {
                row.status = "bound-failure".into();
            }
            ctx.emit("solve-precond", &rep, &[row])?;
            fail_on(failures)
        }
    }
}

pub fn estimate_norm(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let setup = analyzed(&generate_instance(cfg)?)?;
    let spec = cfg.params.dinv_spec();
    let amp0 = build_inverter_vta(&setup, &spec, 0)?.vta.plain_amplitudes()[setup.m];
    let alpha_p = cfg.params.alpha_p.unwrap_or((amp0 * amp0 / 4.0).min(1.0));
    let est_cfg = EstimationConfig { mode: cfg.params.estimation.into(), ..Default::default() };
    let seed = match est_cfg.mode {
        vtqls::dinv::EstimationMode::Stochastic => cfg.require_seed()?,
        vtqls::dinv::EstimationMode::ExactAmplitude => cfg.seed.unwrap_or(0),
    };
    let est = estimate_solution_norm(&setup, &spec, alpha_p, &est_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let truth = build_inverter_vta(&setup, &spec, est.l)?.vta.plain_amplitudes()[setup.m];
    let ratio = est.sqrt_p / truth;
    // the stopping argument needs log₃(2/(√5c√p)) ≥ 0
    let in_regime = truth <= 2.0 / (5f64.sqrt() * spec.c);
    let holds = (1.0 / 3.0..=3.0).contains(&ratio);
    #[derive(Serialize)]
    struct Row {
        config_hash: String,
        seed: Option<u64>,
        l: usize,
        sqrt_p_estimate: f64,
        sqrt_p_true: f64,
        ratio: f64,
        in_regime: bool,
        solution_norm_estimate: f64,
        solution_norm_true: f64,
        alpha_p: f64,
        o_b: u64,
    }
    let row = Row {
        config_hash: ctx.hash(),
        seed: cfg.seed,
        l: est.l,
        sqrt_p_estimate: est.sqrt_p,
        sqrt_p_true: truth,
        ratio,
        in_regime,
        solution_norm_estimate: est.solution_norm,
        solution_norm_true: setup.solution_norm(),
        alpha_p,
        o_b: est.ledger.oracle_b,
    };
    ctx.emit("estimate-norm", &est, &[row])?;
    if in_regime && !holds {
        return Err(CliError::Bound(format!("estimate off by a factor {ratio}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BoundRow {
    config_hash: String,
    seed: Option<u64>,
    suite: String,
    case: String,
    holds: bool,
    value: f64,
    bound: f64,
}

pub fn bounds(ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.cfg.seed.unwrap_or(0);
    let hash = ctx.hash();
    let row = |suite: &str, case: String, holds: bool, value: f64, bound: f64| BoundRow {
        config_hash: hash.clone(),
        seed: ctx.cfg.seed,
        suite: suite.into(),
        case,
        holds,
        value,
        bound,
    };
    let mut rows = Vec::new();

    for rho in (3..=101u32).step_by(2) {
        let top = FRAC_PI_2 / rho as f64;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..=10_000 {
            let v = dirichlet_ratio(rho, top * i as f64 / 10_000.0)?;
            worst = worst.max((v.lower - v.ratio).max(v.ratio - v.upper));
        }
        rows.push(row("dirichlet", format!("rho={rho}"), worst <= 1e-12, worst, 1e-12));
    }

    let spec = ctx.cfg.params.dinv_spec();
    let n = ctx.cfg.suite.instances;
    let chain_rows: Vec<Vec<BoundRow>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<BoundRow>, CliError> {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let d = r.random_range(2..=4);
            let kappa = 3f64.powf(r.random_range(1.0..4.0));
            let setup = analyzed(&random_instance(&mut r, d, kappa))?;
            let run = prepare_dinv(&setup, &spec, None)?;
            let mut out = Vec::new();
            for l in 1..=run.l.max(1).min(setup.m) {
                let rep = check_multiplicative_bounds(&setup, &spec, l)?;
                for c in &rep.chains {
                    out.push(row("chains", format!("instance={i} l={l} {}", c.name), c.holds, c.value, c.upper));
                }
                out.push(row("leakage", format!("instance={i} l={l}"), rep.leakage_holds, 0.0, 0.0));
            }
            let u = universality_check(&run.plan.schedule, &run.trace, Some(&run.plan.thresholds));
            let f = u.forward.expect("plans have thresholds in [0, 1]");
            out.push(row("universality", format!("dinv instance={i}"), f.holds, f.loss, f.loss_bound));
            out.push(row(
                "schedule",
                format!("dinv instance={i}"),
                run.amplitude_ok() && run.ledger.counted.oracle_b == 3u64.pow(run.l as u32),
                run.final_amplitude,
                run.amplitude_floor,
            ));
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    rows.extend(chain_rows.into_iter().flatten());

    let opts = RunOptions::default();
    for i in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + i));
        let m = r.random_range(2..=5);
        let keep = r.random_range(0.05..0.5);
        let vta = if i % 2 == 0 { random_vta(&mut r, m, 2) } else { leaky_vta(&mut r, m, 2, keep) };
        let thr = ThresholdVector { alpha: vec![1.0 / m as f64; m] };
        let out = run_tunable(&vta, &thr, Backend::Matrix, &opts)?;
        let u = universality_check(&out.schedule, &out.trace, Some(&thr));
        let f = u.forward.expect("uniform thresholds are valid");
        rows.push(row("universality", format!("fixture={i} forward"), f.holds, f.loss, f.loss_bound));
        if let Some(rv) = u.reverse {
            rows.push(row("universality", format!("fixture={i} reverse"), rv.holds, rv.max_alpha, 1.0));
        }
        let analytic = run_nested(&vta, &out.schedule, Backend::Analytic, &opts);
        match analytic {
            Ok(a) => {
                let diff = out
                    .trace
                    .stages
                    .iter()
                    .zip(&a.trace.stages)
                    .map(|(x, y)| (x.pre - y.pre).abs().max((x.post - y.post).abs()))
                    .fold((out.trace.final_amplitude - a.trace.final_amplitude).abs(), f64::max);
                rows.push(row("backends", format!("fixture={i}"), diff <= 1e-9, diff, 1e-9));
            }
            Err(VtaaError::Overshoot { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200));
    for i in 0..20 {
        let n = r.random_range(2..=40);
        let deg = r.random_range(0..n);
        let coeffs: Vec<f64> = (0..=deg).map(|_| r.random_range(-1.0..1.0)).collect();
        let rep = check_poly_bounds(&Polynomial::Chebyshev(coeffs), n, 4001)?;
        rows.push(row("poly-lemma", format!("poly={i} n={n}"), rep.lemma_holds, rep.p_max, rep.lemma_rhs));
        let cap = 2.0 * n as f64 / 3.0 + 1.0;
        rows.push(row("u-sum", format!("poly={i} n={n}"), rep.u_sum_bound_holds, rep.u_sum_max, cap));
    }
    for i in 0..6 {
        let d = r.random_range(2..=4);
        let eig: Vec<f64> = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
        let kappa_s = r.random_range(1.0..4.0);
        let inst = nonnormal_instance(&mut r, &eig, kappa_s);
        let alpha = inst.alpha()?;
        let m = inst.matrix()? / re(alpha);
        let pad = build_padded_system(&m, 12, 1, DIM_CAP)?;
        let err = pad.inverse_structure_error(&m);
        rows.push(row("pad-inverse", format!("instance={i}"), err <= 1e-9, err, 1e-9));
        let norm = pad.matrix.norm();
        rows.push(row("pad-norm", format!("instance={i}"), norm <= 4.0, norm, 4.0));
        let coeffs: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let psi = random::state(&mut r, d);
        let (_, rep) = precondition_application(&AppSystem::PaddedQevt { m, poly: Polynomial::Chebyshev(coeffs), psi }, DIM_CAP)?;
        rows.push(row("inflation", format!("instance={i}"), rep.inflation_holds, rep.inverse_norm_precond, rep.inflation_bound));
        rows.push(row("boost", format!("instance={i}"), rep.boost_exact, rep.boost, 1.0 / rep.s));
    }
    for nn in 1..=4 {
        for k in 1..=4 {
            let m: CMat = random::hermitian(&mut r, 3) * re(0.3);
            let b = random::state(&mut r, 3);
            let t = build_taylor_system(&m, nn, k, 3, DIM_CAP)?;
            let x = t.matrix.solve(&t.initial_state(&b));
            let want = &vtqls::precond::taylor_stepping_oracle(&m, &b, nn, k)[nn];
            let err = t.success_blocks().map(|i| (x.rows(i * 3, 3) - want).norm()).fold(0.0, f64::max);
            rows.push(row("taylor", format!("n={nn} k={k}"), err <= 1e-8, err, 1e-8));
        }
    }

    let failed: Vec<String> = rows.iter().filter(|r| !r.holds).map(|r| format!("{} {}", r.suite, r.case)).collect();
    #[derive(Serialize)]
    struct Summary {
        checks: usize,
        failed: Vec<String>,
    }
    ctx.emit("bounds", &Summary { checks: rows.len(), failed: failed.clone() }, &rows)?;
    println!("bounds: {} checks, {} failed", rows.len(), failed.len());
    fail_on(failed)
}

#[derive(Serialize)]
struct AppRow {
    config_hash: String,
    seed: Option<u64>,
    app: String,
    value: f64,
    tolerance: f64,
    holds: bool,
    o_a: Option<u64>,
    o_b: Option<u64>,
    o_b_unpreconditioned: Option<u64>,
}

pub fn apps(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let backend = ctx.backend.unwrap_or(BackendArg::Spectral);
    if backend == BackendArg::Analytic {
        return Err(CliError::Config("the application pipelines run on the spectral or matrix backend".into()));
    }
    let seed = cfg.require_seed()?;
    let a = &cfg.apps;
    if !(a.eps > 0.0 && a.eps < 1.0) || !(a.t > 0.0) || !(a.delta > 0.0) || a.dim < 2 || a.dim > 16 {
        return Err(CliError::Config("apps needs 0 < eps < 1, t > 0, delta > 0 and 2 ≤ dim ≤ 16".into()));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = a.dim;
    let ks = cfg.instance.kappa_s;
    let hash = ctx.hash();
    let mk = |app: &str, value: f64, tolerance: f64, holds: bool, led: Option<(u64, u64, u64)>| AppRow {
        config_hash: hash.clone(),
        seed: cfg.seed,
        app: app.into(),
        value,
        tolerance,
        holds,
        o_a: led.map(|l| l.0),
        o_b: led.map(|l| l.1),
        o_b_unpreconditioned: led.map(|l| l.2),
    };
    let mut rows = Vec::new();
    let mut reports = serde_json::Map::new();

    let eig: Vec<f64> = (0..d).map(|i| -(0.5 * 4f64.powf(i as f64 / (d - 1) as f64))).collect();
    let ode = nonnormal_instance(&mut r, &eig, ks);
    let am = ode.matrix()?;
    let b = random::state(&mut r, d);
    let (_, rep) = run_ode(&am, &b, a.t, a.eps, a.tau_grid)?;
    rows.push(mk(
        "ode",
        rep.error,
        a.eps,
        rep.error <= a.eps,
        Some((rep.ledger.cost.oracle_a, rep.ledger.cost.oracle_b, rep.ledger_plain.cost.oracle_b)),
    ));
    if backend == BackendArg::Matrix {
        let m = &am * re(a.t / rep.n as f64);
        let sys = build_taylor_system(&m, rep.n, rep.k, rep.p, DIM_CAP)?;
        let rhs = sys.initial_state(&b);
        let dense = sys.matrix.matrix().lu().solve(&rhs).ok_or(PrecondError::Singular)?;
        let diff = (dense - sys.matrix.solve(&rhs)).norm();
        rows.push(mk("ode-dense-check", diff, 1e-9, diff <= 1e-9, None));
    }
    reports.insert("ode".into(), serde_json::to_value(&rep)?);

    let mut eig: Vec<f64> = (0..d).map(|i| -0.4 + 0.8 * (i as f64 + r.random_range(0.2..0.8)) / d as f64).collect();
    eig.rotate_left(d / 2);
    let qe = nonnormal_instance(&mut r, &eig, ks);
    let (lam, rep) = run_qeve(&qe, &qe.eigenvector(0), a.eps)?;
    let err = (lam - eig[0]).abs();
    rows.push(mk(
        "qeve",
        err,
        a.eps,
        err <= a.eps,
        Some((rep.ledger.cost.oracle_a, rep.ledger.cost.oracle_b, rep.ledger.cost.oracle_b)),
    ));
    reports.insert("qeve".into(), serde_json::to_value(&rep)?);

    let mut eig = vec![-a.delta / 2.0 - r.random_range(0.0..0.2)];
    eig.extend((1..d).map(|_| a.delta / 2.0 + r.random_range(0.0..0.3)));
    let gs = nonnormal_instance(&mut r, &eig, ks);
    let psi = random::state(&mut r, d);
    let (_, rep) = run_ground_state(&gs, &psi, a.delta, a.eps)?;
    rows.push(mk(
        "ground-state",
        1.0 - rep.fidelity,
        a.eps,
        rep.fidelity >= 1.0 - a.eps,
        Some((rep.qevt.ledger.cost.oracle_a, rep.qevt.ledger.cost.oracle_b, rep.qevt.ledger_plain.cost.oracle_b)),
    ));
    reports.insert("ground_state".into(), serde_json::to_value(&rep)?);

    let coeffs: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, rep) = run_qevt_block(&gs, &Polynomial::Chebyshev(coeffs))?;
    rows.push(mk("qevt-block", rep.block_error, 1e-8, rep.block_error <= 1e-8, None));
    reports.insert("qevt_block".into(), serde_json::to_value(&rep)?);

    let failed: Vec<String> = rows.iter().filter(|r| !r.holds).map(|r| r.app.clone()).collect();
    ctx.emit("apps", &reports, &rows)?;
    fail_on(failed)
}

pub fn grover_lb(ctx: &Context) -> Result<(), CliError> {
    let g = &ctx.cfg.grover;
    let (inst, exp) = grover_fixture(g.dim, g.marked).map_err(|e| CliError::Config(e.to_string()))?;
    let computed = inst.direct_solution()?.norm();
    let spec = DinvSpec {
        c: ctx.cfg.params.c,
        eps_gpe: GROVER_EPS / 4.0,
        eps_bm: GROVER_EPS / 16.0,
        eps_blk: GROVER_EPS,
        mode: ctx.cfg.params.mode.into(),
        ..Default::default()
    };
    let rep = solve_qls(&analyzed(&inst)?, &spec, None)?;
    let p = rep.x[g.marked].norm_sqr();
    #[derive(Serialize)]
    struct Row {
        config_hash: String,
        seed: Option<u64>,
        d: usize,
        solution_norm: f64,
        expected_norm: f64,
        marked_probability: f64,
        exact_probability: f64,
        floor: f64,
        o_b: u64,
        sqrt_d: f64,
    }
    let row = Row {
        config_hash: ctx.hash(),
        seed: ctx.cfg.seed,
        d: g.dim,
        solution_norm: computed,
        expected_norm: exp.solution_norm,
        marked_probability: p,
        exact_probability: exp.outcome_probability,
        floor: exp.floor,
        o_b: rep.total.oracle_b,
        sqrt_d: (g.dim as f64).sqrt(),
    };
    ctx.emit("grover-lb", &exp, &[row])?;
    let mut failures = Vec::new();
    if (computed - exp.solution_norm).abs() > 1e-9 {
        failures.push(format!("‖A⁻¹b‖ = {computed}, expected {}", exp.solution_norm));
    }
    if p <= 0.504 {
        failures.push(format!("marked-outcome probability {p} ≤ 0.504"));
    }
    fail_on(failures)
}

#[derive(Debug, Clone, Serialize)]
struct CostRow {
    config_hash: String,
    seed: Option<u64>,
    kappa: f64,
    weight: f64,
    eps: f64,
    p_succ: f64,
    l: usize,
    qsvt_aa_o_a: u64,
    qsvt_aa_o_b: u64,
    vtaa_o_a: u64,
    vtaa_o_b: u64,
    precond_o_a: u64,
    precond_o_b: u64,
    model_hhl_o_a: f64,
    model_hhl_o_b: f64,
    model_walk_lcu_o_a: f64,
    model_walk_lcu_o_b: f64,
    model_gpe_vtaa_o_a: f64,
    model_gpe_vtaa_o_b: f64,
    model_adiabatic_o_a: f64,
    model_adiabatic_o_b: f64,
}

pub fn compare_costs(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let seed = cfg.seed.unwrap_or(0);
    let sw = &cfg.sweep;
    let cells: Vec<(usize, f64, f64, f64)> = sw
        .kappas
        .iter()
        .flat_map(|&k| sw.weights.iter().flat_map(move |&w| sw.eps.iter().map(move |&e| (k, w, e))))
        .enumerate()
        .map(|(i, (k, w, e))| (i, k, w, e))
        .collect();
    let hash = ctx.hash();
    let rows: Vec<CostRow> = cells
        .par_iter()
        .map(|&(i, kappa, w, eps)| -> Result<CostRow, CliError> {
            // each cell owns its random stream
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let inst = sweep_instance(&mut rng, kappa, w);
            let setup = analyzed(&inst)?;
            let spec = DinvSpec { c: cfg.params.c, eps_gpe: eps, eps_bm: eps / 10.0, eps_blk: eps, mode: cfg.params.mode.into(), ..Default::default() };
            let a = qsvt_aa_baseline(&setup, eps)?;
            let b = solve_qls(&setup, &spec, None)?;
            let t = inst.direct_solution()?.norm();
            let (_, c) = self_preconditioned_solve(&inst, t, eps)?;
            let p = setup.p_succ();
            let sp = p.sqrt();
            let k = setup.alpha_a * setup.alpha_ainv;
            let lg = |x: f64| x.ln().max(1.0);
            Ok(CostRow {
                config_hash: hash.clone(),
                seed: cfg.seed,
                kappa,
                weight: w,
                eps,
                p_succ: p,
                l: b.dinv.l,
                qsvt_aa_o_a: a.cost.oracle_a,
                qsvt_aa_o_b: a.cost.oracle_b,
                vtaa_o_a: b.total.oracle_a,
                vtaa_o_b: b.total.oracle_b,
                precond_o_a: c.ledger.oracle_a,
                precond_o_b: c.ledger.oracle_b,
                model_hhl_o_a: k / (sp * eps * eps),
                model_hhl_o_b: 1.0 / sp,
                model_walk_lcu_o_a: k / sp * lg(k / eps),
                model_walk_lcu_o_b: lg(k / eps) / sp,
                model_gpe_vtaa_o_a: k * lg(k) * lg(k / eps),
                model_gpe_vtaa_o_b: lg(k) / sp,
                model_adiabatic_o_a: k * lg(1.0 / eps),
                model_adiabatic_o_b: k * lg(1.0 / eps),
            })
        })
        .collect::<Result<_, _>>()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        cells: usize,
        rows: &'a [CostRow],
    }
    ctx.emit("compare-costs", &Summary { cells: rows.len(), rows: &rows }, &rows)
}
