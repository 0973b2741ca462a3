//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::f64::consts::FRAC_PI_2;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vtqls::dinv::fixtures::{log_uniform_spectrum, random_instance};
use vtqls::dinv::{
    analyze, build_inverter_vta, check_multiplicative_bounds, estimate_solution_norm, grover_fixture, plan_depth,
    prepare_dinv, solve_qls, DinvSpec, EstimationConfig, EstimationMode, LinearSystemInstance, Mode, Setup, GROVER_EPS,
};
use vtqls::encodings::dirichlet_ratio;
use vtqls::numerics::{random, re, spectral_decompose, CMat, CVec, C64, TAU_SPEC};
use vtqls::precond::{
    build_padded_system, build_taylor_system, check_poly_bounds, nonnormal_instance, self_preconditioned_solve,
    taylor_stepping_oracle, Polynomial, DIM_CAP,
};
use vtqls::vtaa::fixtures::{leaky_vta, random_vta};
use vtqls::vtaa::{
    optimize_thresholds, run_nested, run_tunable, threshold_objective, universality_check, AmplificationSchedule,
    Backend, RunOptions, ThresholdVector, VtaaError,
};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Seeded Hermitian instances with `κ ≤ 81` and `d ≤ 4`; `b` weights eigenvector
/// `u` by `|λ_u|^q`, so larger `q` gives smaller success probabilities.
fn suite_setup(seed: u64) -> Setup {
    let mut r = rng(1000 + seed);
    let d = r.random_range(2..=4);
    let kappa = 3f64.powf(r.random_range(1.0..4.0));
    let mut eig = log_uniform_spectrum(&mut r, d, 1.0 / kappa, 1.0);
    eig[0] = eig[0].signum();
    eig[1] = eig[1].signum() / kappa;
    let a = random::hermitian_with_spectrum(&mut r, &eig);
    let spec = spectral_decompose(&a).expect("Hermitian");
    let q = r.random_range(0.0..2.5);
    let mut b = CVec::zeros(d);
    for u in 0..d {
        let phase = C64::from_polar(1.0, r.random_range(0.0..std::f64::consts::TAU));
        b += spec.vector(u) * (phase * spec.eigenvalues[u].abs().powf(q));
    }
    analyze(&LinearSystemInstance::new(a, b).expect("shapes agree")).expect("suite instances are invertible")
}

fn dirichlet() -> Outcome {
    let mut worst: f64 = 0.0;
    for rho in (3..=101u32).step_by(2) {
        let top = FRAC_PI_2 / rho as f64;
        for i in 0..=10_000 {
            let theta = top * i as f64 / 10_000.0;
            let v = dirichlet_ratio(rho, theta).map_err(|e| e.to_string())?;
            ensure(v.holds(1e-12), || format!("ρ = {rho}, θ = {theta}: {v:?}"))?;
            if rho == 3 {
                worst = worst.max((v.ratio - (1.0 - 4.0 / 3.0 * theta.sin().powi(2))).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("ρ = 3 identity off by {worst:e}"))?;
    Ok(format!("50 odd ρ × 10001 θ, ρ = 3 identity within {worst:.1e}"))
}

fn deterministic_schedule() -> Outcome {
    let spec = DinvSpec::default().with_mode(Mode::IDEAL);
    let floor = 5f64.sqrt() / (9.0 * spec.c);
    let mut depths = std::collections::BTreeSet::new();
    let mins: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|seed| -> Result<(f64, usize), String> {
            let setup = suite_setup(seed);
            let run = prepare_dinv(&setup, &spec, None).map_err(|e| format!("seed {seed}: {e}"))?;
            let m = setup.m;
            let sqrt_p = run.inverter.vta.plain_amplitudes()[m];
            let l = plan_depth(spec.c, sqrt_p).map_err(|e| e.to_string())?;
            let want: Vec<u32> = (1..=m).map(|j| u32::from(j + l > m)).collect();
            ensure(run.l == l && run.plan.schedule.r == want, || {
                format!("seed {seed}: schedule {:?}, expected {want:?}", run.plan.schedule.r)
            })?;
            ensure(run.final_amplitude >= floor, || format!("seed {seed}: amplitude {} < {floor}", run.final_amplitude))?;
            Ok((run.final_amplitude, l))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|(a, l)| {
            depths.insert(l);
            a
        })
        .collect();
    let lo = mins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("50 instances, depths {depths:?}, min final amplitude {lo:.4} ≥ {floor:.4}"))
}

fn probability_chains() -> Outcome {
    let spec = DinvSpec::default();
    let n: usize = (0..20u64)
        .into_par_iter()
        .map(|seed| -> Result<usize, String> {
            let setup = suite_setup(seed);
            let run = prepare_dinv(&setup, &spec, None).map_err(|e| e.to_string())?;
            let mut checked = 0;
            // threshold sums run over the last l stages, so l = 0 is vacuous
            for l in 1..=run.l.max(1).min(setup.m) {
                let rep = check_multiplicative_bounds(&setup, &spec, l).map_err(|e| e.to_string())?;
                let bad: Vec<_> = rep.chains.iter().filter(|c| !c.holds).map(|c| c.name.clone()).collect();
                ensure(rep.all_hold(), || format!("seed {seed}, l = {l}: {bad:?}, leakage {}", rep.leakage_holds))?;
                checked += rep.chains.len();
            }
            Ok(checked)
        })
        .sum::<Result<usize, String>>()?;
    Ok(format!("{n} chain checks on 20 instances"))
}

fn solver_correctness() -> Outcome {
    let spec = DinvSpec::default();
    let eps = 1e-2;
    let fids: Vec<(f64, usize)> = (0..20u64)
        .into_par_iter()
        .map(|seed| -> Result<(f64, usize), String> {
            let setup = suite_setup(100 + seed);
            let rep = solve_qls(&setup, &spec, None).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure(rep.fidelity >= 1.0 - eps, || format!("seed {seed}: fidelity {}", rep.fidelity))?;
            let l = rep.dinv.l as u32;
            ensure(rep.dinv.ledger.counted.oracle_b == 3u64.pow(l), || {
                format!("seed {seed}: O_b {} ≠ 3^{l}", rep.dinv.ledger.counted.oracle_b)
            })?;
            ensure(rep.dinv.ledger.exact(), || {
                format!("seed {seed}: counted {:?} ≠ analytic {:?}", rep.dinv.ledger.counted, rep.dinv.ledger.analytic)
            })?;
            Ok((rep.fidelity, rep.dinv.l))
        })
        .collect::<Result<_, _>>()?;
    let lo = fids.iter().map(|f| f.0).fold(1.0, f64::min);
    let deepest = fids.iter().map(|f| f.1).max().unwrap_or(0);
    Ok(format!("20 instances, depth up to {deepest}, max infidelity {:.1e}", 1.0 - lo))
}

fn grover() -> Outcome {
    let (inst, exp) = grover_fixture(16, 5).map_err(|e| e.to_string())?;
    let x = inst.direct_solution().map_err(|e| e.to_string())?;
    ensure(exp.solution_norm == 2.125 && (x.norm() - 2.125).abs() <= TAU_SPEC, || {
        format!("‖A⁻¹b‖ = {} / {}", exp.solution_norm, x.norm())
    })?;
    let spec = DinvSpec { eps_gpe: GROVER_EPS / 4.0, eps_bm: GROVER_EPS / 16.0, ..Default::default() };
    let rep = solve_qls(&analyze(&inst).map_err(|e| e.to_string())?, &spec, None).map_err(|e| e.to_string())?;
    let p = rep.x[exp.w].norm_sqr();
    ensure(p > 0.504, || format!("|⟨w|x̂⟩|² = {p}"))?;
    Ok(format!("‖A⁻¹b‖ = 34/16, |⟨w|x̂⟩|² = {p:.4} > 0.504"))
}

fn universality() -> Outcome {
    let opts = RunOptions::default();
    let mut forward = 0;
    let mut reverse = 0;
    for seed in 0..40u64 {
        let mut r = rng(2000 + seed);
        let m = r.random_range(2..=5);
        let vta = if seed % 2 == 0 { random_vta(&mut r, m, 2) } else { leaky_vta(&mut r, m, 2, 0.3) };
        let raw: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0)).collect();
        let total = r.random_range(0.2..1.0) / raw.iter().sum::<f64>();
        let thr = ThresholdVector { alpha: raw.iter().map(|x| x * total).collect() };
        let out = run_tunable(&vta, &thr, Backend::Matrix, &opts).map_err(|e| e.to_string())?;
        let rep = universality_check(&out.schedule, &out.trace, Some(&thr));
        let f = rep.forward.ok_or("forward check missing")?;
        ensure(f.holds, || format!("seed {seed}: forward {f:?}"))?;
        forward += 1;

    }
    for seed in 0..200u64 {
        let mut r = rng(2500 + seed);
        let m = r.random_range(2..=5);
        let keep = r.random_range(0.05..0.4);
        let vta = leaky_vta(&mut r, m, 2, keep);
        let sched = AmplificationSchedule { r: (0..m).map(|_| r.random_range(0..2)).collect() };
        let out = run_nested(&vta, &sched, Backend::Matrix, &opts).map_err(|e| e.to_string())?;
        if let Some(rv) = universality_check(&out.schedule, &out.trace, None).reverse {
            ensure(rv.holds, || format!("seed {seed}: reverse {rv:?}"))?;
            reverse += 1;
        }
    }
    let spec = DinvSpec::default().with_mode(Mode::IDEAL);
    for seed in 0..10u64 {
        let setup = suite_setup(seed);
        let run = prepare_dinv(&setup, &spec, None).map_err(|e| e.to_string())?;
        let rep = universality_check(&run.plan.schedule, &run.trace, Some(&run.plan.thresholds));
        ensure(rep.forward.as_ref().is_some_and(|f| f.holds), || format!("dinv seed {seed}: {rep:?}"))?;
        forward += 1;
    }
    Ok(format!("{forward} forward and {reverse} reverse checks"))
}

fn optimizer() -> Outcome {
    let mut r = rng(3000);
    let mut worst: f64 = 0.0;
    for l in [2usize, 3] {
        for _ in 0..5 {
            let b: Vec<f64> = (0..l).map(|_| r.random_range(0.05..1.0)).collect();
            let c: Vec<f64> = (0..l).map(|_| r.random_range(1.0..20.0)).collect();
            let (alpha, opt) = optimize_thresholds(&b, &c).map_err(|e| e.to_string())?;
            ensure((threshold_objective(&b, &c, &alpha) - opt).abs() <= 1e-9 * opt, || "closed form inconsistent".into())?;
            let g = 200;
            let mut best = f64::INFINITY;
            for i in 1..g {
                let a1 = i as f64 / g as f64;
                if l == 2 {
                    best = best.min(threshold_objective(&b, &c, &[a1, 1.0 - a1]));
                } else {
                    for j in 1..g {
                        let a2 = j as f64 / g as f64;
                        if a1 + a2 < 1.0 {
                            best = best.min(threshold_objective(&b, &c, &[a1, a2, 1.0 - a1 - a2]));
                        }
                    }
                }
            }
            ensure(best >= opt * (1.0 - 1e-12), || format!("grid {best} beats closed form {opt}"))?;
            worst = worst.max((best - opt) / opt);
        }
    }
    ensure(worst <= 1e-3, || format!("grid gap {worst}"))?;
    for _ in 0..100 {
        let l = r.random_range(1..=8);
        let b: Vec<f64> = (0..l).map(|_| r.random_range(0.01..1.0)).collect();
        let c: Vec<f64> = (0..l).map(|_| r.random_range(1.0..100.0)).collect();
        let (_, opt) = optimize_thresholds(&b, &c).map_err(|e| e.to_string())?;
        let l1: f64 = b.iter().zip(&c).map(|(b, c)| b * c).sum();
        ensure(opt <= (l as f64).sqrt() * l1 * (1.0 + 1e-12), || format!("{opt} > √{l}·{l1}"))?;
    }
    Ok(format!("grid gap {worst:.1e}, √l bound on 100 inputs"))
}

fn preconditioning() -> Outcome {
    let mut r = rng(4000);
    let mut worst_amp = f64::INFINITY;
    let mut worst_inv: f64 = 0.0;
    for i in 0..20 {
        let d = r.random_range(2..=8);
        let inst = if i % 2 == 0 {
            let kappa = 3f64.powf(r.random_range(1.0..4.0));
            random_instance(&mut r, d, kappa)
        } else {
            let a = random::unitary(&mut r, d)
                * CMat::from_diagonal(&CVec::from_iterator(
                    d,
                    (0..d).map(|_| re(r.random_range(0.02..1.0))),
                ))
                * random::unitary(&mut r, d);
            LinearSystemInstance::new(a, random::state(&mut r, d)).map_err(|e| e.to_string())?
        };
        let t = inst.direct_solution().map_err(|e| e.to_string())?.norm();
        let (_, rep) = self_preconditioned_solve(&inst, t, 1e-2).map_err(|e| e.to_string())?;
        ensure(rep.guarantees_hold(), || format!("instance {i}: {rep:?}"))?;
        ensure(rep.invariance_error <= 1e-10, || format!("instance {i}: invariance {}", rep.invariance_error))?;
        worst_amp = worst_amp.min(rep.amplitude);
        worst_inv = worst_inv.max(rep.inverse_norm / rep.inverse_norm_bound);
    }
    Ok(format!("20 instances, min amplitude {worst_amp:.4}, max ‖(SA)⁻¹‖/(√17α) {worst_inv:.4}"))
}

fn application_norms() -> Outcome {
    let mut r = rng(5000);
    let mut pad_err: f64 = 0.0;
    let mut pad_norm: f64 = 0.0;
    for _ in 0..10 {
        let d = r.random_range(2..=4);
        let eig: Vec<f64> = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
        let kappa_s = r.random_range(1.0..4.0);
        let inst = nonnormal_instance(&mut r, &eig, kappa_s);
        let alpha = inst.alpha().map_err(|e| e.to_string())?;
        let m = inst.matrix().map_err(|e| e.to_string())? / re(alpha);
        let n = r.random_range(2..=24);
        let pad = build_padded_system(&m, n, 1, DIM_CAP).map_err(|e| e.to_string())?;
        pad_err = pad_err.max(pad.inverse_structure_error(&m));
        pad_norm = pad_norm.max(pad.matrix.norm());
    }
    ensure(pad_err <= TAU_SPEC, || format!("Pad inverse blocks off by {pad_err:e}"))?;
    ensure(pad_norm <= 4.0, || format!("‖Pad‖ = {pad_norm}"))?;
    for _ in 0..30 {
        let n = r.random_range(2..=40);
        let deg = r.random_range(0..n);
        let coeffs: Vec<f64> = (0..=deg).map(|_| r.random_range(-1.0..1.0)).collect();
        let rep = check_poly_bounds(&Polynomial::Chebyshev(coeffs), n, 4001).map_err(|e| e.to_string())?;
        ensure(rep.lemma_holds && rep.u_sum_bound_holds, || format!("{rep:?}"))?;
    }
    let mut tay_err: f64 = 0.0;
    for n in 1..=4 {
        for k in 1..=4 {
            let m = random::hermitian(&mut r, 3) * re(0.3);
            let b = random::state(&mut r, 3);
            let t = build_taylor_system(&m, n, k, 3, DIM_CAP).map_err(|e| e.to_string())?;
            let x = t.matrix.solve(&t.initial_state(&b));
            let want = &taylor_stepping_oracle(&m, &b, n, k)[n];
            for i in t.success_blocks() {
                tay_err = tay_err.max((x.rows(i * 3, 3) - want).norm());
            }
        }
    }
    ensure(tay_err <= 1e-8, || format!("Taylor blocks off by {tay_err:e}"))?;
    Ok(format!("Pad error {pad_err:.1e}, ‖Pad‖ ≤ {pad_norm:.3}, Taylor error {tay_err:.1e}"))
}

/// Spectrum `{1, 1/81}` in a random basis with `b` putting weight `w` on the
/// small eigenvalue, so `p_succ` sweeps several orders of magnitude.
fn sweep_setup(seed: u64, w: f64) -> Setup {
    let mut r = rng(7000 + seed);
    let a = random::hermitian_with_spectrum(&mut r, &[1.0, 1.0 / 81.0]);
    let spec = vtqls::numerics::spectral_decompose(&a).expect("Hermitian");
    let (small, large) = if spec.eigenvalues[0].abs() < spec.eigenvalues[1].abs() { (0, 1) } else { (1, 0) };
    let b = spec.vector(large) * re((1.0 - w).sqrt()) + spec.vector(small) * re(w.sqrt());
    analyze(&LinearSystemInstance::new(a, b).expect("shapes agree")).expect("invertible")
}

fn norm_estimation() -> Outcome {
    let spec = DinvSpec::default().with_mode(Mode::IDEAL);
    let cfg = EstimationConfig::default();
    let regime = 2.0 / (5f64.sqrt() * spec.c);
    let mut setups: Vec<Setup> = (0..8).map(|i| sweep_setup(i, 10f64.powf(-4.0 + i as f64 * 0.5))).collect();
    let mut excluded = 0;
    for seed in 0..12 {
        let s = suite_setup(seed);
        let sqrt_p = build_inverter_vta(&s, &spec, 0).map_err(|e| e.to_string())?.vta.plain_amplitudes()[s.m];
        // the stopping argument needs log₃(2/(√5c√p)) ≥ 0
        if sqrt_p <= regime {
            setups.push(s);
        } else {
            excluded += 1;
        }
    }
    let lower_bound = |s: &Setup| -> Result<f64, String> {
        let a = build_inverter_vta(s, &spec, 0).map_err(|e| e.to_string())?.vta.plain_amplitudes()[s.m];
        Ok((a * a / 4.0).min(1.0))
    };
    let mut consts = Vec::new();
    let mut max_l = 0;
    for (i, setup) in setups.iter().enumerate() {
        let alpha_p = lower_bound(setup)?;
        let est = estimate_solution_norm(setup, &spec, alpha_p, &cfg, &mut rng(i as u64)).map_err(|e| e.to_string())?;
        let truth = build_inverter_vta(setup, &spec, est.l).map_err(|e| e.to_string())?.vta.plain_amplitudes()[setup.m];
        let ratio = est.sqrt_p / truth;
        ensure((1.0 / 3.0..=3.0).contains(&ratio), || format!("instance {i}: ratio {ratio} at l = {}", est.l))?;
        consts.push(est.ledger.oracle_b as f64 * alpha_p.sqrt());
        max_l = max_l.max(est.l);
    }
    let lo = consts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = consts.iter().copied().fold(0.0, f64::max);
    ensure(hi / lo <= 9.0, || format!("O_b·√α_p spread {lo}..{hi}"))?;

    let stoch = EstimationConfig { mode: EstimationMode::Stochastic, ..cfg };
    let failures: usize = (0..200u64)
        .into_par_iter()
        .map(|trial| -> Result<usize, String> {
            let setup = &setups[trial as usize % setups.len()];
            let alpha_p = lower_bound(setup)?;
            Ok(match estimate_solution_norm(setup, &spec, alpha_p, &stoch, &mut rng(10_000 + trial)) {
                Ok(est) => {
                    let truth = build_inverter_vta(setup, &spec, est.l).map_err(|e| e.to_string())?.vta.plain_amplitudes()[setup.m];
                    usize::from(!(1.0 / 3.0..=3.0).contains(&(est.sqrt_p / truth)))
                }
                Err(_) => 1,
            })
        })
        .sum::<Result<usize, String>>()?;
    let rate = failures as f64 / 200.0;
    ensure(rate < 0.5, || format!("stochastic failure rate {rate}"))?;
    Ok(format!(
        "{} exact estimates within ×3 (depth up to {max_l}, {excluded} above √p = {regime:.3} excluded), \
         O_b·√α_p in [{lo:.1}, {hi:.1}], stochastic failure rate {rate:.3}",
        setups.len()
    ))
}

fn cross_backend() -> Outcome {
    let opts = RunOptions::default();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut check = |vta: &vtqls::vtaa::VariableTimeAlgorithm, sched: &AmplificationSchedule| -> Result<(), String> {
        let a = run_nested(vta, sched, Backend::Matrix, &opts).map_err(|e| e.to_string())?;
        let overshoot = a.trace.stages.iter().zip(sched.steps()).any(|(s, n)| n > 1 && n as f64 * s.pre > 1.0);
        let b = match run_nested(vta, sched, Backend::Analytic, &opts) {
            Ok(b) => b,
            Err(VtaaError::Overshoot { .. }) if overshoot => return Ok(()),
            Err(e) => return Err(format!("analytic backend: {e}")),
        };
        if overshoot {
            return Err("analytic backend accepted an overshooting schedule".into());
        }
        for (x, y) in a.trace.stages.iter().zip(&b.trace.stages) {
            worst = worst.max((x.pre - y.pre).abs()).max((x.post - y.post).abs()).max((x.plain - y.plain).abs());
        }
        worst = worst.max((a.trace.final_amplitude - b.trace.final_amplitude).abs());
        compared += 1;
        Ok(())
    };
    for seed in 0..60u64 {
        let mut r = rng(6000 + seed);
        let m = r.random_range(2..=5);
        let keep = r.random_range(0.05..0.5);
        let vta = leaky_vta(&mut r, m, 2, keep);
        let sched = AmplificationSchedule { r: (0..m).map(|_| r.random_range(0..3)).collect() };
        check(&vta, &sched)?;
        let thr = ThresholdVector { alpha: vec![1.0 / m as f64; m] };
        let tun = run_tunable(&vta, &thr, Backend::Matrix, &opts).map_err(|e| e.to_string())?;
        check(&vta, &tun.schedule)?;
    }
    let spec = DinvSpec::default().with_mode(Mode::IDEAL);
    for seed in 0..10u64 {
        let setup = suite_setup(seed);
        let run = prepare_dinv(&setup, &spec, None).map_err(|e| e.to_string())?;
        check(&run.inverter.vta, &run.plan.schedule)?;
    }
    ensure(worst <= TAU_SPEC, || format!("backends differ by {worst:e}"))?;
    Ok(format!("{compared} runs, max difference {worst:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("dirichlet bounds", dirichlet),
        ("deterministic schedule", deterministic_schedule),
        ("probability chains", probability_chains),
        ("solver correctness", solver_correctness),
        ("grover instance", grover),
        ("universality", universality),
        ("threshold optimizer", optimizer),
        ("preconditioning guarantees", preconditioning),
        ("application norm relations", application_norms),
        ("solution-norm estimation", norm_estimation),
        ("cross-backend agreement", cross_backend),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
