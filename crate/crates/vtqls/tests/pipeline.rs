use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtqls::dinv::fixtures::random_instance;
use vtqls::dinv::{analyze, prepare_dinv, solve_qls, DinvSpec, InstanceJson, LinearSystemInstance, Mode};
use vtqls::precond::self_preconditioned_solve;
use vtqls::vtaa::{run_nested, Backend, RunOptions};

fn instance(seed: u64) -> LinearSystemInstance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = r.random_range(2..=4);
    let kappa = 3f64.powf(r.random_range(1.0..3.0));
    random_instance(&mut r, d, kappa)
}

fn overlap(x: &vtqls::numerics::CVec, y: &vtqls::numerics::CVec) -> f64 {
    x.dotc(y).norm_sqr() / (x.norm_squared() * y.norm_squared())
}

#[test]
fn json_round_trip_preserves_solution() {
    for seed in 0..5 {
        let inst = instance(seed);
        let text = serde_json::to_string(&InstanceJson::from(&inst)).unwrap();
        let back: InstanceJson = serde_json::from_str(&text).unwrap();
        let back = LinearSystemInstance::try_from(&back).unwrap();
        let (x, y) = (inst.direct_solution().unwrap(), back.direct_solution().unwrap());
        assert!((x - y).norm() < 1e-12);
    }
}

#[test]
fn both_solvers_recover_the_normalized_solution() {
    let spec = DinvSpec { mode: Mode::IDEAL, ..Default::default() };
    for seed in 10..16 {
        let inst = instance(seed);
        let x = inst.direct_solution().unwrap();
        let setup = analyze(&inst).unwrap();
        let rep = solve_qls(&setup, &spec, None).unwrap();
        assert!(overlap(&rep.x, &x) > 1.0 - 1e-9, "seed {seed}: {}", rep.fidelity);
        let (y, pre) = self_preconditioned_solve(&inst, x.norm(), 1e-3).unwrap();
        assert!(pre.guarantees_hold(), "seed {seed}");
        assert!(overlap(&y, &x) > 1.0 - 1e-3, "seed {seed}: {}", pre.fidelity);
    }
}

#[test]
fn analytic_backend_replays_the_dinv_schedule() {
    let spec = DinvSpec { mode: Mode::IDEAL, ..Default::default() };
    for seed in 20..26 {
        let setup = analyze(&instance(seed)).unwrap();
        let run = prepare_dinv(&setup, &spec, None).unwrap();
        let opts = RunOptions::default();
        let m = run_nested(&run.inverter.vta, &run.plan.schedule, Backend::Matrix, &opts).unwrap();
        let a = run_nested(&run.inverter.vta, &run.plan.schedule, Backend::Analytic, &opts).unwrap();
        assert!((m.trace.final_amplitude - a.trace.final_amplitude).abs() < 1e-9);
        assert_eq!(m.ledger.counted, a.ledger.counted);
        assert!(a.ledger.exact());
    }
}
