//! End-to-end runs through parsing, assumption checks, quantization,
//! propagation and norms.

use std::collections::BTreeMap;

use weylsim::calculus::{grid_sample_box, problem_constants, resolvent_apply};
use weylsim::evolve::{duality_pairing_test, propagate, propagate_backward_adjoint, EvolveConfig, Problem};
use weylsim::field::{gaussian, read_csv, write_csv, Grid};
use weylsim::quantize::garding_floor;
use weylsim::symbols::{check_growth, DampingSpec, GrowthClass, PotentialSpec};
use weylsim::wsnorm::{sobolev_norm, NormSpec};

fn damped_problem() -> Problem {
    let grid = Grid::new(1, 128, 10.0).unwrap();
    let mut b = BTreeMap::new();
    b.insert("w".to_string(), 0.8);
    let p = PotentialSpec::parse(1, "w^2*x^2/2", &["0.3*sin(x)"], 1.0, &b).unwrap();
    let k = DampingSpec::parse(1, "0.2*x^2", &b).unwrap();
    let u0 = gaussian(grid, &[0.5], 1.0, &[0.3]).normalized();
    Problem::new(p, k, GrowthClass::a22(0.0, 1.0).unwrap(), grid, u0, 0.5).unwrap()
}

#[test]
fn assumptions_then_damped_evolution() {
    let problem = damped_problem();
    let bx = grid_sample_box(&problem.grid, problem.horizon);
    let report = check_growth(&problem.potentials, &problem.damping, &problem.growth, &bx, 1000).unwrap();
    assert!(report.pass, "{:?}", report.failing());

    let floor = garding_floor(&problem.damping_operator(0.0).unwrap()).unwrap().value;
    assert!(floor >= -1e-10);

    let cfg = EvolveConfig::new(1e-3).levels(vec![(0, 0.0), (1, 0.0)]).stride(25);
    let r = propagate(&problem, &cfg).unwrap();
    assert!(r.growth_bound_holds);
    assert!(r.max_norm_increase <= 1e-10);
    assert!(r.norms.last().unwrap() < &r.norms[0]);

    let level1 = &r.levels[1];
    let direct = sobolev_norm(&r.final_state, &NormSpec::new(1, 0.0).unwrap()).unwrap();
    assert!((level1.values.last().unwrap() - direct).abs() <= 1e-10 * direct);
}

#[test]
fn forward_and_adjoint_runs_pair_consistently() {
    let problem = damped_problem();
    let cfg = EvolveConfig::new(1e-3).stride(50).keep_states(true);
    let fwd = propagate(&problem, &cfg).unwrap();
    let g = gaussian(problem.grid, &[-0.3], 1.2, &[0.0]).normalized();
    let bwd = propagate_backward_adjoint(&problem, &g, &cfg).unwrap();
    let pairing = duality_pairing_test(&fwd, &bwd).unwrap();
    assert!(pairing.max_rel_deviation <= 1e-8, "{}", pairing.max_rel_deviation);
}

#[test]
fn resolvent_inverts_shifted_hamiltonian() {
    let grid = Grid::new(1, 64, 8.0).unwrap();
    let none = BTreeMap::new();
    let p = PotentialSpec::parse(1, "x^2/2", &["0.5*x"], 1.0, &none).unwrap();
    let u0 = gaussian(grid, &[0.0], 1.0, &[0.0]);
    let problem = Problem::new(p, DampingSpec::zero(1), GrowthClass::a22(0.0, 1.0).unwrap(), grid, u0.clone(), 1.0).unwrap();
    let consts = problem_constants(&problem).unwrap();
    let mu = 100.0;
    let r = resolvent_apply(&problem, mu, &u0, &consts).unwrap();
    assert!(r.residual <= 1e-10);
    let back = problem.hamiltonian_operator(0.0).unwrap().apply(&r.g).unwrap();
    let lhs = back.plus(&r.g.scaled(weylsim::C64::new(mu, 0.0))).unwrap();
    assert!(lhs.minus(&u0).unwrap().norm() <= 1e-9 * u0.norm());
    if let Some(d) = r.neumann.deviation {
        assert!(d < 1.0);
    }
}

#[test]
fn state_dump_round_trips_through_csv() {
    let problem = damped_problem();
    let r = propagate(&problem, &EvolveConfig::new(1e-2)).unwrap();
    let mut buf = Vec::new();
    write_csv(&r.final_state, &mut buf).unwrap();
    let back = read_csv(std::io::Cursor::new(buf)).unwrap();
    assert!(back.minus(&r.final_state).unwrap().norm() <= 1e-14 * r.final_state.norm());
}
