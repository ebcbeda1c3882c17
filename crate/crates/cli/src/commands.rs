//! Command implementations. Each returns verdicts, a JSON report body,
//! an optional CSV series and optional state dumps.

use serde::Serialize;
use serde_json::{json, Value};
use weylsim::calculus::{
    commutator_bound_scan, grid_sample_box, problem_constants, q_epsilon_scan, remainder_decay_scan, ScanReport,
};
use weylsim::evolve::propagate;
use weylsim::field::{random_packet_state, State};
use weylsim::manybody::{check_manybody_assumptions, mb_lower_bound_constants, mb_parametrix_scan, mb_propagate};
use weylsim::quantize::{quantize_dense, quantize_poly, to_dense, DENSE_LIMIT};
use weylsim::sensitivity::convergence_study;
use weylsim::symbols::{check_growth, generator_symbol, hamiltonian_symbol, Symbol};

use crate::config::{Command, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, value: Option<f64>, detail: impl Into<String>) -> Verdict {
        Verdict { name: name.into(), pass, value, detail: detail.into() }
    }
}

pub struct RunOutput {
    pub verdicts: Vec<Verdict>,
    pub report: Value,
    pub csv: Option<String>,
    pub states: Vec<(String, State)>,
}

/// Largest `|‖u‖/‖u₀‖ − 1|` accepted for undamped runs.
const CONSERVATION_TOL: f64 = 1e-8;
/// Largest relative fast/dense discrepancy in `quantize-check`.
const PATH_TOL: f64 = 1e-10;

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunOutput, CliError> {
    match cmd {
        Command::Solve => solve(cfg),
        Command::Sensitivity => sensitivity(cfg),
        Command::ParametrixScan => parametrix_scan(cfg),
        Command::CommutatorScan => commutator_scan(cfg),
        Command::Assumptions => assumptions(cfg),
        Command::Manybody => manybody(cfg),
        Command::QuantizeCheck => quantize_check(cfg),
    }
}

fn solve(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let problem = cfg.build_problem()?;
    let ec = cfg.evolve_block()?.build();
    let r = propagate(&problem, &ec)?;
    let mut verdicts = vec![Verdict::new(
        "growth-bound",
        r.growth_bound_holds,
        Some(r.max_growth_ratio),
        format!("norm / (e^((C + tol) t) norm0) with C = {:.6e}", r.growth_constant),
    )];
    if problem.damping.is_zero() {
        let drift = r.max_norm_drift();
        verdicts.push(Verdict::new("norm-conservation", drift <= CONSERVATION_TOL, Some(drift), "max |norm/norm0 - 1|"));
    } else if r.damping_floor >= 0.0 {
        verdicts.push(Verdict::new(
            "norm-monotone",
            r.max_norm_increase <= 1e-10,
            Some(r.max_norm_increase),
            "largest increase between recorded times",
        ));
    }
    let mut csv = Vec::new();
    r.write_csv(&mut csv)?;
    let states = vec![("final".to_string(), r.final_state.clone())];
    Ok(RunOutput { verdicts, report: to_value(&r)?, csv: Some(String::from_utf8_lossy(&csv).into()), states })
}

fn sensitivity(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let (fam, rho) = cfg.build_family()?;
    let ec = cfg.evolve_block()?.build();
    let taus = if cfg.scan.tau.is_empty() { vec![1e-2, 5e-3, 2.5e-3] } else { cfg.scan.tau.clone() };
    let r = convergence_study(&fam, rho, &taus, &ec, cfg.scan.level.unwrap_or((0, 0.0)))?;
    let mut verdicts = vec![Verdict::new("first-order-rate", r.pass, Some(r.order), "fitted order of the difference-quotient error")];
    verdicts.push(Verdict::new(
        "bound-ratio-finite",
        r.sensitivity_bound_ratio.is_finite(),
        Some(r.sensitivity_bound_ratio),
        "max_t |w|_{a,M} / |u0|_{a+1,M}",
    ));
    let mut csv = String::from("tau,error\n");
    for (t, e) in r.taus.iter().zip(&r.errors) {
        csv.push_str(&format!("{t:.12e},{e:.16e}\n"));
    }
    Ok(RunOutput { verdicts, report: to_value(&r)?, csv: Some(csv), states: Vec::new() })
}

fn scan_csv(r: &ScanReport) -> String {
    let mut s = format!("{},norm,converged,included\n", r.variable);
    for p in &r.points {
        s.push_str(&format!("{:.12e},{:.16e},{},{}\n", p.value, p.norm, p.converged, p.included));
    }
    s
}

fn scan_verdict(name: &str, r: &ScanReport) -> Verdict {
    let value = r.fit.as_ref().map(|f| f.slope).or(r.band.as_ref().map(|b| b.ratio));
    Verdict::new(name, r.pass, value, r.notes.join("; "))
}

fn parametrix_scan(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let problem = cfg.build_problem()?;
    let consts = problem_constants(&problem)?;
    let mus = if cfg.scan.mu.is_empty() { [2.0, 2.5, 3.0, 3.5, 4.0].iter().map(|e| 10f64.powf(*e)).collect() } else { cfg.scan.mu.clone() };
    let r = remainder_decay_scan(&problem, &mus, &consts)?;
    let verdicts = vec![scan_verdict("remainder-decay", &r)];
    Ok(RunOutput {
        verdicts,
        report: json!({ "constants": to_value(&consts)?, "scan": to_value(&r)? }),
        csv: Some(scan_csv(&r)),
        states: Vec::new(),
    })
}

fn commutator_scan(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let problem = cfg.build_problem()?;
    let mu = match cfg.scan.shift {
        Some(m) => m,
        None => problem_constants(&problem)?.default_mu(),
    };
    let eps = if cfg.scan.epsilon.is_empty() { (0..7).map(|k| 2f64.powi(-k)).collect() } else { cfg.scan.epsilon.clone() };
    let r = commutator_bound_scan(&problem, mu, &eps)?;
    let mut verdicts = vec![scan_verdict("commutator-bound", &r)];
    let mut q_reports = Vec::new();
    let mut csv = scan_csv(&r);
    for &a in &cfg.scan.q_levels {
        let q = q_epsilon_scan(&problem, a, mu, &eps)?;
        verdicts.push(scan_verdict(&format!("q-uniform-a{a}"), &q));
        csv.push_str(&format!("# q a = {a}\n"));
        csv.push_str(&scan_csv(&q));
        q_reports.push(q);
    }
    Ok(RunOutput {
        verdicts,
        report: json!({ "shift": mu, "commutator": to_value(&r)?, "q": to_value(&q_reports)? }),
        csv: Some(csv),
        states: Vec::new(),
    })
}

fn assumptions(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let samples = cfg.scan.samples.unwrap_or(2000);
    if cfg.manybody.is_some() {
        let (problem, _) = cfg.build_manybody()?;
        let bx = grid_sample_box(&problem.particle_grid(), problem.horizon);
        let r = check_manybody_assumptions(&problem, &bx, samples)?;
        let mut verdicts: Vec<Verdict> = Vec::new();
        for (k, pr) in r.particles.iter().enumerate() {
            for c in &pr.clauses {
                verdicts.push(Verdict::new(&format!("particle{}:{}", k + 1, c.name), c.pass, Some(c.constant), c.inequality.clone()));
            }
        }
        for c in &r.interactions {
            verdicts.push(Verdict::new(&c.name, c.pass, Some(c.constant), c.note.clone().unwrap_or_else(|| c.inequality.clone())));
        }
        return Ok(RunOutput { verdicts, report: to_value(&r)?, csv: None, states: Vec::new() });
    }
    let grid = cfg.grid()?;
    let p = cfg.problem_block()?;
    let (pot, damp) = cfg.specs(&p.params)?;
    let bx = grid_sample_box(&grid, p.horizon);
    let r = check_growth(&pot, &damp, &p.growth.build()?, &bx, samples)?;
    let verdicts = r
        .clauses
        .iter()
        .map(|c| Verdict::new(&c.name, c.pass, Some(c.constant), c.inequality.clone()))
        .collect();
    Ok(RunOutput { verdicts, report: to_value(&r)?, csv: None, states: Vec::new() })
}

fn manybody(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let (problem, u0) = cfg.build_manybody()?;
    let ec = cfg.evolve_block()?.build();
    let run = mb_propagate(&problem, &u0, &ec)?;
    let r = &run.report;
    let mut verdicts = vec![Verdict::new("growth-bound", r.growth_bound_holds, Some(r.max_growth_ratio), "Garding-floor growth bound")];
    if problem.particles.iter().all(|p| p.damping.is_zero()) {
        let drift = r.max_norm_drift();
        verdicts.push(Verdict::new("norm-conservation", drift <= CONSERVATION_TOL, Some(drift), "max |norm/norm0 - 1|"));
    }
    let mut scan = None;
    if !cfg.scan.mu.is_empty() {
        let consts = mb_lower_bound_constants(&problem, cfg.scan.samples.unwrap_or(4000))?;
        let s = mb_parametrix_scan(&problem, &cfg.scan.mu, &consts)?;
        verdicts.push(scan_verdict("mb-remainder-decay", &s));
        scan = Some(json!({ "constants": to_value(&consts)?, "scan": to_value(&s)? }));
    }
    let mut csv = Vec::new();
    run.write_csv(&mut csv)?;
    Ok(RunOutput {
        verdicts,
        report: json!({ "evolution": to_value(&run)?, "parametrix": scan }),
        csv: Some(String::from_utf8_lossy(&csv).into()),
        states: vec![("final".to_string(), r.final_state.clone())],
    })
}

fn path_difference(s: &Symbol, cfg: &RunConfig, probes: usize) -> Result<f64, CliError> {
    let grid = cfg.grid()?;
    let fast = quantize_poly(s, &grid, 0.0)?;
    let dense = quantize_dense(s, &grid, 0.0)?;
    let mut worst = 0.0f64;
    for k in 0..probes {
        let f = random_packet_state(grid, cfg.seed.wrapping_mul(1000).wrapping_add(k as u64));
        let a = fast.apply(&f)?;
        let b = dense.apply(&f)?;
        worst = worst.max(a.minus(&b)?.norm() / b.norm().max(1e-300));
    }
    Ok(worst)
}

fn quantize_check(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let grid = cfg.grid()?;
    if grid.len() > DENSE_LIMIT {
        return Err(CliError::Config(format!("quantize-check needs at most {DENSE_LIMIT} grid points, got {}", grid.len())));
    }
    let problem = cfg.build_problem()?;
    let probes = cfg.scan.probes.unwrap_or(20);
    let h = hamiltonian_symbol(&problem.potentials);
    let g = generator_symbol(&problem.potentials, Some(&problem.damping));
    let dh = path_difference(&h, cfg, probes)?;
    let dg = path_difference(&g, cfg, probes)?;
    let hm = to_dense(&problem.hamiltonian_operator(0.0)?)?;
    let asym = weylsim::linalg::largest_singular_value(&(&hm - hm.adjoint()))
        / weylsim::linalg::largest_singular_value(&hm).max(1e-300);
    let verdicts = vec![
        Verdict::new("hamiltonian-paths", dh <= PATH_TOL, Some(dh), "fast vs dense quantization, relative"),
        Verdict::new("generator-paths", dg <= PATH_TOL, Some(dg), "fast vs dense quantization, relative"),
        Verdict::new("hamiltonian-symmetric", asym <= 1e-9, Some(asym), "|H - H*| / |H|"),
    ];
    let report = json!({
        "grid_points": grid.len(),
        "probes": probes,
        "hamiltonian_difference": dh,
        "generator_difference": dg,
        "hamiltonian_asymmetry": asym,
    });
    Ok(RunOutput { verdicts, report, csv: None, states: Vec::new() })
}
