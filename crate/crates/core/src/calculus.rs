//! Operator-calculus diagnostics: parametrix remainders, the resolvent,
//! cutoff commutators and the `Q_{aε}` family, all on dense kernels.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{regularized_operator_with_shift, Problem};
use crate::field::{State, Grid};
use crate::linalg;
use crate::quantize::{op_norm_estimate, quantize, quantize_dense, to_dense, Operator};
use crate::stats_fit;
use crate::symbols::{
    cutoff_symbol, fit_lower_bound_constants, hamiltonian_symbol, hamiltonian_time_derivative, symmetrized_symbol,
    CutoffProfile, Degree, LowerBoundConstants, Role, SampleBox, Symbol,
};
use crate::C64;

pub const EXPECTED_DECAY: f64 = -0.5;
pub const DECAY_BAND: (f64, f64) = (-0.65, -0.35);
pub const BAND_RATIO_LIMIT: f64 = 3.0;
pub(crate) const NORM_ITERS: usize = 2000;
const REMAINDER_FLOOR: f64 = 1e-10;

/// Sample box matching a grid: `|x| ≤ L`, `|ξ| ≤ π/h`, `t ∈ [0, T]`.
pub fn grid_sample_box(grid: &Grid, t_max: f64) -> SampleBox {
    SampleBox::new(grid.half_width(), std::f64::consts::PI / grid.spacing(), t_max)
}

/// Lower-bound constants of `h` fitted on the problem's grid box.
pub fn problem_constants(problem: &Problem) -> Result<LowerBoundConstants> {
    fit_lower_bound_constants(
        &problem.potentials,
        &problem.growth,
        &grid_sample_box(&problem.grid, problem.horizon),
        4000,
    )
}

/// `p_μ = 1/(μ + h_s)`.
pub fn parametrix_symbol(h_s: &Symbol, mu: f64, consts: &LowerBoundConstants) -> Result<Symbol> {
    if mu < consts.mu_floor() {
        return Err(Error::Domain(format!("mu = {mu} below the admissible floor {:.6e}", consts.mu_floor())));
    }
    let h = h_s.clone();
    Ok(Symbol::new(h.dim(), Degree::General, Role::Parametrix, move |t, x, xi| {
        C64::new(1.0, 0.0) / (mu + h.eval(t, x, xi))
    }))
}

fn dense_operator(grid: Grid, m: DMatrix<C64>) -> Result<Operator> {
    Operator::from_matrix(grid, m)
}

/// `R_μ = (μ + H)·Op(p) − I` as a dense operator.
pub fn remainder_operator(h: &Operator, p: &Symbol, mu: f64, t: f64) -> Result<Operator> {
    let grid = *h.grid();
    let hm = to_dense(h)?;
    let pm = to_dense(&quantize_dense(p, &grid, t)?)?;
    let n = grid.len();
    let mut r = (hm + DMatrix::<C64>::identity(n, n) * C64::new(mu, 0.0)) * pm;
    for i in 0..n {
        r[(i, i)] -= C64::new(1.0, 0.0);
    }
    dense_operator(grid, r)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormValue {
    pub value: f64,
    pub converged: bool,
    pub rel_change: f64,
}

pub(crate) fn norm_of(op: &Operator, iters: usize) -> Result<NormValue> {
    let e = op_norm_estimate(op, iters, 7)?;
    Ok(NormValue { value: e.value, converged: e.converged, rel_change: e.rel_change })
}

/// `‖(μ + H)·Op(p_μ) − I‖` at `t = 0`.
pub fn remainder_norm(problem: &Problem, mu: f64, probe_count: usize, consts: &LowerBoundConstants) -> Result<NormValue> {
    let p = parametrix_symbol(&symmetrized_symbol(&problem.potentials), mu, consts)?;
    let h = problem.hamiltonian_operator(0.0)?;
    norm_of(&remainder_operator(&h, &p, mu, 0.0)?, probe_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    ParametrixDecay,
    CommutatorBound,
    QEpsilon,
    ManyBodyParametrixDecay,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanPoint {
    pub value: f64,
    pub norm: f64,
    pub converged: bool,
    pub included: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    /// Slope of `log ‖R_μ‖` against `log(μ − C1*)`.
    pub slope: f64,
    /// Two standard errors.
    pub half_width: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub expected: f64,
    pub band: (f64, f64),
    pub shift: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    /// `‖R_μ‖·(μ − C1*)^{1/2}` per included point.
    pub scaled: Vec<f64>,
    /// Whether the scaled values never increase, i.e. decay is at least
    /// as fast as the expected exponent.
    pub non_increasing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BandCheck {
    pub ratio: f64,
    pub limit: f64,
    pub monotone_divergence: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub kind: ScanKind,
    pub variable: String,
    pub points: Vec<ScanPoint>,
    pub fit: Option<SlopeFit>,
    pub bound_check: Option<BoundCheck>,
    pub band: Option<BandCheck>,
    pub skipped: Option<String>,
    pub pass: bool,
    pub notes: Vec<String>,
}

/// Slope fit of remainder norms against `μ − C1*`, excluding `μ < 10·C1*`.
pub fn decay_report(kind: ScanKind, mus: &[f64], norms: &[NormValue], c1: f64) -> Result<ScanReport> {
    let mut points: Vec<ScanPoint> = mus
        .iter()
        .zip(norms)
        .map(|(&mu, n)| ScanPoint { value: mu, norm: n.value, converged: n.converged, included: mu >= 10.0 * c1 })
        .collect();
    let mut notes = Vec::new();
    if points.iter().any(|p| !p.converged) {
        notes.push("some norm estimates did not reach the relative-change limit".into());
    }
    if points.iter().all(|p| p.norm < REMAINDER_FLOOR) {
        for p in points.iter_mut() {
            p.included = false;
        }
        return Ok(ScanReport {
            kind,
            variable: "mu".into(),
            points,
            fit: None,
            bound_check: None,
            band: None,
            skipped: Some(format!("all remainders below {REMAINDER_FLOOR:e}; exact parametrix")),
            pass: true,
            notes,
        });
    }
    let used: Vec<&ScanPoint> = points.iter().filter(|p| p.included).collect();
    if used.len() < 4 {
        return Err(Error::Infeasible(format!(
            "{} points with mu >= 10·C1* = {:.3e}; the fit needs at least 4",
            used.len(),
            10.0 * c1
        )));
    }
    let lx: Vec<f64> = used.iter().map(|p| (p.value - c1).ln()).collect();
    let ly: Vec<f64> = used.iter().map(|p| p.norm.ln()).collect();
    let (slope, intercept, se) = stats_fit(&lx, &ly);
    let residuals = lx.iter().zip(&ly).map(|(x, y)| y - intercept - slope * x).collect();
    let scaled: Vec<f64> = used.iter().map(|p| p.norm * (p.value - c1).sqrt()).collect();
    let non_increasing = scaled.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    let pass = slope >= DECAY_BAND.0 && slope <= DECAY_BAND.1;
    if !pass {
        notes.push(format!("fitted slope {slope:.3} outside [{}, {}]", DECAY_BAND.0, DECAY_BAND.1));
    }
    Ok(ScanReport {
        kind,
        variable: "mu".into(),
        fit: Some(SlopeFit {
            slope,
            half_width: 2.0 * se,
            intercept,
            residuals,
            expected: EXPECTED_DECAY,
            band: DECAY_BAND,
            shift: c1,
            n_points: used.len(),
        }),
        bound_check: Some(BoundCheck { scaled, non_increasing }),
        points,
        band: None,
        skipped: None,
        pass,
        notes,
    })
}

pub(crate) fn check_mu_list(mus: &[f64]) -> Result<()> {
    if mus.len() < 5 {
        return Err(Error::Domain(format!("need at least 5 values of mu, got {}", mus.len())));
    }
    if mus.windows(2).any(|w| !(w[1] > w[0])) || mus[0] <= 0.0 {
        return Err(Error::Domain("mu values must be positive and increasing".into()));
    }
    if mus[mus.len() - 1] / mus[0] < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Domain("mu values must span at least two decades".into()));
    }
    Ok(())
}

/// Remainder norms over `μ` and the fitted decay exponent.
pub fn remainder_decay_scan(problem: &Problem, mus: &[f64], consts: &LowerBoundConstants) -> Result<ScanReport> {
    check_mu_list(mus)?;
    let norms = mus
        .par_iter()
        .map(|&mu| remainder_norm(problem, mu, NORM_ITERS, consts))
        .collect::<Result<Vec<_>>>()?;
    decay_report(ScanKind::ParametrixDecay, mus, &norms, consts.c1_star)
}

#[derive(Debug, Clone, Serialize)]
pub struct NeumannCheck {
    pub terms: usize,
    pub remainder_norm: f64,
    pub deviation: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct Resolvent {
    pub g: State,
    pub residual: f64,
    pub neumann: NeumannCheck,
}

const NEUMANN_TERMS: usize = 10;

/// `g = (μ + H)^{-1} f` by a direct solve, with the parametrix series
/// `Op(p_μ) Σ (−R_μ)^n f` as a cross-check when `‖R_μ‖ < 1`.
pub fn resolvent_apply(problem: &Problem, mu: f64, f: &State, consts: &LowerBoundConstants) -> Result<Resolvent> {
    problem.grid.check_same(f.grid())?;
    let h = problem.hamiltonian_operator(0.0)?;
    let shifted = h.shifted(C64::new(mu, 0.0));
    let (x, info) = linalg::gmres(|v| shifted.apply_vec(v), f.values(), None, 1e-13, 80, 20 * f.values().len() + 200)?;
    let g = State::new(problem.grid, x, f.time())?;
    let p = parametrix_symbol(&symmetrized_symbol(&problem.potentials), mu, consts)?;
    let r = remainder_operator(&h, &p, mu, 0.0)?;
    let rn = norm_of(&r, NORM_ITERS)?.value;
    let neumann = if rn < 1.0 {
        let mut term = f.values().to_vec();
        let mut sum = term.clone();
        for _ in 1..NEUMANN_TERMS {
            term = r.apply_vec(&term).into_iter().map(|z| -z).collect();
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
        }
        let series = quantize_dense(&p, &problem.grid, 0.0)?.apply_vec(&sum);
        let d = linalg::vnorm(&series.iter().zip(g.values()).map(|(a, b)| a - b).collect::<Vec<_>>());
        NeumannCheck { terms: NEUMANN_TERMS, remainder_norm: rn, deviation: Some(d / g.norm().max(1e-300)), diverged: false }
    } else {
        NeumannCheck { terms: NEUMANN_TERMS, remainder_norm: rn, deviation: None, diverged: true }
    };
    Ok(Resolvent { g, residual: info.residual, neumann })
}

/// `X_ε = Op(χ(ε(μ + h)))`.
pub fn cutoff_operator(problem: &Problem, mu: f64, epsilon: f64, t: f64) -> Result<Operator> {
    let chi = cutoff_symbol(&hamiltonian_symbol(&problem.potentials), mu, epsilon, CutoffProfile::Gaussian)?;
    quantize_dense(&chi, &problem.grid, t)
}

/// `Λ = μ + H`.
pub fn lambda_operator(problem: &Problem, mu: f64, t: f64) -> Result<Operator> {
    Ok(problem.hamiltonian_operator(t)?.shifted(C64::new(mu, 0.0)))
}

/// `‖[X_ε, Λ]‖` at `t = 0`.
pub fn commutator_norm(problem: &Problem, mu: f64, epsilon: f64) -> Result<NormValue> {
    let x = to_dense(&cutoff_operator(problem, mu, epsilon, 0.0)?)?;
    let l = to_dense(&lambda_operator(problem, mu, 0.0)?)?;
    let c = &x * &l - &l * &x;
    norm_of(&dense_operator(problem.grid, c)?, NORM_ITERS)
}

fn band_check(eps: &[f64], norms: &[f64]) -> BandCheck {
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = if max <= 1e-12 { 1.0 } else { max / min };
    // order from the largest ε toward 0
    let mut idx: Vec<usize> = (0..eps.len()).collect();
    idx.sort_by(|&a, &b| eps[b].partial_cmp(&eps[a]).unwrap());
    let seq: Vec<f64> = idx.iter().map(|&i| norms[i]).collect();
    let monotone_divergence = max > 1e-12 && seq.windows(2).all(|w| w[1] > w[0]);
    BandCheck { ratio, limit: BAND_RATIO_LIMIT, monotone_divergence }
}

fn check_eps_list(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Domain("epsilon values must lie in (0, 1]".into()));
    }
    Ok(())
}

fn band_report(kind: ScanKind, eps: &[f64], norms: Vec<NormValue>, mut notes: Vec<String>) -> ScanReport {
    let values: Vec<f64> = norms.iter().map(|n| n.value).collect();
    let band = band_check(eps, &values);
    let pass = band.ratio <= band.limit && !band.monotone_divergence;
    if band.ratio > band.limit {
        notes.push(format!("band ratio {:.3} exceeds {}", band.ratio, band.limit));
    }
    if band.monotone_divergence {
        notes.push("norms grow monotonically as epsilon decreases".into());
    }
    if norms.iter().any(|n| !n.converged) {
        notes.push("some norm estimates did not reach the relative-change limit".into());
    }
    ScanReport {
        kind,
        variable: "epsilon".into(),
        points: eps
            .iter()
            .zip(&norms)
            .map(|(&e, n)| ScanPoint { value: e, norm: n.value, converged: n.converged, included: true })
            .collect(),
        fit: None,
        bound_check: None,
        band: Some(band),
        skipped: None,
        pass,
        notes,
    }
}

/// `‖[X_ε, Λ]‖` across `ε` and the band ratio max/min.
pub fn commutator_bound_scan(problem: &Problem, mu: f64, epsilons: &[f64]) -> Result<ScanReport> {
    check_eps_list(epsilons)?;
    let norms = epsilons
        .par_iter()
        .map(|&e| commutator_norm(problem, mu, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(band_report(ScanKind::CommutatorBound, epsilons, norms, vec![format!("mu = {mu}")]))
}

#[derive(Debug, Clone, Serialize)]
pub struct QNorm {
    pub a: i32,
    pub epsilon: f64,
    pub mu: f64,
    pub norm: f64,
    /// For `a = −1`: relative distance between `Q_{−1}` and `−Λ^{-1} Q_1 Λ`.
    pub identity_deviation: Option<f64>,
}

fn dense_inverse(m: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::NoConvergence { what: "dense inverse of Lambda".into(), residual: f64::INFINITY })
}

/// `‖[i∂_t − H̃_ε(t), Λ(t)^a] Λ(t)^{-a}‖` for `a ∈ {−1, 1}` at time `t`.
pub fn q_a_epsilon_norm(problem: &Problem, a: i32, epsilon: f64, mu: f64, t: f64) -> Result<QNorm> {
    if a != 1 && a != -1 {
        return Err(Error::Domain(format!("a must be -1 or 1, got {a}")));
    }
    let grid = problem.grid;
    let lam = to_dense(&lambda_operator(problem, mu, t)?)?;
    let lam_inv = dense_inverse(&lam)?;
    let ldot = to_dense(&quantize(&hamiltonian_time_derivative(&problem.potentials), &grid, t)?)?;
    let he = to_dense(&regularized_operator_with_shift(problem, epsilon, mu, t)?)?;
    let i = C64::new(0.0, 1.0);
    let q1 = (&ldot * i - (&he * &lam - &lam * &he)) * &lam_inv;
    let (q, dev) = if a == 1 {
        (q1, None)
    } else {
        let direct = &lam_inv * &ldot * (-i) - &he + &lam_inv * &he * &lam;
        let conj = -(&lam_inv * &q1 * &lam);
        let scale = linalg::largest_singular_value(&direct).max(1e-300);
        let dev = linalg::largest_singular_value(&(&direct - &conj)) / scale;
        (direct, Some(dev))
    };
    let norm = norm_of(&dense_operator(grid, q)?, NORM_ITERS)?.value;
    Ok(QNorm { a, epsilon, mu, norm, identity_deviation: dev })
}

/// `q_a_epsilon_norm` across `ε` with the same band check as the commutator scan.
pub fn q_epsilon_scan(problem: &Problem, a: i32, mu: f64, epsilons: &[f64]) -> Result<ScanReport> {
    check_eps_list(epsilons)?;
    let qs = epsilons
        .par_iter()
        .map(|&e| q_a_epsilon_norm(problem, a, e, mu, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let norms = qs.iter().map(|q| NormValue { value: q.norm, converged: true, rel_change: 0.0 }).collect();
    Ok(band_report(ScanKind::QEpsilon, epsilons, norms, vec![format!("a = {a}, mu = {mu}")]))
}

/// Default μ: `max(1, 2C1* + C0*/2)` when the fit succeeds.
pub fn default_mu(problem: &Problem) -> Result<f64> {
    Ok(problem_constants(problem)?.default_mu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::gaussian;
    use crate::symbols::{DampingSpec, GrowthClass, PotentialSpec};
    use std::collections::BTreeMap;

    fn problem(v: &str, a: &str, n: usize, l: f64) -> Problem {
        let grid = Grid::new(1, n, l).unwrap();
        let p = PotentialSpec::parse(1, v, &[a], 1.0, &BTreeMap::new()).unwrap();
        let u0 = gaussian(grid, &[0.0], 1.0, &[0.0]);
        Problem::new(p, DampingSpec::zero(1), GrowthClass::a22(0.0, 1.0).unwrap(), grid, u0, 1.0).unwrap()
    }

    fn free_consts() -> LowerBoundConstants {
        LowerBoundConstants { c0_star: 0.5, c1_star: 0.0 }
    }

    #[test]
    fn parametrix_symbol_examples() {
        let p = PotentialSpec::parse(1, "0", &[], 1.0, &BTreeMap::new()).unwrap();
        let hs = symmetrized_symbol(&p);
        let s = parametrix_symbol(&hs, 1.0, &free_consts()).unwrap();
        assert_eq!(s.eval(0.0, &[0.0], &[0.0]), C64::new(1.0, 0.0));
        assert!(parametrix_symbol(&hs, 0.1, &free_consts()).is_err());
        let q = problem("x^2/2", "0.5*x", 64, 8.0);
        let c = problem_constants(&q).unwrap();
        let mu = c.default_mu();
        let s = parametrix_symbol(&symmetrized_symbol(&q.potentials), mu, &c).unwrap();
        let hs = symmetrized_symbol(&q.potentials);
        for x in [-4.0, -1.0, 0.0, 2.0, 5.0] {
            for xi in [-10.0, -1.0, 0.0, 3.0] {
                let p = s.eval(0.0, &[x], &[xi]);
                assert!(p.norm() <= 1.0 / (mu - c.c1_star));
                let re = mu + hs.eval(0.0, &[x], &[xi]).re;
                assert!(re * p.norm_sqr() <= p.norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn free_parametrix_is_exact() {
        let q = problem("0", "0", 64, 8.0);
        for mu in [1.0, 10.0, 1e3] {
            assert!(remainder_norm(&q, mu, 100, &free_consts()).unwrap().value <= 1e-10);
        }
        let r = remainder_decay_scan(&q, &[1.0, 10.0, 100.0, 1e3, 1e4], &free_consts()).unwrap();
        assert!(r.skipped.is_some() && r.pass);
    }

    #[test]
    fn harmonic_remainder_decreases_and_resolvent_agrees() {
        let q = problem("x^2/2", "0", 64, 8.0);
        let c = problem_constants(&q).unwrap();
        let lo = remainder_norm(&q, 1e2, NORM_ITERS, &c).unwrap().value;
        let hi = remainder_norm(&q, 1e4, NORM_ITERS, &c).unwrap().value;
        assert!(hi < lo);
        let f = gaussian(q.grid, &[0.5], 1.0, &[1.0]);
        let r = resolvent_apply(&q, 1e3, &f, &c).unwrap();
        assert!(!r.neumann.diverged);
        assert!(r.neumann.deviation.unwrap() <= 1e-6, "{:?}", r.neumann);
        let back = lambda_operator(&q, 1e3, 0.0).unwrap().apply(&r.g).unwrap();
        assert!(back.minus(&f).unwrap().norm() <= 1e-9 * f.norm());
    }

    #[test]
    fn magnetic_remainder_is_summable_for_large_mu() {
        let q = problem("x^2/2", "0.5*x", 64, 8.0);
        let c = problem_constants(&q).unwrap();
        let r = remainder_norm(&q, 1e4, NORM_ITERS, &c).unwrap();
        assert!(r.value.is_finite() && r.value < 1.0);
    }

    #[test]
    fn free_resolvent_is_multiplier_inversion() {
        let q = problem("0", "0", 64, 8.0);
        let k = 3.0 * q.grid.freq_step();
        let f = State::from_fn(q.grid, |x| C64::from_polar(1.0, k * x[0]));
        let r = resolvent_apply(&q, 2.0, &f, &free_consts()).unwrap();
        let expect = f.scaled(C64::new(1.0 / (2.0 + k * k / 2.0), 0.0));
        let err = r.g.values().iter().zip(expect.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-12);
    }

    #[test]
    fn commutator_examples() {
        let q = problem("x^2/2", "0.5*x", 32, 6.0);
        let mu = 4.0;
        let single = commutator_norm(&q, mu, 1.0).unwrap().value;
        let x = to_dense(&cutoff_operator(&q, mu, 1.0, 0.0).unwrap()).unwrap();
        let l = to_dense(&lambda_operator(&q, mu, 0.0).unwrap()).unwrap();
        let exact = linalg::largest_singular_value(&(&x * &l - &l * &x));
        assert!((single - exact).abs() <= 1e-6 * exact);
        let free = problem("0", "0", 32, 6.0);
        assert!(commutator_norm(&free, 1.0, 0.5).unwrap().value <= 1e-9);
        let scan = commutator_bound_scan(&q, mu, &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(scan.points.len(), 3);
        assert!(scan.band.unwrap().ratio >= 1.0);
    }

    #[test]
    fn q_examples() {
        let free = problem("0", "0", 32, 6.0);
        let q = q_a_epsilon_norm(&free, 1, 0.5, 1.0, 0.0).unwrap();
        assert!(q.norm <= 1e-9, "{}", q.norm);
        let mag = problem("x^2/2", "0.5*x", 32, 6.0);
        let q1 = q_a_epsilon_norm(&mag, 1, 0.5, 4.0, 0.0).unwrap();
        assert!(q1.norm.is_finite() && q1.norm > 0.0);
        let qm = q_a_epsilon_norm(&mag, -1, 0.5, 4.0, 0.0).unwrap();
        assert!(qm.identity_deviation.unwrap() <= 1e-6);
        assert!(q_a_epsilon_norm(&mag, 2, 0.5, 4.0, 0.0).is_err());
    }

    #[test]
    fn scan_inputs_are_validated() {
        let q = problem("x^2/2", "0", 32, 6.0);
        let c = problem_constants(&q).unwrap();
        assert!(remainder_decay_scan(&q, &[1e2, 1e3, 1e4], &c).is_err());
        assert!(remainder_decay_scan(&q, &[1e2, 2e2, 3e2, 4e2, 5e2], &c).is_err());
        assert!(commutator_bound_scan(&q, 2.0, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn band_check_flags_divergence() {
        let b = band_check(&[1.0, 0.5, 0.25], &[1.0, 2.0, 4.0]);
        assert!(b.monotone_divergence && b.ratio == 4.0);
        let b = band_check(&[1.0, 0.5, 0.25], &[2.0, 1.0, 1.5]);
        assert!(!b.monotone_divergence);
        let b = band_check(&[1.0, 0.5], &[0.0, 0.0]);
        assert_eq!(b.ratio, 1.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn resolvent_inverts_shifted_hamiltonian(c in 0.2f64..2.0, shift in 0.0f64..50.0, seed in 0u64..100) {
            let q = problem(&format!("{c}*x^2"), "0", 32, 6.0);
            let consts = problem_constants(&q).unwrap();
            let mu = consts.mu_floor() + 1.0 + shift;
            let f = crate::field::random_packet_state(q.grid, seed);
            let r = resolvent_apply(&q, mu, &f, &consts).unwrap();
            let back = lambda_operator(&q, mu, 0.0).unwrap().apply(&r.g).unwrap();
            proptest::prop_assert!(back.minus(&f).unwrap().norm() <= 1e-9 * f.norm());
        }

        #[test]
        fn commutator_is_antisymmetric_in_order(eps in 0.05f64..1.0) {
            let q = problem("x^2/2", "0.5*x", 16, 5.0);
            let x = to_dense(&cutoff_operator(&q, 3.0, eps, 0.0).unwrap()).unwrap();
            let l = to_dense(&lambda_operator(&q, 3.0, 0.0).unwrap()).unwrap();
            let a = linalg::largest_singular_value(&(&x * &l - &l * &x));
            let b = commutator_norm(&q, 3.0, eps).unwrap().value;
            proptest::prop_assert!((a - b).abs() <= 1e-6 * a.max(1e-12));
        }
    }
}
