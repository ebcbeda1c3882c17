//! Parameter sensitivity `w = ∂_ρ u`: the inhomogeneous equation
//! `i∂_t w = H̃w + (∂_ρH̃)u`, difference quotients and their convergence.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{propagate, Direction, EvolutionReport, EvolveConfig, Problem, Propagator, Scheme};
use crate::field::{Grid, State};
use crate::quantize::{quantize, Operator};
use crate::stats_fit;
use crate::symbols::{generator_symbol, DampingSpec, Degree, GrowthClass, PhaseFn, PotentialSpec, Role, Symbol};
use crate::wsnorm::{sobolev_norm_unguarded, BoundaryGuard};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Closed forms: overrides when given, symbolic differentiation otherwise.
    #[default]
    ClosedForm,
    /// Central differences in ρ with step `1e-5·(1+|ρ|)`.
    FiniteDifference,
}

/// Closed-form `∂_ρV`, `∂_ρA`, `∂_ρk` supplied by the user.
#[derive(Debug, Clone, Default)]
pub struct DerivativeOverrides {
    pub dv: Option<PhaseFn>,
    pub da: Option<Vec<PhaseFn>>,
    pub dk: Option<PhaseFn>,
}

/// A problem whose potentials depend on a named parameter `ρ ∈ [lo, hi]`.
#[derive(Debug, Clone)]
pub struct ParametrizedFamily {
    pub potentials: PotentialSpec,
    pub damping: DampingSpec,
    pub growth: GrowthClass,
    pub grid: Grid,
    pub u0: State,
    pub horizon: f64,
    pub param: String,
    pub interval: (f64, f64),
    pub overrides: DerivativeOverrides,
    pub mode: DerivativeMode,
}

impl ParametrizedFamily {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        potentials: PotentialSpec,
        damping: DampingSpec,
        growth: GrowthClass,
        grid: Grid,
        u0: State,
        horizon: f64,
        param: &str,
        interval: (f64, f64),
    ) -> Result<ParametrizedFamily> {
        if !(interval.0 < interval.1) {
            return Err(Error::Domain(format!("empty parameter interval [{}, {}]", interval.0, interval.1)));
        }
        let fam = ParametrizedFamily {
            potentials,
            damping,
            growth,
            grid,
            u0,
            horizon,
            param: param.to_string(),
            interval,
            overrides: DerivativeOverrides::default(),
            mode: DerivativeMode::ClosedForm,
        };
        fam.at(0.5 * (interval.0 + interval.1))?;
        Ok(fam)
    }

    pub fn with_overrides(mut self, o: DerivativeOverrides) -> Self {
        self.overrides = o;
        self
    }

    pub fn with_mode(mut self, mode: DerivativeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn contains(&self, rho: f64) -> bool {
        rho >= self.interval.0 && rho <= self.interval.1
    }

    fn check(&self, rho: f64) -> Result<()> {
        if self.contains(rho) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "parameter {rho} outside [{}, {}]",
                self.interval.0, self.interval.1
            )))
        }
    }

    /// The problem at `ρ`.
    pub fn at(&self, rho: f64) -> Result<Problem> {
        self.check(rho)?;
        Problem::new(
            self.potentials.with_param(&self.param, rho),
            self.damping.with_param(&self.param, rho),
            self.growth,
            self.grid,
            self.u0.clone(),
            self.horizon,
        )
    }

    pub fn depends_on_param(&self) -> bool {
        self.potentials.has_param(&self.param) || self.damping.k.has_param(&self.param)
    }
}

#[derive(Debug, Clone)]
pub struct DparSymbol {
    pub symbol: Symbol,
    pub finite_difference: bool,
    pub zero: bool,
}

fn closed_derivative(f: &PhaseFn, name: &str, rho: f64, over: Option<&PhaseFn>) -> PhaseFn {
    if let Some(o) = over {
        return o.with_param(name, rho);
    }
    if !f.has_param(name) {
        return PhaseFn::zero();
    }
    match f.partial_param(name) {
        Some(d) => d.with_param(name, rho),
        None => PhaseFn::zero(),
    }
}

pub const FD_PARAM_STEP: f64 = 1e-5;

/// `∂_ρh̃ = −(ξ − A)·∂_ρA/m + ∂_ρV − i∂_ρk` at `ρ`.
pub fn dpar_symbol(fam: &ParametrizedFamily, rho: f64) -> Result<DparSymbol> {
    fam.check(rho)?;
    let name = fam.param.as_str();
    let dim = fam.grid.dim();
    if !fam.depends_on_param() && fam.overrides.dv.is_none() && fam.overrides.da.is_none() && fam.overrides.dk.is_none()
    {
        return Ok(DparSymbol { symbol: Symbol::constant(dim, C64::new(0.0, 0.0)), finite_difference: false, zero: true });
    }
    match fam.mode {
        DerivativeMode::FiniteDifference => {
            let s = FD_PARAM_STEP * (1.0 + rho.abs());
            let up = generator_symbol(&fam.potentials.with_param(name, rho + s), Some(&fam.damping.with_param(name, rho + s)));
            let dn = generator_symbol(&fam.potentials.with_param(name, rho - s), Some(&fam.damping.with_param(name, rho - s)));
            let degree = up.degree();
            let symbol = Symbol::new(dim, degree, Role::Other("dpar_fd".into()), move |t, x, xi| {
                (up.eval(t, x, xi) - dn.eval(t, x, xi)) / (2.0 * s)
            });
            Ok(DparSymbol { symbol, finite_difference: true, zero: false })
        }
        DerivativeMode::ClosedForm => {
            let p = fam.potentials.with_param(name, rho);
            let dv = closed_derivative(&fam.potentials.v, name, rho, fam.overrides.dv.as_ref());
            let da: Vec<PhaseFn> = match &fam.overrides.da {
                Some(v) if v.len() == dim => v.iter().map(|f| f.with_param(name, rho)).collect(),
                Some(v) => {
                    return Err(Error::MissingDerivative(format!("{} vector potential derivatives for dimension {dim}", v.len())))
                }
                None => fam.potentials.a.iter().map(|f| closed_derivative(f, name, rho, None)).collect(),
            };
            let dk = closed_derivative(&fam.damping.k, name, rho, fam.overrides.dk.as_ref());
            let zero = dv.is_zero() && da.iter().all(|f| f.is_zero()) && dk.is_zero();
            let degree = if dk.is_zero() { Degree::Poly(1) } else { Degree::Poly(1).max(dk.xi_degree(dim)) };
            let mass = p.mass;
            let symbol = Symbol::new(dim, degree, Role::Other("dpar".into()), move |t, x, xi| {
                let mut re = dv.eval(t, x, xi);
                for j in 0..dim {
                    let daj = da[j].eval(t, x, xi);
                    if daj != 0.0 {
                        re -= (xi[j] - p.a[j].eval(t, x, xi)) * daj / mass;
                    }
                }
                C64::new(re, -dk.eval(t, x, xi))
            });
            Ok(DparSymbol { symbol, finite_difference: false, zero })
        }
    }
}

#[derive(Debug, Clone)]
pub struct DparOperator {
    pub op: Operator,
    pub finite_difference: bool,
}

/// Quantization of `∂_ρh̃` at `(t, ρ)`.
pub fn dpar_operator(fam: &ParametrizedFamily, rho: f64, t: f64) -> Result<DparOperator> {
    let d = dpar_symbol(fam, rho)?;
    let op = if d.zero { Operator::zero(fam.grid).at_time(t) } else { quantize(&d.symbol, &fam.grid, t)? };
    Ok(DparOperator { op, finite_difference: d.finite_difference })
}

/// Trajectory of `w` on the same time lattice as `u`.
#[derive(Debug, Clone, Serialize)]
pub struct SensitivityTrajectory {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub finite_difference: bool,
    #[serde(skip)]
    pub states: Vec<State>,
}

/// Solves `(I + iδH̃)w_{n+1} = (I − iδH̃)w_n − i·dt·B(u_n + u_{n+1})/2` from
/// `w(0) = 0`, with `δ = dt/2` and `H̃`, `B = Op(∂_ρh̃)` at the step midpoint.
pub fn solve_sensitivity(
    fam: &ParametrizedFamily,
    rho: f64,
    u: &EvolutionReport,
    cfg: &EvolveConfig,
) -> Result<SensitivityTrajectory> {
    if cfg.scheme != Scheme::CrankNicolson {
        return Err(Error::Domain("the sensitivity equation is solved with Crank-Nicolson".into()));
    }
    if u.stride != 1 || u.states.len() != u.steps + 1 {
        return Err(Error::Domain("sensitivity needs the forward trajectory at every step".into()));
    }
    let problem = fam.at(rho)?;
    let grid = fam.grid;
    let dt = u.dt;
    let dpar0 = dpar_symbol(fam, rho)?;
    let fd = dpar0.finite_difference;
    let mut states = vec![State::zeros(grid)];
    let mut times = vec![u.times[0]];
    if dpar0.zero {
        for k in 1..=u.steps {
            states.push(State::zeros(grid).with_time(u.times[k]));
            times.push(u.times[k]);
        }
        let norms = vec![0.0; states.len()];
        return Ok(SensitivityTrajectory { times, norms, finite_difference: fd, states });
    }
    let time_dependent = problem.potentials.time_dependent() || problem.damping.k.depends_on_t();
    let frozen_b = if time_dependent { None } else { Some(quantize(&dpar0.symbol, &grid, 0.0)?) };
    let mut prop = Propagator::new(&problem, Scheme::CrankNicolson, dt, Direction::Forward);
    let mut w = vec![C64::new(0.0, 0.0); grid.len()];
    let coef = C64::new(0.0, -dt);
    for k in 0..u.steps {
        let t = u.times[k];
        let b = match &frozen_b {
            Some(b) => b.clone(),
            None => quantize(&dpar0.symbol, &grid, t + 0.5 * dt)?,
        };
        let mid: Vec<C64> = u.states[k]
            .values()
            .iter()
            .zip(u.states[k + 1].values())
            .map(|(a, c)| 0.5 * (a + c))
            .collect();
        let source: Vec<C64> = b.apply_vec(&mid).into_iter().map(|z| coef * z).collect();
        w = prop.advance_with_source(&w, t, &source)?;
        states.push(State::new(grid, w.clone(), u.times[k + 1])?);
        times.push(u.times[k + 1]);
    }
    let norms = states.iter().map(|s| s.norm()).collect();
    Ok(SensitivityTrajectory { times, norms, finite_difference: fd, states })
}

fn forward_config(cfg: &EvolveConfig) -> EvolveConfig {
    let mut c = cfg.clone();
    c.stride = 1;
    c.keep_states = true;
    c.levels = Vec::new();
    c
}

/// `(u(t; ρ+τ) − u(t; ρ)) / τ` at every step.
pub fn difference_quotient(fam: &ParametrizedFamily, rho: f64, tau: f64, cfg: &EvolveConfig) -> Result<Vec<State>> {
    if tau == 0.0 {
        return Err(Error::Domain("tau must be nonzero".into()));
    }
    let (p0, p1) = (fam.at(rho)?, fam.at(rho + tau)?);
    let c = forward_config(cfg);
    let (a, b) = rayon::join(|| propagate(&p0, &c), || propagate(&p1, &c));
    let (a, b) = (a?, b?);
    a.states
        .iter()
        .zip(&b.states)
        .map(|(u0, u1)| Ok(u1.minus(u0)?.scaled(C64::new(1.0 / tau, 0.0))))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub rho: f64,
    pub taus: Vec<f64>,
    /// `max_t ‖w_τ(t) − w(t)‖` per τ.
    pub errors: Vec<f64>,
    pub ratios: Vec<f64>,
    pub order: f64,
    pub monotone: bool,
    pub at_rounding_floor: bool,
    pub pass: bool,
    pub finite_difference: bool,
    pub level: (i32, f64),
    /// `max_t ‖w(t)‖_{a,M} / ‖u₀‖_{a+1,M}`.
    pub sensitivity_bound_ratio: f64,
    pub max_w_norm: f64,
}

const ROUNDING_FLOOR: f64 = 1e-10;

/// Difference quotients against the sensitivity solution for a geometric
/// sequence of `τ`.
pub fn convergence_study(
    fam: &ParametrizedFamily,
    rho: f64,
    taus: &[f64],
    cfg: &EvolveConfig,
    level: (i32, f64),
) -> Result<RateReport> {
    if taus.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 values of tau, got {}", taus.len())));
    }
    let q = taus[1] / taus[0];
    if taus.windows(2).any(|w| ((w[1] / w[0]) - q).abs() > 1e-9 * q.abs()) || !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain("taus must form a decreasing geometric progression".into()));
    }
    if level.0 < 0 {
        return Err(Error::Domain(format!("bound ratio needs a >= 0, got {}", level.0)));
    }
    let problem = fam.at(rho)?;
    let c = forward_config(cfg);
    let u = propagate(&problem, &c)?;
    let w = solve_sensitivity(fam, rho, &u, &c)?;
    let errors = taus
        .par_iter()
        .map(|&tau| {
            let wt = difference_quotient(fam, rho, tau, cfg)?;
            let mut e: f64 = 0.0;
            for (a, b) in wt.iter().zip(&w.states) {
                e = e.max(a.minus(b)?.norm());
            }
            Ok(e)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = errors.windows(2).map(|e| e[1] / e[0]).collect();
    let at_floor = errors.iter().all(|&e| e <= ROUNDING_FLOOR);
    let order = if at_floor {
        f64::NAN
    } else {
        let lx: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).collect();
        stats_fit(&lx, &ly).0
    };
    let monotone = errors.windows(2).all(|e| e[1] < e[0]);
    let (a, m) = level;
    let guard = BoundaryGuard::default();
    guard.check(&fam.u0)?;
    let denom = sobolev_norm_unguarded(&fam.u0, (a + 1) as usize, m);
    let max_w = w.states.iter().map(|s| sobolev_norm_unguarded(s, a as usize, m)).fold(0.0, f64::max);
    Ok(RateReport {
        rho,
        taus: taus.to_vec(),
        errors,
        ratios,
        order,
        monotone,
        at_rounding_floor: at_floor,
        pass: at_floor || order >= 0.9,
        finite_difference: w.finite_difference,
        level,
        sensitivity_bound_ratio: max_w / denom,
        max_w_norm: w.norms.iter().cloned().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::OperatorGenerator;
    use crate::field::gaussian;
    use crate::linalg;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn family(v: &str, a: &str, k: &str, rho: f64) -> ParametrizedFamily {
        let grid = Grid::new(1, 64, 10.0).unwrap();
        let mut b = BTreeMap::new();
        b.insert("rho".to_string(), rho);
        let p = PotentialSpec::parse(1, v, &[a], 1.0, &b).unwrap();
        let d = DampingSpec::parse(1, k, &b).unwrap();
        let u0 = gaussian(grid, &[0.5], 1.0, &[0.5]);
        ParametrizedFamily::new(p, d, GrowthClass::a21(), grid, u0, 0.5, "rho", (0.5, 1.5)).unwrap()
    }

    fn probe(grid: Grid) -> Vec<C64> {
        gaussian(grid, &[0.3], 1.3, &[0.7]).into_values()
    }

    #[test]
    fn dpar_examples() {
        let f = family("rho*x^2", "0", "0", 1.0);
        let d = dpar_operator(&f, 1.0, 0.0).unwrap();
        let v = probe(f.grid);
        let expect = Operator::multiply_fn(f.grid, |x| C64::new(x[0] * x[0], 0.0)).apply_vec(&v);
        assert!(linalg::vnorm(&d.op.apply_vec(&v).iter().zip(&expect).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-12);
        let flat = family("x^2", "0", "0", 1.0);
        assert!(dpar_operator(&flat, 1.0, 0.0).unwrap().op.is_zero());
        let sq = family("rho^2*x^2", "0", "0", 1.0);
        let a = dpar_operator(&sq, 1.0, 0.0).unwrap().op.apply_vec(&v);
        let b = d.op.apply_vec(&v);
        let err = a.iter().zip(&b).map(|(x, y)| (x - 2.0 * y).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-12);
    }

    #[test]
    fn finite_difference_mode_is_flagged_and_close() {
        let f = family("rho^2*x^2/2", "0.1*rho*cos(x)", "0.2*rho*x^2", 1.0);
        let closed = dpar_operator(&f, 1.0, 0.0).unwrap();
        let fd = dpar_operator(&f.clone().with_mode(DerivativeMode::FiniteDifference), 1.0, 0.0).unwrap();
        assert!(!closed.finite_difference && fd.finite_difference);
        let v = probe(f.grid);
        let (a, b) = (closed.op.apply_vec(&v), fd.op.apply_vec(&v));
        let rel = linalg::vnorm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>()) / linalg::vnorm(&a);
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn independent_family_has_zero_sensitivity() {
        let f = family("x^2/2", "0", "0", 1.0);
        let cfg = EvolveConfig::new(1e-2);
        let r = convergence_study(&f, 1.0, &[1e-2, 5e-3, 2.5e-3], &cfg, (0, 0.0)).unwrap();
        assert!(r.errors.iter().all(|&e| e <= 1e-12));
        assert!(r.pass && r.at_rounding_floor);
        assert_eq!(r.max_w_norm, 0.0);
    }

    #[test]
    fn constant_source_with_zero_generator() {
        // H̃ = 0 and ∂_ρH̃ = c give w(t) = −i c t u₀
        let grid = Grid::new(1, 32, 6.0).unwrap();
        let u0 = gaussian(grid, &[0.0], 1.0, &[0.0]);
        let c = C64::new(0.7, 0.0);
        let gen = OperatorGenerator::new(Operator::zero(grid), 0.0);
        let dt = 0.05;
        let mut prop = Propagator::new(&gen, Scheme::CrankNicolson, dt, Direction::Forward);
        let mut w = vec![C64::new(0.0, 0.0); grid.len()];
        for k in 0..20 {
            let src: Vec<C64> = u0.values().iter().map(|z| C64::new(0.0, -dt) * c * z).collect();
            w = prop.advance_with_source(&w, k as f64 * dt, &src).unwrap();
        }
        let expect: Vec<C64> = u0.values().iter().map(|z| C64::new(0.0, -1.0) * c * z).collect();
        assert!(linalg::vnorm(&w.iter().zip(&expect).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-13);
    }

    #[test]
    fn linear_damping_family_matches_quotient() {
        // w is the exact derivative of the discrete solution; the quotient error is O(τ)
        let f = family("x^2/2", "0", "rho*0.3*x^2/(1+x^2)", 1.0);
        let cfg = EvolveConfig::new(1e-2);
        let r = convergence_study(&f, 1.0, &[1e-2, 5e-3, 2.5e-3], &cfg, (0, 0.0)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.monotone);
    }

    #[test]
    fn quadratic_family_halves() {
        let f = family("rho^2*x^2/2", "0", "0", 1.0);
        let cfg = EvolveConfig::new(1e-2);
        let r = convergence_study(&f, 1.0, &[1e-2, 5e-3, 2.5e-3], &cfg, (1, 0.0)).unwrap();
        for q in &r.ratios {
            assert!((0.4..=0.6).contains(q), "{:?}", r.ratios);
        }
        assert!(r.sensitivity_bound_ratio.is_finite() && r.sensitivity_bound_ratio > 0.0);
    }

    #[test]
    fn parameter_must_stay_in_interval() {
        let f = family("rho*x^2", "0", "0", 1.0);
        assert!(difference_quotient(&f, 1.4, 0.2, &EvolveConfig::new(0.1)).is_err());
        assert!(convergence_study(&f, 1.0, &[1e-2, 5e-3], &EvolveConfig::new(0.1), (0, 0.0)).is_err());
    }

    #[test]
    fn sensitivity_solves_its_own_scheme() {
        let f = family("rho^2*x^2/2", "0.2*rho*sin(x)", "0", 1.0);
        let p = f.at(1.0).unwrap();
        let cfg = EvolveConfig::new(1e-2).keep_states(true);
        let u = propagate(&p, &cfg).unwrap();
        let w = solve_sensitivity(&f, 1.0, &u, &cfg).unwrap();
        assert_eq!(w.norms[0], 0.0);
        let h = crate::evolve::Generator::operator(&p, 0.0).unwrap();
        let b = dpar_operator(&f, 1.0, 0.0).unwrap().op;
        let dt = u.dt;
        let i = C64::new(0.0, 1.0);
        for k in 0..u.steps {
            let (w0, w1) = (w.states[k].values(), w.states[k + 1].values());
            let hw0 = h.apply_vec(w0);
            let hw1 = h.apply_vec(w1);
            let mid: Vec<C64> = u.states[k].values().iter().zip(u.states[k + 1].values()).map(|(a, c)| 0.5 * (a + c)).collect();
            let bu = b.apply_vec(&mid);
            let res: Vec<C64> = (0..w0.len())
                .map(|j| w1[j] + i * 0.5 * dt * hw1[j] - w0[j] + i * 0.5 * dt * hw0[j] + i * dt * bu[j])
                .collect();
            assert!(linalg::vnorm(&res) <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn continuity_in_parameter(c in 0.2f64..1.0) {
            let f = family(&format!("rho*{c}*x^2"), "0", "0", 1.0);
            let cfg = EvolveConfig::new(2e-2).keep_states(true).guard(None);
            let base = propagate(&f.at(1.0).unwrap(), &cfg).unwrap();
            let mut last = f64::INFINITY;
            for j in 1..5 {
                let tau = 0.25 * 0.5f64.powi(j);
                let r = propagate(&f.at(1.0 + tau).unwrap(), &cfg).unwrap();
                let d = r.states.iter().zip(&base.states).map(|(a, b)| a.minus(b).unwrap().norm()).fold(0.0, f64::max);
                prop_assert!(d < last);
                last = d;
            }
        }
    }
}
