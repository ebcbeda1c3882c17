//! Time propagation of `i∂_t u = (H(t) − iK(t))u`, backward adjoint runs
//! and the pairing between them.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{inner_product, Grid, State};
use crate::linalg;
use crate::quantize::{garding_floor, quantize, quantize_dense, to_dense, Operator};
use crate::stats_fit;
use crate::symbols::{
    cutoff_symbol, damping_symbol, generator_symbol, hamiltonian_symbol, CutoffProfile, DampingSpec, GrowthClass,
    PotentialSpec,
};
use crate::wsnorm::{dual_norm_with, lambda_m_operator, sobolev_norm_unguarded, BoundaryGuard, LambdaM, NormSpec};
use crate::C64;

/// Time-dependent generator `H̃(t)` on a grid.
pub trait Generator: Send + Sync {
    fn grid(&self) -> &Grid;
    fn operator(&self, t: f64) -> Result<Operator>;
    fn time_dependent(&self) -> bool;
    /// Smallest eigenvalue of the Hermitian part of the damping at `t`.
    fn damping_floor(&self, t: f64) -> Result<f64>;
}

/// A fixed operator used as a time-independent generator.
#[derive(Debug, Clone)]
pub struct OperatorGenerator {
    op: Operator,
    floor: f64,
}

impl OperatorGenerator {
    /// `floor` is the damping floor reported for the growth bound.
    pub fn new(op: Operator, floor: f64) -> OperatorGenerator {
        OperatorGenerator { op, floor }
    }
}

impl Generator for OperatorGenerator {
    fn grid(&self) -> &Grid {
        self.op.grid()
    }

    fn operator(&self, t: f64) -> Result<Operator> {
        Ok(self.op.clone().at_time(t))
    }

    fn time_dependent(&self) -> bool {
        false
    }

    fn damping_floor(&self, _t: f64) -> Result<f64> {
        Ok(self.floor)
    }
}

/// Cauchy problem data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub potentials: PotentialSpec,
    pub damping: DampingSpec,
    pub growth: GrowthClass,
    pub grid: Grid,
    pub u0: State,
    pub horizon: f64,
}

impl Problem {
    pub fn new(
        potentials: PotentialSpec,
        damping: DampingSpec,
        growth: GrowthClass,
        grid: Grid,
        u0: State,
        horizon: f64,
    ) -> Result<Problem> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if potentials.dim != grid.dim() || damping.dim != grid.dim() {
            return Err(Error::GridMismatch("potentials and grid differ in dimension".into()));
        }
        grid.check_same(u0.grid())?;
        BoundaryGuard::default().check(&u0)?;
        Ok(Problem { potentials, damping, growth, grid, u0, horizon })
    }

    pub fn damping_operator(&self, t: f64) -> Result<Operator> {
        if self.damping.is_zero() {
            return Ok(Operator::zero(self.grid).at_time(t));
        }
        quantize(&damping_symbol(&self.damping), &self.grid, t)
    }

    pub fn hamiltonian_operator(&self, t: f64) -> Result<Operator> {
        quantize(&hamiltonian_symbol(&self.potentials), &self.grid, t)
    }
}

impl Generator for Problem {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn operator(&self, t: f64) -> Result<Operator> {
        quantize(&generator_symbol(&self.potentials, Some(&self.damping)), &self.grid, t)
    }

    fn time_dependent(&self) -> bool {
        self.potentials.time_dependent() || self.damping.k.depends_on_t()
    }

    fn damping_floor(&self, t: f64) -> Result<f64> {
        if self.damping.is_zero() {
            return Ok(0.0);
        }
        Ok(garding_floor(&self.damping_operator(t)?)?.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    CrankNicolson,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    BackwardAdjoint,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolveConfig {
    pub scheme: Scheme,
    pub dt: f64,
    /// `(a, M)` pairs monitored along the run.
    pub levels: Vec<(i32, f64)>,
    pub stride: usize,
    pub growth_tol: f64,
    pub keep_states: bool,
    pub guard: Option<BoundaryGuard>,
}

impl EvolveConfig {
    pub fn new(dt: f64) -> EvolveConfig {
        EvolveConfig {
            scheme: Scheme::CrankNicolson,
            dt,
            levels: Vec::new(),
            stride: 1,
            growth_tol: 1e-4,
            keep_states: false,
            guard: Some(BoundaryGuard::default()),
        }
    }

    pub fn scheme(mut self, s: Scheme) -> Self {
        self.scheme = s;
        self
    }

    pub fn levels(mut self, levels: Vec<(i32, f64)>) -> Self {
        self.levels = levels;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn keep_states(mut self, keep: bool) -> Self {
        self.keep_states = keep;
        self
    }

    pub fn guard(mut self, guard: Option<BoundaryGuard>) -> Self {
        self.guard = guard;
        self
    }

    fn validate(&self, horizon: f64) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if self.dt > horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("dt {} exceeds the horizon {horizon}", self.dt)));
        }
        if self.stride == 0 {
            return Err(Error::Domain("record stride must be at least 1".into()));
        }
        Ok(((horizon / self.dt) - 1e-9).ceil().max(1.0) as usize)
    }
}

const DENSE_STEP_LIMIT: usize = 512;
const DENSE_TIME_DEPENDENT_LIMIT: usize = 128;
const GMRES_TOL: f64 = 1e-13;
const BLOWUP_FACTOR: f64 = 10.0;

enum Cached {
    Dense { prop: DMatrix<C64>, lu: LU<C64, Dyn, Dyn> },
    Op(Operator),
}

/// One-step map for a generator, forward in time or backward for the
/// adjoint equation `i∂_t v = H̃(t)† v`.
pub struct Propagator<'a> {
    generator: &'a dyn Generator,
    scheme: Scheme,
    dt: f64,
    direction: Direction,
    cached: Option<Cached>,
    pub solver: &'static str,
    pub max_residual: f64,
}

impl<'a> Propagator<'a> {
    pub fn new(generator: &'a dyn Generator, scheme: Scheme, dt: f64, direction: Direction) -> Propagator<'a> {
        Propagator { generator, scheme, dt, direction, cached: None, solver: "", max_residual: 0.0 }
    }

    fn sign(&self) -> f64 {
        match self.direction {
            Direction::Forward => 1.0,
            Direction::BackwardAdjoint => -1.0,
        }
    }

    fn op_at(&self, t: f64) -> Result<Operator> {
        let op = self.generator.operator(t)?;
        Ok(match self.direction {
            Direction::Forward => op,
            Direction::BackwardAdjoint => op.adjoint(),
        })
    }

    /// State at `t + dt` (forward) or `t − dt` (backward) from `y` at `t`.
    pub fn advance(&mut self, y: &[C64], t: f64) -> Result<Vec<C64>> {
        match self.scheme {
            Scheme::CrankNicolson => self.cn(y, t, None),
            Scheme::Rk4 => self.rk4(y, t),
        }
    }

    /// Crank–Nicolson step with an extra right-hand side:
    /// `(I + iδG)x = (I − iδG)y + source`.
    pub fn advance_with_source(&mut self, y: &[C64], t: f64, source: &[C64]) -> Result<Vec<C64>> {
        if self.scheme != Scheme::CrankNicolson {
            return Err(Error::Domain("inhomogeneous steps need the Crank-Nicolson scheme".into()));
        }
        self.cn(y, t, Some(source))
    }

    fn cn(&mut self, y: &[C64], t: f64, source: Option<&[C64]>) -> Result<Vec<C64>> {
        let len = y.len();
        let h = self.sign() * self.dt;
        let delta = C64::new(0.0, 0.5 * h);
        let tm = t + 0.5 * h;
        let frozen = !self.generator.time_dependent();
        if frozen && len <= DENSE_STEP_LIMIT || !frozen && len <= DENSE_TIME_DEPENDENT_LIMIT {
            if !frozen || self.cached.is_none() {
                let g = to_dense(&self.op_at(tm)?)?;
                let id = DMatrix::<C64>::identity(len, len);
                let lu = (&id + &g * delta).lu();
                let prop = lu
                    .solve(&(&id - &g * delta))
                    .ok_or_else(|| Error::NoConvergence { what: "Crank-Nicolson factorization".into(), residual: f64::INFINITY })?;
                self.cached = Some(Cached::Dense { prop, lu });
                self.solver = "dense-propagator";
            }
            if let Some(Cached::Dense { prop, lu }) = &self.cached {
                let mut x = linalg::matvec(prop, y);
                if let Some(s) = source {
                    let v = lu.solve(&DVector::from_column_slice(s)).ok_or_else(|| Error::NoConvergence {
                        what: "Crank-Nicolson source solve".into(),
                        residual: f64::INFINITY,
                    })?;
                    for (a, b) in x.iter_mut().zip(v.iter()) {
                        *a += b;
                    }
                }
                return Ok(x);
            }
        }
        let op = match (&self.cached, frozen) {
            (Some(Cached::Op(op)), true) => op.clone(),
            _ => {
                let op = self.op_at(tm)?;
                if frozen {
                    self.cached = Some(Cached::Op(op.clone()));
                }
                op
            }
        };
        self.solver = "gmres";
        let gy = op.apply_vec(y);
        let mut rhs: Vec<C64> = y.iter().zip(&gy).map(|(a, b)| a - delta * b).collect();
        if let Some(s) = source {
            for (a, b) in rhs.iter_mut().zip(s) {
                *a += b;
            }
        }
        let apply = |v: &[C64]| -> Vec<C64> {
            let gv = op.apply_vec(v);
            v.iter().zip(&gv).map(|(a, b)| a + delta * b).collect()
        };
        let (x, info) = linalg::gmres(apply, &rhs, Some(y), GMRES_TOL, 40, 4000)?;
        self.max_residual = self.max_residual.max(info.residual);
        Ok(x)
    }

    fn rk4(&mut self, y: &[C64], t: f64) -> Result<Vec<C64>> {
        self.solver = "rk4";
        let h = self.sign() * self.dt;
        let frozen = !self.generator.time_dependent();
        if frozen && self.cached.is_none() {
            self.cached = Some(Cached::Op(self.op_at(t)?));
        }
        let op_at = |s: f64| -> Result<Operator> {
            match &self.cached {
                Some(Cached::Op(op)) if frozen => Ok(op.clone()),
                _ => self.op_at(s),
            }
        };
        let mi = C64::new(0.0, -1.0);
        let f = |op: &Operator, v: &[C64]| -> Vec<C64> { op.apply_vec(v).into_iter().map(|z| mi * z).collect() };
        let comb = |v: &[C64], k: &[C64], c: f64| -> Vec<C64> { v.iter().zip(k).map(|(a, b)| a + b * c).collect() };
        let (g0, g1, g2) = (op_at(t)?, op_at(t + 0.5 * h)?, op_at(t + h)?);
        let k1 = f(&g0, y);
        let k2 = f(&g1, &comb(y, &k1, 0.5 * h));
        let k3 = f(&g1, &comb(y, &k2, 0.5 * h));
        let k4 = f(&g2, &comb(y, &k3, h));
        Ok((0..y.len()).map(|i| y[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (h / 6.0)).collect())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSeries {
    pub a: i32,
    pub m: f64,
    pub values: Vec<f64>,
    /// `max_t ‖u(t)‖_{a,M} / ‖u(0)‖_{a,M}`.
    pub fitted_constant: f64,
    /// Least-squares slope of `log ‖u(t)‖_{a,M}` against `t`.
    pub log_slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolutionReport {
    pub direction: Direction,
    pub scheme: Scheme,
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub solver: String,
    pub max_solver_residual: f64,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub levels: Vec<LevelSeries>,
    pub damping_floor: f64,
    /// `C = max(0, −floor)` in `‖u(t)‖ ≤ e^{(C+tol)t}‖u₀‖`.
    pub growth_constant: f64,
    pub growth_tol: f64,
    /// Largest `‖u(t)‖ / (e^{(C+tol)t}‖u₀‖)` over recorded times.
    pub max_growth_ratio: f64,
    pub growth_bound_holds: bool,
    /// Largest increase of `‖u‖` between consecutive recorded times.
    pub max_norm_increase: f64,
    pub max_boundary_mass: f64,
    #[serde(skip)]
    pub states: Vec<State>,
    #[serde(skip)]
    pub final_state: State,
}

impl EvolutionReport {
    /// Largest `|‖u(t)‖/‖u₀‖ − 1|`.
    pub fn max_norm_drift(&self) -> f64 {
        let n0 = self.norms[0];
        self.norms.iter().map(|n| (n / n0 - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::from("t,norm");
        for l in &self.levels {
            header.push_str(&format!(",norm_a{}_m{}", l.a, l.m));
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = format!("{t:.12e},{:.16e}", self.norms[i]);
            for l in &self.levels {
                row.push_str(&format!(",{:.16e}", l.values[i]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

struct Monitor {
    spec: NormSpec,
    lam: Option<LambdaM>,
}

impl Monitor {
    fn new(grid: &Grid, a: i32, m: f64, mass: f64) -> Result<Monitor> {
        let spec = NormSpec::new(a, m)?.with_mass(mass);
        let lam = if a < 0 { Some(lambda_m_operator(grid, &spec)?) } else { None };
        Ok(Monitor { spec, lam })
    }

    fn measure(&self, f: &State) -> Result<f64> {
        match &self.lam {
            Some(lam) => dual_norm_with(lam, f, self.spec.a),
            None => Ok(sobolev_norm_unguarded(f, self.spec.a as usize, self.spec.m)),
        }
    }
}

/// Forward run of a [`Problem`] from its initial datum.
pub fn propagate(problem: &Problem, cfg: &EvolveConfig) -> Result<EvolutionReport> {
    run(problem, &problem.u0, 0.0, problem.horizon, problem.potentials.mass, cfg, Direction::Forward)
}

/// Forward run of any generator.
pub fn propagate_generator(
    generator: &dyn Generator,
    u0: &State,
    horizon: f64,
    cfg: &EvolveConfig,
) -> Result<EvolutionReport> {
    run(generator, u0, 0.0, horizon, 1.0, cfg, Direction::Forward)
}

/// Backward run of `i∂_t v = (H + iK)v` from `v(T) = g`.
pub fn propagate_backward_adjoint(problem: &Problem, g_terminal: &State, cfg: &EvolveConfig) -> Result<EvolutionReport> {
    problem.grid.check_same(g_terminal.grid())?;
    run(problem, g_terminal, problem.horizon, problem.horizon, problem.potentials.mass, cfg, Direction::BackwardAdjoint)
}

pub fn propagate_generator_backward(
    generator: &dyn Generator,
    g_terminal: &State,
    horizon: f64,
    cfg: &EvolveConfig,
) -> Result<EvolutionReport> {
    run(generator, g_terminal, horizon, horizon, 1.0, cfg, Direction::BackwardAdjoint)
}

fn run(
    generator: &dyn Generator,
    start: &State,
    t_start: f64,
    horizon: f64,
    mass: f64,
    cfg: &EvolveConfig,
    direction: Direction,
) -> Result<EvolutionReport> {
    let steps = cfg.validate(horizon)?;
    let dt = horizon / steps as f64;
    let grid = *generator.grid();
    grid.check_same(start.grid())?;
    let monitors = cfg
        .levels
        .iter()
        .map(|&(a, m)| Monitor::new(&grid, a, m, mass))
        .collect::<Result<Vec<_>>>()?;
    let floor = if generator.time_dependent() {
        generator.damping_floor(0.0)?.min(generator.damping_floor(horizon)?)
    } else {
        generator.damping_floor(0.0)?
    };
    let growth = (-floor).max(0.0);
    let mut prop = Propagator::new(generator, cfg.scheme, dt, direction);
    let sign = if direction == Direction::Forward { 1.0 } else { -1.0 };

    let mut times = Vec::new();
    let mut norms = Vec::new();
    let mut level_values: Vec<Vec<f64>> = vec![Vec::new(); monitors.len()];
    let mut states = Vec::new();
    let mut max_boundary: f64 = 0.0;
    let mut record = |step: usize, t: f64, f: &State, states: &mut Vec<State>| -> Result<()> {
        if let Some(g) = &cfg.guard {
            let mass = g.check(f).map_err(|e| match e {
                Error::Boundary { mass, threshold } => Error::BoundaryAtStep { step, t, mass, threshold },
                other => other,
            })?;
            max_boundary = max_boundary.max(mass);
        }
        times.push(t);
        norms.push(f.norm());
        for (i, m) in monitors.iter().enumerate() {
            level_values[i].push(m.measure(f)?);
        }
        if cfg.keep_states {
            states.push(f.clone());
        }
        Ok(())
    };

    let mut u = start.values().to_vec();
    let mut t = t_start;
    record(0, t, &start.clone().with_time(t), &mut states)?;
    let mut prev_norm = linalg::vnorm(&u);
    for k in 1..=steps {
        let next = prop.advance(&u, t)?;
        let n = linalg::vnorm(&next);
        if !n.is_finite() || n > BLOWUP_FACTOR * prev_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::Blowup { step: k, t, factor: n / prev_norm });
        }
        prev_norm = n;
        u = next;
        t = t_start + sign * dt * k as f64;
        if k % cfg.stride == 0 || k == steps {
            let s = State::new(grid, u.clone(), t)?;
            record(k, t, &s, &mut states)?;
        }
    }
    let final_state = State::new(grid, u, t)?;

    let n0 = norms[0];
    let elapsed: Vec<f64> = times.iter().map(|s| (s - t_start).abs()).collect();
    let max_growth_ratio = if n0 > 0.0 {
        norms
            .iter()
            .zip(&elapsed)
            .map(|(n, s)| n / (((growth + cfg.growth_tol) * s).exp() * n0))
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let max_norm_increase = norms.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let levels = cfg
        .levels
        .iter()
        .zip(level_values)
        .map(|(&(a, m), values)| {
            let v0 = values[0];
            let fitted_constant = values.iter().map(|v| v / v0).fold(0.0, f64::max);
            let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
            let log_slope = if values.len() > 1 { stats_fit(&elapsed, &logs).0 } else { 0.0 };
            LevelSeries { a, m, values, fitted_constant, log_slope }
        })
        .collect();
    Ok(EvolutionReport {
        direction,
        scheme: cfg.scheme,
        dt,
        steps,
        stride: cfg.stride,
        solver: prop.solver.to_string(),
        max_solver_residual: prop.max_residual,
        times,
        norms,
        levels,
        damping_floor: floor,
        growth_constant: growth,
        growth_tol: cfg.growth_tol,
        max_growth_ratio,
        growth_bound_holds: direction == Direction::BackwardAdjoint || max_growth_ratio <= 1.0,
        max_norm_increase: if max_norm_increase.is_finite() { max_norm_increase } else { 0.0 },
        max_boundary_mass: max_boundary,
        states,
        final_state,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairingReport {
    pub times: Vec<f64>,
    /// `(u(t), v(t))` as `[re, im]`.
    pub values: Vec<[f64; 2]>,
    pub max_rel_deviation: f64,
}

/// `max_t |(u(t), v(t)) − (u(0), v(0))| / |(u(0), v(0))|`.
pub fn duality_pairing_test(forward: &EvolutionReport, backward: &EvolutionReport) -> Result<PairingReport> {
    if forward.states.is_empty() || backward.states.is_empty() {
        return Err(Error::Domain("pairing needs runs with kept states".into()));
    }
    if forward.states.len() != backward.states.len() {
        return Err(Error::GridMismatch("forward and backward time lattices differ".into()));
    }
    let k = forward.states.len();
    let mut times = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for i in 0..k {
        let u = &forward.states[i];
        let v = &backward.states[k - 1 - i];
        if (u.time() - v.time()).abs() > 1e-9 * (1.0 + u.time().abs()) {
            return Err(Error::GridMismatch(format!("time {} paired with {}", u.time(), v.time())));
        }
        let p = inner_product(u, v)?;
        times.push(u.time());
        values.push(p);
    }
    let reference = values[0];
    if reference.norm() < 1e-12 {
        return Err(Error::Domain(format!("degenerate pairing |(u(0), v(0))| = {:.3e}", reference.norm())));
    }
    let max_rel_deviation = values.iter().map(|p| (p - reference).norm() / reference.norm()).fold(0.0, f64::max);
    Ok(PairingReport { times, values: values.iter().map(|z| [z.re, z.im]).collect(), max_rel_deviation })
}

/// `max(1, 1 − min V(t, ·))` over the grid, so that `μ + h ≥ 1`.
pub fn cutoff_shift(problem: &Problem, t: f64) -> f64 {
    let dim = problem.grid.dim();
    let xi = vec![0.0; dim];
    let vmin = problem
        .grid
        .points()
        .chunks(dim)
        .map(|x| problem.potentials.v.eval(t, x, &xi))
        .fold(f64::INFINITY, f64::min);
    (1.0 - vmin).max(1.0)
}

/// `H̃_ε = X_ε† H̃ X_ε` with `X_ε` the quantized cutoff `χ(ε(μ + h))`.
pub fn regularized_operator(problem: &Problem, epsilon: f64, t: f64) -> Result<Operator> {
    regularized_operator_with_shift(problem, epsilon, cutoff_shift(problem, t), t)
}

/// As [`regularized_operator`] with an explicit shift `μ` in the cutoff.
pub fn regularized_operator_with_shift(problem: &Problem, epsilon: f64, mu: f64, t: f64) -> Result<Operator> {
    let chi = cutoff_symbol(&hamiltonian_symbol(&problem.potentials), mu, epsilon, CutoffProfile::Gaussian)?;
    let x = quantize_dense(&chi, &problem.grid, t)?;
    let h = problem.operator(t)?;
    Ok(x.adjoint().compose(&h).compose(&x))
}
