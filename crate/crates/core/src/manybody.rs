//! Multi-particle generators on a flattened grid: per-particle
//! Hamiltonians and dampings on their own axes plus pair interactions
//! `W_ij(t, x^{(i)} − x^{(j)})`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::calculus::{check_mu_list, decay_report, norm_of, remainder_operator, ScanKind, ScanReport, NORM_ITERS};
use crate::error::{Error, Result};
use crate::evolve::{propagate_generator, EvolutionReport, EvolveConfig, Generator};
use crate::field::{multi_indices, spectral_derivative, Grid, State};
use crate::quantize::{garding_floor, quantize, Operator};
use crate::symbols::{
    bracket, check_growth, damping_symbol, generator_symbol, hamiltonian_symbol, lower_bound_from_values,
    symmetrized_symbol, AssumptionReport, Clause, DampingSpec, Degree, GrowthClass, LowerBoundConstants, PhaseFn,
    PotentialSpec, Role, SampleBox, Symbol, DIVERGENCE_FACTOR,
};
use crate::wsnorm::BoundaryGuard;
use crate::C64;

/// Largest flattened grid accepted.
pub const MAX_POINTS: usize = 1 << 16;
/// Largest flattened grid for the dense parametrix scan.
pub const MB_DENSE_LIMIT: usize = 1024;
/// Derivative orders checked for interactions.
const W_ORDER: usize = 3;

#[derive(Debug, Clone)]
pub struct Particle {
    /// Potentials on `ℝ^d`; the mass is the particle mass.
    pub potentials: PotentialSpec,
    pub damping: DampingSpec,
    pub growth: GrowthClass,
}

impl Particle {
    pub fn new(potentials: PotentialSpec, damping: DampingSpec, growth: GrowthClass) -> Result<Particle> {
        if damping.dim != potentials.dim {
            return Err(Error::Domain("damping and potentials differ in dimension".into()));
        }
        Ok(Particle { potentials, damping, growth })
    }

    /// Weight index `M_k`, zero for the bounded-derivative class.
    pub fn m(&self) -> f64 {
        self.growth.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionClass {
    /// Confining pair term bounded by `<x>^{2(M₀+1)−δ}`.
    W12Type,
    /// Pair term with derivatives bounded by `<x>`.
    Generic,
}

/// `W(t, x)` evaluated at `x = x^{(i)} − x^{(j)}`.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub i: usize,
    pub j: usize,
    pub w: PhaseFn,
    pub class: InteractionClass,
}

#[derive(Debug, Clone)]
pub struct ManyBodyProblem {
    pub particles: Vec<Particle>,
    pub interactions: Vec<Interaction>,
    /// Dimension of each particle's configuration space.
    pub d: usize,
    pub grid: Grid,
    pub horizon: f64,
}

impl ManyBodyProblem {
    pub fn new(
        particles: Vec<Particle>,
        interactions: Vec<Interaction>,
        d: usize,
        n_axis: usize,
        half_width: f64,
        horizon: f64,
    ) -> Result<ManyBodyProblem> {
        let n = particles.len();
        if n < 2 {
            return Err(Error::Domain(format!("need at least two particles, got {n}")));
        }
        if particles.iter().any(|p| p.potentials.dim != d) {
            return Err(Error::GridMismatch(format!("particle dimension differs from d = {d}")));
        }
        for w in &interactions {
            if w.i == w.j || w.i >= n || w.j >= n {
                return Err(Error::Domain(format!("interaction between particles {} and {} is invalid", w.i, w.j)));
            }
            if w.w.depends_on_xi(d) {
                return Err(Error::Domain("interactions must be multiplication operators".into()));
            }
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let total = (n_axis as f64).powi((n * d) as i32);
        if total > MAX_POINTS as f64 {
            return Err(Error::Size(format!("{total} flattened points exceed {MAX_POINTS}")));
        }
        let grid = Grid::new(n * d, n_axis, half_width)?;
        Ok(ManyBodyProblem { particles, interactions, d, grid, horizon })
    }

    pub fn n(&self) -> usize {
        self.particles.len()
    }

    /// Grid of a single particle.
    pub fn particle_grid(&self) -> Grid {
        Grid::new(self.d, self.grid.n(), self.grid.half_width()).expect("validated at construction")
    }

    /// `M₀ = min(M_i, M_j)` for an interaction.
    pub fn m0(&self, w: &Interaction) -> f64 {
        self.particles[w.i].m().min(self.particles[w.j].m())
    }

    pub fn time_dependent(&self) -> bool {
        self.particles.iter().any(|p| p.potentials.time_dependent() || p.damping.k.depends_on_t())
            || self.interactions.iter().any(|w| w.w.depends_on_t())
    }

    fn interaction_values(&self, t: f64) -> Option<Vec<C64>> {
        if self.interactions.iter().all(|w| w.w.is_zero()) {
            return None;
        }
        let d = self.d;
        let dim = self.grid.dim();
        let mut z = vec![0.0; dim];
        let mut rel = vec![0.0; d];
        let vals = (0..self.grid.len())
            .map(|idx| {
                self.grid.point(idx, &mut z);
                let mut s = 0.0;
                for w in &self.interactions {
                    for a in 0..d {
                        rel[a] = z[w.i * d + a] - z[w.j * d + a];
                    }
                    s += w.w.eval(t, &rel, &[]);
                }
                C64::new(s, 0.0)
            })
            .collect();
        Some(vals)
    }

    fn fibered(&self, op: Operator, k: usize) -> Result<Operator> {
        Operator::fiber(op, self.grid, k * self.d)
    }

    fn assemble_with(&self, t: f64, per_particle: impl Fn(&Particle, &Grid) -> Result<Option<Operator>>, pair: bool) -> Result<Operator> {
        let pg = self.particle_grid();
        let mut total = Operator::zero(self.grid).at_time(t);
        for (k, p) in self.particles.iter().enumerate() {
            if let Some(op) = per_particle(p, &pg)? {
                total = total.plus(&self.fibered(op, k)?);
            }
        }
        if pair {
            if let Some(v) = self.interaction_values(t) {
                total = total.plus(&Operator::multiply(self.grid, v)?.at_time(t));
            }
        }
        Ok(total.at_time(t))
    }

    /// `Σ_k (H_k − iK_k) + Σ W_ij`.
    pub fn assemble(&self, t: f64) -> Result<Operator> {
        self.assemble_with(t, |p, g| Ok(Some(quantize(&generator_symbol(&p.potentials, Some(&p.damping)), g, t)?)), true)
    }

    /// `Σ_k H_k + Σ W_ij`.
    pub fn hamiltonian(&self, t: f64) -> Result<Operator> {
        self.assemble_with(t, |p, g| Ok(Some(quantize(&hamiltonian_symbol(&p.potentials), g, t)?)), true)
    }

    /// `Σ_k K_k`.
    pub fn damping(&self, t: f64) -> Result<Operator> {
        self.assemble_with(
            t,
            |p, g| {
                if p.damping.is_zero() {
                    Ok(None)
                } else {
                    Ok(Some(quantize(&damping_symbol(&p.damping), g, t)?))
                }
            },
            false,
        )
    }

    /// Per-particle damping floors; their sum is the floor of `Σ_k K_k`.
    pub fn damping_floors(&self, t: f64) -> Result<Vec<f64>> {
        let pg = self.particle_grid();
        self.particles
            .iter()
            .map(|p| {
                if p.damping.is_zero() {
                    Ok(0.0)
                } else {
                    Ok(garding_floor(&quantize(&damping_symbol(&p.damping), &pg, t)?)?.value)
                }
            })
            .collect()
    }

    /// `ĥ_s(t, z, ζ) = Σ_k h_{s,k}(t, x^{(k)}, ξ^{(k)}) + Σ W_ij`.
    pub fn symmetrized_symbol(&self) -> Symbol {
        let parts: Vec<Symbol> = self.particles.iter().map(|p| symmetrized_symbol(&p.potentials)).collect();
        let pairs = self.interactions.clone();
        let d = self.d;
        Symbol::new(self.grid.dim(), Degree::General, Role::Symmetrized, move |t, z, zeta| {
            let mut s = C64::new(0.0, 0.0);
            for (k, h) in parts.iter().enumerate() {
                s += h.eval(t, &z[k * d..(k + 1) * d], &zeta[k * d..(k + 1) * d]);
            }
            let mut rel = vec![0.0; d];
            for w in &pairs {
                for a in 0..d {
                    rel[a] = z[w.i * d + a] - z[w.j * d + a];
                }
                s += w.w.eval(t, &rel, &[]);
            }
            s
        })
    }

    pub fn phi(&self) -> PhiWeight {
        PhiWeight { d: self.d, exponents: self.particles.iter().map(|p| p.m() + 1.0).collect() }
    }
}

/// Generator view of a many-body problem for [`propagate_generator`].
pub struct ManyBodyGenerator<'a> {
    problem: &'a ManyBodyProblem,
}

impl<'a> ManyBodyGenerator<'a> {
    pub fn new(problem: &'a ManyBodyProblem) -> ManyBodyGenerator<'a> {
        ManyBodyGenerator { problem }
    }
}

impl Generator for ManyBodyGenerator<'_> {
    fn grid(&self) -> &Grid {
        &self.problem.grid
    }

    fn operator(&self, t: f64) -> Result<Operator> {
        self.problem.assemble(t)
    }

    fn time_dependent(&self) -> bool {
        self.problem.time_dependent()
    }

    fn damping_floor(&self, t: f64) -> Result<f64> {
        Ok(self.problem.damping_floors(t)?.iter().sum())
    }
}

/// `Φ(z) = Σ_k <x^{(k)}>^{M_k+1}`.
#[derive(Debug, Clone, Serialize)]
pub struct PhiWeight {
    pub d: usize,
    pub exponents: Vec<f64>,
}

impl PhiWeight {
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.exponents
            .iter()
            .enumerate()
            .map(|(k, e)| bracket(&z[k * self.d..(k + 1) * self.d]).powf(*e))
            .sum()
    }

    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let mut z = vec![0.0; grid.dim()];
        (0..grid.len())
            .map(|i| {
                grid.point(i, &mut z);
                self.eval(&z)
            })
            .collect()
    }
}

/// `‖f‖ + Σ_{|α|≤2a} ‖∂^α f‖ + Σ_k ‖<x^{(k)}>^{2a(M_k+1)} f‖`, or `‖f‖` at `a = 0`.
pub fn bprime_norm(f: &State, problem: &ManyBodyProblem, a: u32) -> Result<f64> {
    problem.grid.check_same(f.grid())?;
    if a > 1 {
        return Err(Error::Domain(format!("level a = {a} not supported; use 0 or 1")));
    }
    BoundaryGuard::default().check(f)?;
    Ok(bprime_unguarded(f, problem, a))
}

fn bprime_unguarded(f: &State, problem: &ManyBodyProblem, a: u32) -> f64 {
    let base = f.norm();
    if a == 0 {
        return base;
    }
    let derivs: f64 = multi_indices(f.grid().dim(), 2 * a as usize)
        .iter()
        .map(|alpha| spectral_derivative(f, alpha).expect("order within limit").norm())
        .sum();
    let d = problem.d;
    let weighted: f64 = problem
        .particles
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let e = 2.0 * a as f64 * (p.m() + 1.0);
            f.multiplied(|z| C64::new(bracket(&z[k * d..(k + 1) * d]).powf(e), 0.0)).norm()
        })
        .sum();
    base + derivs + weighted
}

/// Tensor product of single-particle states.
pub fn product_state(problem: &ManyBodyProblem, factors: &[State]) -> Result<State> {
    if factors.len() != problem.n() {
        return Err(Error::Domain(format!("{} factors for {} particles", factors.len(), problem.n())));
    }
    let pg = problem.particle_grid();
    for f in factors {
        pg.check_same(f.grid())?;
    }
    let d = problem.d;
    let mut m = vec![0; problem.grid.dim()];
    let values = (0..problem.grid.len())
        .map(|idx| {
            problem.grid.unravel(idx, &mut m);
            factors
                .iter()
                .enumerate()
                .map(|(k, f)| f.values()[pg.ravel(&m[k * d..(k + 1) * d])])
                .product()
        })
        .collect();
    State::new(problem.grid, values, 0.0)
}

/// Exchange particles `i` and `j` in a state on the flattened grid.
pub fn swap_particles(f: &State, d: usize, i: usize, j: usize) -> Result<State> {
    let grid = *f.grid();
    let n = grid.dim() / d;
    if grid.dim() % d != 0 || i >= n || j >= n {
        return Err(Error::Domain(format!("cannot swap particles {i} and {j} of {n}")));
    }
    let mut m = vec![0; grid.dim()];
    let values = (0..grid.len())
        .map(|idx| {
            grid.unravel(idx, &mut m);
            for a in 0..d {
                m.swap(i * d + a, j * d + a);
            }
            f.values()[grid.ravel(&m)]
        })
        .collect();
    State::new(grid, values, f.time())
}

#[derive(Debug, Clone, Serialize)]
pub struct InteractionMargin {
    pub i: usize,
    pub j: usize,
    pub m0: f64,
    /// Estimated `δ = 2(M₀+1) − q`, `q` the growth exponent of `|W|` on
    /// the outer shell; `None` when `W` vanishes.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManyBodyAssumptionReport {
    pub particles: Vec<AssumptionReport>,
    pub interactions: Vec<Clause>,
    pub margins: Vec<InteractionMargin>,
    pub pass: bool,
}

impl ManyBodyAssumptionReport {
    pub fn failing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, r) in self.particles.iter().enumerate() {
            out.extend(r.failing().into_iter().map(|c| format!("particle {}: {c}", k + 1)));
        }
        out.extend(self.interactions.iter().filter(|c| !c.pass).map(|c| c.name.clone()));
        out
    }
}

/// Smallest margin treated as positive.
const MARGIN_TOL: f64 = 1e-3;

struct XSample {
    t: f64,
    x: Vec<f64>,
    inner: bool,
}

fn x_samples(d: usize, bx: &SampleBox, n: usize, seed: u64) -> Vec<XSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = if bx.t_max > 0.0 { vec![0.0, 0.5 * bx.t_max, bx.t_max] } else { vec![0.0] };
    let inner = |x: &[f64]| x.iter().all(|v| v.abs() <= 0.5 * bx.x_half);
    let mut out = Vec::new();
    for &t in &times {
        for j in 0..d {
            for i in 0..201 {
                let mut x = vec![0.0; d];
                x[j] = bx.x_half * (-1.0 + 2.0 * i as f64 / 200.0);
                out.push(XSample { t, inner: inner(&x), x });
            }
        }
    }
    for _ in 0..n {
        let t = rng.gen_range(0.0..=bx.t_max.max(0.0));
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-bx.x_half..=bx.x_half)).collect();
        out.push(XSample { t, inner: inner(&x), x });
    }
    out
}

fn sup_clause(name: String, inequality: String, funcs: &[PhaseFn], weight: impl Fn(&[f64]) -> f64, pts: &[XSample]) -> Clause {
    let mut full = 0.0f64;
    let mut inner = 0.0f64;
    let mut arg: Option<&XSample> = None;
    for s in pts {
        let w = weight(&s.x);
        let r = funcs.iter().fold(0.0f64, |acc, f| {
            let v = f.eval(s.t, &s.x, &[]).abs() / w;
            if v.is_nan() {
                f64::INFINITY
            } else {
                acc.max(v)
            }
        });
        if r > full {
            full = r;
            arg = Some(s);
        }
        if s.inner {
            inner = inner.max(r);
        }
    }
    let pass = full.is_finite() && full <= DIVERGENCE_FACTOR * inner + 1e-12;
    Clause {
        name,
        inequality,
        constant: full,
        inner_constant: inner,
        pass,
        witness: if pass {
            None
        } else {
            arg.map(|s| std::iter::once(s.t).chain(s.x.iter().copied()).collect())
        },
        derivatives: if funcs.iter().all(|f| f.is_closed_form()) { "closed-form" } else { "finite-difference" }.into(),
        note: None,
    }
}

fn derivatives(w: &PhaseFn, d: usize) -> Vec<PhaseFn> {
    multi_indices(d, W_ORDER)
        .into_iter()
        .filter(|b| b.iter().sum::<usize>() >= 1)
        .map(|b| w.derivative(&b, &vec![0; d]))
        .filter(|f| !f.is_zero())
        .collect()
}

/// Growth exponent of `sup |W|` between radii `R/2` and `R`.
fn growth_exponent(w: &PhaseFn, d: usize, bx: &SampleBox) -> Option<f64> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; d];
            e[j] = s;
            dirs.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xd17);
    if d > 1 {
        for _ in 0..16 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            dirs.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let times = if bx.t_max > 0.0 { vec![0.0, 0.5 * bx.t_max, bx.t_max] } else { vec![0.0] };
    let shell = |r: f64| {
        let mut s = 0.0f64;
        for t in &times {
            for e in &dirs {
                let x: Vec<f64> = e.iter().map(|a| a * r).collect();
                s = s.max(w.eval(*t, &x, &[]).abs());
            }
        }
        s
    };
    let (r1, r2) = (0.5 * bx.x_half, bx.x_half);
    let (s1, s2) = (shell(r1), shell(r2));
    if s1 == 0.0 && s2 == 0.0 {
        return None;
    }
    let ratio = bracket(&[r2]) / bracket(&[r1]);
    Some((s2 / s1).ln() / ratio.ln())
}

/// Sampled check of the many-body assumptions: per-particle growth
/// clauses plus the interaction clauses, with the `δ` margin reported.
pub fn check_manybody_assumptions(problem: &ManyBodyProblem, bx: &SampleBox, n_samples: usize) -> Result<ManyBodyAssumptionReport> {
    let particles = problem
        .particles
        .iter()
        .map(|p| check_growth(&p.potentials, &p.damping, &p.growth, bx, n_samples))
        .collect::<Result<Vec<_>>>()?;
    let d = problem.d;
    let pts = x_samples(d, bx, n_samples, 0x2b0d);
    let mut clauses = Vec::new();
    let mut margins = Vec::new();
    for w in &problem.interactions {
        let tag = format!("W{}{}", w.i + 1, w.j + 1);
        let derivs = derivatives(&w.w, d);
        match w.class {
            InteractionClass::W12Type => {
                let m0 = problem.m0(w);
                let top = 2.0 * (m0 + 1.0);
                let delta = growth_exponent(&w.w, d, bx).map(|q| top - q);
                let used = delta.unwrap_or(top).clamp(0.0, top);
                let mut c = sup_clause(
                    format!("{tag}-growth-margin"),
                    format!("|W| <= C <x>^(2(M0+1) - delta), M0 = {m0}"),
                    std::slice::from_ref(&w.w),
                    |x| bracket(x).powf(top - used),
                    &pts,
                );
                match delta {
                    Some(dl) => {
                        c.note = Some(format!("delta = {dl:.4}"));
                        if !(dl > MARGIN_TOL) {
                            c.pass = false;
                        }
                    }
                    None => c.note = Some("W vanishes on the sampled shells".into()),
                }
                clauses.push(c);
                clauses.push(sup_clause(
                    format!("{tag}-derivatives-weighted"),
                    format!("|d^a W| <= C <x>^(2(M0+1)), 1 <= |a| <= {W_ORDER}"),
                    &derivs,
                    |x| bracket(x).powf(top),
                    &pts,
                ));
                margins.push(InteractionMargin { i: w.i, j: w.j, m0, delta });
            }
            InteractionClass::Generic => {
                clauses.push(sup_clause(
                    format!("{tag}-derivatives-linear"),
                    format!("|d^a W| <= C <x>, 1 <= |a| <= {W_ORDER}"),
                    &derivs,
                    bracket,
                    &pts,
                ));
            }
        }
    }
    let pass = particles.iter().all(|r| r.pass) && clauses.iter().all(|c| c.pass);
    Ok(ManyBodyAssumptionReport { particles, interactions: clauses, margins, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct ManyBodyEvolution {
    pub report: EvolutionReport,
    /// `‖u(t)‖'_1` at the recorded times.
    pub bprime: Vec<f64>,
    /// `max_t ‖u(t)‖'_1 / ‖u₀‖'_1`.
    pub bprime_constant: f64,
    /// `‖<x^{(k)}>^{M_k+1} u(t)‖` per particle.
    pub moments: Vec<Vec<f64>>,
    pub damping_floors: Vec<f64>,
}

impl ManyBodyEvolution {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::from("t,norm,bprime_1");
        for k in 0..self.moments.len() {
            header.push_str(&format!(",moment_{}", k + 1));
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.report.times.iter().enumerate() {
            let mut row = format!("{t:.12e},{:.16e},{:.16e}", self.report.norms[i], self.bprime[i]);
            for m in &self.moments {
                row.push_str(&format!(",{:.16e}", m[i]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Forward run on the flattened grid, monitoring the `a = 1` norm.
pub fn mb_propagate(problem: &ManyBodyProblem, u0: &State, cfg: &EvolveConfig) -> Result<ManyBodyEvolution> {
    problem.grid.check_same(u0.grid())?;
    if let Some(g) = &cfg.guard {
        g.check(u0)?;
    }
    let run_cfg = cfg.clone().levels(Vec::new()).keep_states(true);
    let gen = ManyBodyGenerator::new(problem);
    let mut report = propagate_generator(&gen, u0, problem.horizon, &run_cfg)?;
    let d = problem.d;
    let bprime: Vec<f64> = report.states.par_iter().map(|s| bprime_unguarded(s, problem, 1)).collect();
    let moments = problem
        .particles
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let e = p.m() + 1.0;
            report
                .states
                .iter()
                .map(|s| s.multiplied(|z| C64::new(bracket(&z[k * d..(k + 1) * d]).powf(e), 0.0)).norm())
                .collect()
        })
        .collect();
    let b0 = bprime[0];
    let bprime_constant = bprime.iter().map(|b| b / b0).fold(0.0, f64::max);
    if !cfg.keep_states {
        report.states.clear();
    }
    Ok(ManyBodyEvolution { report, bprime, bprime_constant, moments, damping_floors: problem.damping_floors(0.0)? })
}

/// Lower-bound constants of `ĥ` against `<ζ>² + Φ(z)²` on the grid box.
pub fn mb_lower_bound_constants(problem: &ManyBodyProblem, n_samples: usize) -> Result<LowerBoundConstants> {
    let dim = problem.grid.dim();
    let xh = problem.grid.half_width();
    let kh = std::f64::consts::PI / problem.grid.spacing();
    let phi = problem.phi();
    let h = problem.symmetrized_symbol();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0b);
    let mut f = Vec::new();
    let mut w = Vec::new();
    let mut inner = Vec::new();
    let mut push = |t: f64, z: &[f64], zeta: &[f64]| {
        f.push(h.eval(t, z, zeta).re);
        w.push(1.0 + zeta.iter().map(|v| v * v).sum::<f64>() + phi.eval(z).powi(2));
        inner.push(z.iter().all(|v| v.abs() <= 0.5 * xh) && zeta.iter().all(|v| v.abs() <= 0.5 * kh));
    };
    let times = [0.0, problem.horizon];
    for &t in &times {
        for j in 0..dim {
            for i in 0..201 {
                let s = -1.0 + 2.0 * i as f64 / 200.0;
                let mut z = vec![0.0; dim];
                let mut zeta = vec![0.0; dim];
                z[j] = s * xh;
                push(t, &z, &zeta);
                zeta[j] = s * kh;
                push(t, &z, &zeta);
            }
        }
    }
    for _ in 0..n_samples {
        let t = rng.gen_range(0.0..=problem.horizon);
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-xh..=xh)).collect();
        let zeta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-kh..=kh)).collect();
        push(t, &z, &zeta);
    }
    lower_bound_from_values(&f, &w, &inner)
}

/// `‖(μ + Ĥ)·Op(1/(μ + ĥ_s)) − I‖` at `t = 0`.
pub fn mb_remainder_norm(problem: &ManyBodyProblem, mu: f64, consts: &LowerBoundConstants) -> Result<f64> {
    if problem.grid.len() > MB_DENSE_LIMIT {
        return Err(Error::Size(format!(
            "{} flattened points exceed the dense limit {MB_DENSE_LIMIT}",
            problem.grid.len()
        )));
    }
    if mu < consts.mu_floor() {
        return Err(Error::Domain(format!("mu = {mu} below the admissible floor {:.6e}", consts.mu_floor())));
    }
    let hs = problem.symmetrized_symbol();
    let p = Symbol::new(hs.dim(), Degree::General, Role::Parametrix, move |t, z, zeta| {
        C64::new(1.0, 0.0) / (mu + hs.eval(t, z, zeta))
    });
    let r = remainder_operator(&problem.hamiltonian(0.0)?, &p, mu, 0.0)?;
    Ok(norm_of(&r, NORM_ITERS)?.value)
}

/// Many-body analogue of the single-particle remainder decay scan.
pub fn mb_parametrix_scan(problem: &ManyBodyProblem, mus: &[f64], consts: &LowerBoundConstants) -> Result<ScanReport> {
    check_mu_list(mus)?;
    if problem.grid.len() > MB_DENSE_LIMIT {
        return Err(Error::Size(format!(
            "{} flattened points exceed the dense limit {MB_DENSE_LIMIT}",
            problem.grid.len()
        )));
    }
    let hs = problem.symmetrized_symbol();
    let h = problem.hamiltonian(0.0)?;
    let norms = mus
        .par_iter()
        .map(|&mu| {
            if mu < consts.mu_floor() {
                return Err(Error::Domain(format!("mu = {mu} below the admissible floor {:.6e}", consts.mu_floor())));
            }
            let hs = hs.clone();
            let p = Symbol::new(hs.dim(), Degree::General, Role::Parametrix, move |t, z, zeta| {
                C64::new(1.0, 0.0) / (mu + hs.eval(t, z, zeta))
            });
            norm_of(&remainder_operator(&h, &p, mu, 0.0)?, NORM_ITERS)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = decay_report(ScanKind::ManyBodyParametrixDecay, mus, &norms, consts.c1_star)?;
    report.notes.push(format!("{} particles, {} points per axis", problem.n(), problem.grid.n()));
    Ok(report)
}
