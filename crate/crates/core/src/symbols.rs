//! Phase-space symbols `V`, `A`, `k` and the derived `h`, `h_s`, `χ_ε`,
//! together with sampled checks of the growth conditions they must obey.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{BoundExpr, Var};
use crate::C64;

type NativeFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

/// Real function of `(t, x, ξ)`.
#[derive(Clone)]
pub enum PhaseFn {
    Expr(BoundExpr),
    Native(Arc<NativeFn>),
}

impl fmt::Debug for PhaseFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseFn::Expr(e) => write!(f, "Expr({})", e.expr()),
            PhaseFn::Native(_) => write!(f, "Native(..)"),
        }
    }
}

const FD_STEP: f64 = 1e-4;

impl PhaseFn {
    pub fn parse(src: &str, dim: usize, bindings: &BTreeMap<String, f64>) -> Result<PhaseFn> {
        Ok(PhaseFn::Expr(BoundExpr::compile(src, dim, bindings)?))
    }

    pub fn zero() -> PhaseFn {
        PhaseFn::constant(0.0)
    }

    pub fn constant(c: f64) -> PhaseFn {
        PhaseFn::Expr(BoundExpr::from_expr(crate::expr::build::constant(c)))
    }

    pub fn native(f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> PhaseFn {
        PhaseFn::Native(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], xi: &[f64]) -> f64 {
        match self {
            PhaseFn::Expr(e) => e.eval(t, x, xi),
            PhaseFn::Native(f) => f(t, x, xi),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PhaseFn::Expr(e) if e.is_zero())
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(self, PhaseFn::Expr(_))
    }

    /// Partial derivative: symbolic for expressions, fourth-order central
    /// differences with step `1e-4·(1+|v|)` otherwise.
    pub fn partial(&self, var: Var) -> PhaseFn {
        match self {
            PhaseFn::Expr(e) => PhaseFn::Expr(e.diff(var)),
            PhaseFn::Native(f) => {
                let f = f.clone();
                PhaseFn::native(move |t, x, xi| {
                    let mut xs = x.to_vec();
                    let mut xis = xi.to_vec();
                    let v = match var {
                        Var::T => t,
                        Var::X(j) => x[j],
                        Var::Xi(j) => xi[j],
                        Var::Param(_) => return 0.0,
                    };
                    let h = FD_STEP * (1.0 + v.abs());
                    let mut at = |s: f64| {
                        let mut tt = t;
                        match var {
                            Var::T => tt = v + s,
                            Var::X(j) => xs[j] = v + s,
                            Var::Xi(j) => xis[j] = v + s,
                            Var::Param(_) => {}
                        }
                        f(tt, &xs, &xis)
                    };
                    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
                })
            }
        }
    }

    /// Mixed derivative `∂_x^β ∂_ξ^α`.
    pub fn derivative(&self, beta: &[usize], alpha: &[usize]) -> PhaseFn {
        let mut out = self.clone();
        for (j, &b) in beta.iter().enumerate() {
            for _ in 0..b {
                out = out.partial(Var::X(j));
            }
        }
        for (j, &a) in alpha.iter().enumerate() {
            for _ in 0..a {
                out = out.partial(Var::Xi(j));
            }
        }
        out
    }

    /// Derivative in a named parameter; `None` when unavailable in closed form.
    pub fn partial_param(&self, name: &str) -> Option<PhaseFn> {
        match self {
            PhaseFn::Expr(e) => Some(PhaseFn::Expr(e.diff_param(name))),
            PhaseFn::Native(_) => None,
        }
    }

    pub fn with_param(&self, name: &str, value: f64) -> PhaseFn {
        match self {
            PhaseFn::Expr(e) => PhaseFn::Expr(e.with_param(name, value)),
            PhaseFn::Native(_) => self.clone(),
        }
    }

    pub fn has_param(&self, name: &str) -> bool {
        matches!(self, PhaseFn::Expr(e) if e.param(name).is_some())
    }

    pub fn depends_on_xi(&self, dim: usize) -> bool {
        match self {
            PhaseFn::Expr(e) => (0..dim).any(|j| e.depends_on(Var::Xi(j))),
            PhaseFn::Native(_) => true,
        }
    }

    pub fn depends_on_t(&self) -> bool {
        match self {
            PhaseFn::Expr(e) => e.depends_on(Var::T),
            PhaseFn::Native(_) => true,
        }
    }

    /// Polynomial degree in ξ when it is at most 2 and provable symbolically.
    pub fn xi_degree(&self, dim: usize) -> Degree {
        let e = match self {
            PhaseFn::Expr(e) => e,
            PhaseFn::Native(_) => return Degree::General,
        };
        let mut level = vec![e.clone()];
        for order in 1..=3u8 {
            level = level
                .iter()
                .flat_map(|d| (0..dim).map(move |j| d.diff(Var::Xi(j))))
                .collect();
            if level.iter().all(|d| d.is_zero()) {
                return Degree::Poly(order - 1);
            }
        }
        Degree::General
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degree {
    Poly(u8),
    General,
}

impl Degree {
    pub fn max(self, other: Degree) -> Degree {
        match (self, other) {
            (Degree::Poly(a), Degree::Poly(b)) => Degree::Poly(a.max(b)),
            _ => Degree::General,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hamiltonian,
    Symmetrized,
    Lambda,
    LambdaM,
    Cutoff,
    Parametrix,
    Damping,
    Generator,
    Other(String),
}

type SymbolFn = dyn Fn(f64, &[f64], &[f64]) -> C64 + Send + Sync;

/// Complex phase-space symbol with its declared ξ-degree.
#[derive(Clone)]
pub struct Symbol {
    dim: usize,
    degree: Degree,
    role: Role,
    f: Arc<SymbolFn>,
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Symbol").field("dim", &self.dim).field("degree", &self.degree).field("role", &self.role).finish()
    }
}

impl Symbol {
    pub fn new(
        dim: usize,
        degree: Degree,
        role: Role,
        f: impl Fn(f64, &[f64], &[f64]) -> C64 + Send + Sync + 'static,
    ) -> Symbol {
        Symbol { dim, degree, role, f: Arc::new(f) }
    }

    pub fn constant(dim: usize, c: C64) -> Symbol {
        Symbol::new(dim, Degree::Poly(0), Role::Other("constant".into()), move |_, _, _| c)
    }

    pub fn from_phase(dim: usize, role: Role, p: PhaseFn) -> Symbol {
        let degree = p.xi_degree(dim);
        Symbol::new(dim, degree, role, move |t, x, xi| C64::new(p.eval(t, x, xi), 0.0))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], xi: &[f64]) -> C64 {
        (self.f)(t, x, xi)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn role(&self) -> &Role {
        &self.role
    }

    pub fn with_role(mut self, role: Role) -> Symbol {
        self.role = role;
        self
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: C64, other: &Symbol, b: C64) -> Symbol {
        let (f, g) = (self.f.clone(), other.f.clone());
        Symbol {
            dim: self.dim,
            degree: self.degree.max(other.degree),
            role: Role::Other("combination".into()),
            f: Arc::new(move |t, x, xi| a * f(t, x, xi) + b * g(t, x, xi)),
        }
    }

    pub fn shifted(&self, c: C64) -> Symbol {
        let f = self.f.clone();
        Symbol { f: Arc::new(move |t, x, xi| c + f(t, x, xi)), ..self.clone() }
    }
}

// ---------------------------------------------------------------------------
// specs

/// Electromagnetic potentials `V(t,x)`, `A(t,x)` and the mass.
#[derive(Debug, Clone)]
pub struct PotentialSpec {
    pub dim: usize,
    pub v: PhaseFn,
    pub a: Vec<PhaseFn>,
    pub mass: f64,
}

impl PotentialSpec {
    pub fn new(dim: usize, v: PhaseFn, a: Vec<PhaseFn>, mass: f64) -> Result<PotentialSpec> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Domain(format!("mass must be positive, got {mass}")));
        }
        if a.len() != dim {
            return Err(Error::Domain(format!("{} vector potential components for dimension {dim}", a.len())));
        }
        if v.depends_on_xi(dim) || a.iter().any(|c| c.depends_on_xi(dim)) {
            return Err(Error::Domain("potentials must not depend on xi".into()));
        }
        Ok(PotentialSpec { dim, v, a, mass })
    }

    pub fn parse(
        dim: usize,
        v: &str,
        a: &[&str],
        mass: f64,
        bindings: &BTreeMap<String, f64>,
    ) -> Result<PotentialSpec> {
        let v = PhaseFn::parse(v, dim, bindings)?;
        let a = if a.is_empty() {
            vec![PhaseFn::zero(); dim]
        } else {
            a.iter().map(|s| PhaseFn::parse(s, dim, bindings)).collect::<Result<Vec<_>>>()?
        };
        PotentialSpec::new(dim, v, a, mass)
    }

    pub fn magnetic(&self) -> bool {
        self.a.iter().any(|c| !c.is_zero())
    }

    pub fn time_dependent(&self) -> bool {
        self.v.depends_on_t() || self.a.iter().any(|c| c.depends_on_t())
    }

    pub fn with_param(&self, name: &str, value: f64) -> PotentialSpec {
        PotentialSpec {
            dim: self.dim,
            v: self.v.with_param(name, value),
            a: self.a.iter().map(|c| c.with_param(name, value)).collect(),
            mass: self.mass,
        }
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.v.has_param(name) || self.a.iter().any(|c| c.has_param(name))
    }
}

/// Real damping double symbol `k(t,x,ξ)`.
#[derive(Debug, Clone)]
pub struct DampingSpec {
    pub dim: usize,
    pub k: PhaseFn,
}

impl DampingSpec {
    pub fn new(dim: usize, k: PhaseFn) -> DampingSpec {
        DampingSpec { dim, k }
    }

    pub fn parse(dim: usize, k: &str, bindings: &BTreeMap<String, f64>) -> Result<DampingSpec> {
        Ok(DampingSpec { dim, k: PhaseFn::parse(k, dim, bindings)? })
    }

    pub fn zero(dim: usize) -> DampingSpec {
        DampingSpec { dim, k: PhaseFn::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.k.is_zero()
    }

    pub fn with_param(&self, name: &str, value: f64) -> DampingSpec {
        DampingSpec { dim: self.dim, k: self.k.with_param(name, value) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthKind {
    /// Bounded-derivative potentials with linearly growing damping.
    A21,
    /// Potentials growing like `<x>^{2(M+1)}`.
    A22,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthClass {
    pub kind: GrowthKind,
    pub m: f64,
    pub delta: f64,
}

impl GrowthClass {
    pub fn a21() -> GrowthClass {
        GrowthClass { kind: GrowthKind::A21, m: 0.0, delta: 0.0 }
    }

    pub fn a22(m: f64, delta: f64) -> Result<GrowthClass> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Domain(format!("growth index M must be nonnegative, got {m}")));
        }
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("delta must be positive, got {delta}")));
        }
        Ok(GrowthClass { kind: GrowthKind::A22, m, delta })
    }

    /// Weight index `M` (zero for the bounded-derivative class).
    pub fn index(&self) -> f64 {
        match self.kind {
            GrowthKind::A21 => 0.0,
            GrowthKind::A22 => self.m,
        }
    }
}

// ---------------------------------------------------------------------------
// derived symbols

pub fn bracket(x: &[f64]) -> f64 {
    (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// `h = |ξ − A|²/2m + V`.
pub fn hamiltonian_symbol(p: &PotentialSpec) -> Symbol {
    let p = p.clone();
    let dim = p.dim;
    Symbol::new(dim, Degree::Poly(2), Role::Hamiltonian, move |t, x, xi| {
        C64::new(real_h(&p, t, x, xi), 0.0)
    })
}

#[inline]
fn real_h(p: &PotentialSpec, t: f64, x: &[f64], xi: &[f64]) -> f64 {
    let mut kin = 0.0;
    for j in 0..p.dim {
        let d = xi[j] - p.a[j].eval(t, x, xi);
        kin += d * d;
    }
    kin / (2.0 * p.mass) + p.v.eval(t, x, xi)
}

/// `h_s = h + (i/2m)∇·A`.
pub fn symmetrized_symbol(p: &PotentialSpec) -> Symbol {
    let div: Vec<PhaseFn> = (0..p.dim).map(|j| p.a[j].partial(Var::X(j))).collect();
    let p = p.clone();
    Symbol::new(p.dim, Degree::Poly(2), Role::Symmetrized, move |t, x, xi| {
        let d: f64 = div.iter().map(|f| f.eval(t, x, xi)).sum();
        C64::new(real_h(&p, t, x, xi), d / (2.0 * p.mass))
    })
}

/// `∂_t h = −(ξ − A)·∂_t A/m + ∂_t V`.
pub fn hamiltonian_time_derivative(p: &PotentialSpec) -> Symbol {
    let dv = p.v.partial(Var::T);
    let da: Vec<PhaseFn> = p.a.iter().map(|c| c.partial(Var::T)).collect();
    let p = p.clone();
    Symbol::new(p.dim, Degree::Poly(1), Role::Other("dt_hamiltonian".into()), move |t, x, xi| {
        let mut s = dv.eval(t, x, xi);
        for j in 0..p.dim {
            s -= (xi[j] - p.a[j].eval(t, x, xi)) * da[j].eval(t, x, xi) / p.mass;
        }
        C64::new(s, 0.0)
    })
}

pub fn damping_symbol(k: &DampingSpec) -> Symbol {
    Symbol::from_phase(k.dim, Role::Damping, k.k.clone())
}

/// `h − i k`, the symbol of the full generator.
pub fn generator_symbol(p: &PotentialSpec, k: Option<&DampingSpec>) -> Symbol {
    let h = hamiltonian_symbol(p);
    match k {
        Some(k) if !k.is_zero() => h.combine(C64::new(1.0, 0.0), &damping_symbol(k), C64::new(0.0, -1.0)).with_role(Role::Generator),
        _ => h.with_role(Role::Generator),
    }
}

/// Rapidly decreasing cutoff profile with `χ(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CutoffProfile {
    /// `χ(s) = exp(−s²)`.
    #[default]
    Gaussian,
}

impl CutoffProfile {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            CutoffProfile::Gaussian => (-s * s).exp(),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            CutoffProfile::Gaussian => "gaussian exp(-s^2)",
        }
    }
}

/// `χ_ε = χ(ε(μ + h))`.
pub fn cutoff_symbol(h: &Symbol, mu: f64, epsilon: f64, chi: CutoffProfile) -> Result<Symbol> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let h = h.clone();
    Ok(Symbol::new(h.dim(), Degree::General, Role::Cutoff, move |t, x, xi| {
        C64::new(chi.eval(epsilon * (mu + h.eval(t, x, xi).re)), 0.0)
    }))
}

// ---------------------------------------------------------------------------
// growth checks

/// Sampling region `|x_j| ≤ x_half`, `|ξ_j| ≤ xi_half`, `t ∈ [0, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub x_half: f64,
    pub xi_half: f64,
    pub t_max: f64,
}

impl SampleBox {
    pub fn new(x_half: f64, xi_half: f64, t_max: f64) -> SampleBox {
        SampleBox { x_half, xi_half, t_max }
    }

    fn contains_half(&self, x: &[f64], xi: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= 0.5 * self.x_half) && xi.iter().all(|v| v.abs() <= 0.5 * self.xi_half)
    }
}

#[derive(Debug, Clone)]
struct Sample {
    t: f64,
    x: Vec<f64>,
    xi: Vec<f64>,
    inner: bool,
}

fn samples(dim: usize, bx: &SampleBox, n: usize, phase_space: bool, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = if bx.t_max > 0.0 { vec![0.0, 0.5 * bx.t_max, bx.t_max] } else { vec![0.0] };
    let mut out = Vec::new();
    let mut push = |t: f64, x: Vec<f64>, xi: Vec<f64>| {
        let inner = bx.contains_half(&x, &xi);
        out.push(Sample { t, x, xi, inner });
    };
    // lines along every axis through the origin, endpoints included
    let line = 201;
    for &t in &times {
        for j in 0..dim {
            for i in 0..line {
                let s = -1.0 + 2.0 * i as f64 / (line - 1) as f64;
                let mut x = vec![0.0; dim];
                x[j] = s * bx.x_half;
                push(t, x.clone(), vec![0.0; dim]);
                if phase_space {
                    let mut xi = vec![0.0; dim];
                    xi[j] = s * bx.xi_half;
                    push(t, vec![0.0; dim], xi.clone());
                    push(t, x, xi);
                }
            }
        }
    }
    for _ in 0..n {
        let t = rng.gen_range(0.0..=bx.t_max.max(0.0));
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bx.x_half..=bx.x_half)).collect();
        let xi: Vec<f64> = if phase_space {
            (0..dim).map(|_| rng.gen_range(-bx.xi_half..=bx.xi_half)).collect()
        } else {
            vec![0.0; dim]
        };
        push(t, x, xi);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Clause {
    pub name: String,
    pub inequality: String,
    /// Smallest admissible constant on the full box.
    pub constant: f64,
    /// Same constant restricted to the inner half box.
    pub inner_constant: f64,
    pub pass: bool,
    /// `(t, x..., ξ...)` of the sample attaining the constant, on failure.
    pub witness: Option<Vec<f64>>,
    pub derivatives: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub class: GrowthClass,
    pub sample_box: SampleBox,
    pub n_samples: usize,
    pub cutoff_profile: String,
    pub clauses: Vec<Clause>,
    pub pass: bool,
}

impl AssumptionReport {
    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.clauses.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }
}

/// Box-doubling growth allowed before a fitted constant counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 1.5;

fn stable(full: f64, inner: f64) -> bool {
    full.is_finite() && full <= DIVERGENCE_FACTOR * inner + 1e-12
}

fn witness(s: &Sample) -> Vec<f64> {
    let mut w = vec![s.t];
    w.extend_from_slice(&s.x);
    w.extend_from_slice(&s.xi);
    w
}

fn derivative_source(fs: &[&PhaseFn]) -> String {
    if fs.iter().all(|f| f.is_closed_form()) {
        "closed-form".into()
    } else {
        "finite-difference".into()
    }
}

/// Sup over samples of `|f|/weight` for each function, maximized.
fn ratio_clause(
    name: &str,
    inequality: &str,
    funcs: &[PhaseFn],
    weight: impl Fn(&Sample) -> f64,
    pts: &[Sample],
) -> Clause {
    let mut full = 0.0f64;
    let mut inner = 0.0f64;
    let mut arg: Option<&Sample> = None;
    for s in pts {
        let w = weight(s);
        let mut r = 0.0f64;
        for f in funcs {
            let v = f.eval(s.t, &s.x, &s.xi).abs() / w;
            r = if v.is_nan() { f64::INFINITY } else { r.max(v) };
        }
        if r > full || (r.is_infinite() && arg.is_none()) {
            full = r;
            arg = Some(s);
        }
        if s.inner {
            inner = inner.max(r);
        }
    }
    let pass = stable(full, inner);
    let refs: Vec<&PhaseFn> = funcs.iter().collect();
    Clause {
        name: name.into(),
        inequality: inequality.into(),
        constant: full,
        inner_constant: inner,
        pass,
        witness: if pass { None } else { arg.map(witness) },
        derivatives: derivative_source(&refs),
        note: None,
    }
}

/// Sums `Σ_j |f_j|` for vector clauses such as the bounded-derivative one on `A`.
fn summed(funcs: Vec<PhaseFn>) -> PhaseFn {
    if funcs.len() == 1 {
        return funcs.into_iter().next().unwrap();
    }
    PhaseFn::native(move |t, x, xi| funcs.iter().map(|f| f.eval(t, x, xi).abs()).sum())
}

fn x_derivs(f: &PhaseFn, dim: usize, min: usize, max: usize) -> Vec<PhaseFn> {
    crate::field::multi_indices(dim, max)
        .into_iter()
        .filter(|b| b.iter().sum::<usize>() >= min)
        .map(|b| f.derivative(&b, &vec![0; dim]))
        .filter(|d| !d.is_zero())
        .collect()
}

const MAX_ORDER: usize = 4;

/// Sampled verification of the selected growth class.
pub fn check_growth(
    p: &PotentialSpec,
    k: &DampingSpec,
    cls: &GrowthClass,
    bx: &SampleBox,
    n_samples: usize,
) -> Result<AssumptionReport> {
    let dim = p.dim;
    let pts = samples(dim, bx, n_samples, true, 0x5eed);
    let bx_x = |s: &Sample| bracket(&s.x);
    let zeros = vec![0; dim];
    let mut clauses = Vec::new();
    match cls.kind {
        GrowthKind::A21 => {
            clauses.push(ratio_clause(
                "v-derivatives-linear",
                "|d^a V| <= C <x>, 1 <= |a| <= 4",
                &x_derivs(&p.v, dim, 1, MAX_ORDER),
                bx_x,
                &pts,
            ));
            let a_funcs: Vec<PhaseFn> = crate::field::multi_indices(dim, MAX_ORDER)
                .into_iter()
                .filter(|b| b.iter().sum::<usize>() >= 1)
                .map(|b| summed(p.a.iter().map(|c| c.derivative(&b, &zeros)).collect()))
                .collect();
            clauses.push(ratio_clause("a-derivatives-bounded", "sum_j |d^a A_j| <= C, 1 <= |a| <= 4", &a_funcs, |_| 1.0, &pts));
            let k_funcs: Vec<PhaseFn> = mixed_indices(dim, 1, MAX_ORDER)
                .into_iter()
                .map(|(b, a)| k.k.derivative(&b, &a))
                .filter(|d| !d.is_zero())
                .collect();
            clauses.push(ratio_clause(
                "k-derivatives-linear",
                "|k^(a)_(b)| <= C (1 + |x| + |xi|), 1 <= |a+b| <= 4",
                &k_funcs,
                |s| 1.0 + norm2(&s.x) + norm2(&s.xi),
                &pts,
            ));
        }
        GrowthKind::A22 => {
            let m = cls.m;
            let w2 = move |s: &Sample| bracket(&s.x).powf(2.0 * (m + 1.0));
            let w1 = move |s: &Sample| bracket(&s.x).powf(m + 1.0);
            clauses.extend(potential_bound_clauses(p, cls, &pts));
            let kx: Vec<PhaseFn> = x_derivs(&k.k, dim, 1, MAX_ORDER);
            clauses.push(ratio_clause("k-x-derivatives", "|k_(b)| <= C <x>^(M+1), 1 <= |b| <= 4", &kx, w1, &pts));
            let kxi: Vec<PhaseFn> = mixed_indices(dim, 1, MAX_ORDER)
                .into_iter()
                .filter(|(_, a)| a.iter().sum::<usize>() >= 1)
                .map(|(b, a)| k.k.derivative(&b, &a))
                .filter(|d| !d.is_zero())
                .collect();
            clauses.push(ratio_clause("k-xi-derivatives", "|k^(a)_(b)| <= C, |a| >= 1", &kxi, |_| 1.0, &pts));
            clauses.push(ratio_clause(
                "v-derivatives",
                "|d^a V| <= C <x>^(2(M+1)), 1 <= |a| <= 4",
                &x_derivs(&p.v, dim, 1, MAX_ORDER),
                w2,
                &pts,
            ));
            let vt = p.v.partial(Var::T);
            clauses.push(ratio_clause(
                "v-time-derivatives",
                "|d^a dt V| <= C <x>^(2(M+1)), |a| <= 3",
                &x_derivs(&vt, dim, 0, MAX_ORDER - 1),
                w2,
                &pts,
            ));
            let delta = cls.delta;
            clauses.push(ratio_clause(
                "a-growth",
                "|A_j| <= C <x>^(M+1-delta)",
                &p.a.iter().filter(|c| !c.is_zero()).cloned().collect::<Vec<_>>(),
                move |s| bracket(&s.x).powf(m + 1.0 - delta),
                &pts,
            ));
            let a_der: Vec<PhaseFn> = p.a.iter().flat_map(|c| x_derivs(c, dim, 1, MAX_ORDER)).collect();
            clauses.push(ratio_clause("a-derivatives", "|d^a A_j| <= C <x>^(M+1), 1 <= |a| <= 4", &a_der, w1, &pts));
            let a_t: Vec<PhaseFn> = p.a.iter().flat_map(|c| x_derivs(&c.partial(Var::T), dim, 0, MAX_ORDER - 1)).collect();
            clauses.push(ratio_clause("a-time-derivatives", "|d^a dt A_j| <= C <x>^(M+1), |a| <= 3", &a_t, w1, &pts));
        }
    }
    let pass = clauses.iter().all(|c| c.pass);
    Ok(AssumptionReport {
        class: *cls,
        sample_box: *bx,
        n_samples,
        cutoff_profile: CutoffProfile::Gaussian.describe().into(),
        clauses,
        pass,
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Pairs `(β, α)` of x- and ξ-multi-indices with `min ≤ |α+β| ≤ max`.
fn mixed_indices(dim: usize, min: usize, max: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let all = crate::field::multi_indices(2 * dim, max);
    all.into_iter()
        .filter(|m| m.iter().sum::<usize>() >= min)
        .map(|m| (m[..dim].to_vec(), m[dim..].to_vec()))
        .collect()
}

/// Two-sided fit `c0·W − c1 ≤ f ≤ W/c_up` over samples.
struct TwoSidedFit {
    c0: f64,
    c1: f64,
    c1_inner: f64,
    upper: f64,
    upper_inner: f64,
    witness: Option<Vec<f64>>,
}

fn two_sided_fit(f: &[f64], w: &[f64], pts: &[Sample]) -> TwoSidedFit {
    // regression slope of f on W first; when the resulting c1 diverges on
    // box doubling, fall back to the infimum of f/W on the outer shell
    let n = f.len() as f64;
    let mw = w.iter().sum::<f64>() / n;
    let mf = f.iter().sum::<f64>() / n;
    let sww: f64 = w.iter().map(|v| (v - mw).powi(2)).sum();
    let swf: f64 = w.iter().zip(f).map(|(a, b)| (a - mw) * (b - mf)).sum();
    let slope = if sww > 0.0 { swf / sww } else { 0.0 };
    let upper_ratio = |only_inner: bool| {
        f.iter()
            .zip(w)
            .zip(pts)
            .filter(|(_, s)| !only_inner || s.inner)
            .map(|((a, b), _)| a / b)
            .fold(0.0f64, |acc, r| if r.is_nan() { f64::INFINITY } else { acc.max(r) })
    };
    let c1_of = |c0: f64, only_inner: bool| {
        f.iter()
            .zip(w)
            .zip(pts)
            .filter(|(_, s)| !only_inner || s.inner)
            .map(|((a, b), _)| c0 * b - a)
            .fold(0.0f64, |acc, r| if r.is_nan() { f64::INFINITY } else { acc.max(r) })
    };
    let upper = upper_ratio(false);
    let cap = if upper > 0.0 { 1.0 / upper } else { f64::INFINITY };
    let mut c0 = slope.min(cap);
    if !stable(c1_of(c0, false), c1_of(c0, true)) {
        let outer = f
            .iter()
            .zip(w)
            .zip(pts)
            .filter(|(_, s)| !s.inner)
            .map(|((a, b), _)| a / b)
            .fold(f64::INFINITY, f64::min);
        c0 = outer.min(cap).min(slope.max(0.0));
    }
    let c0 = if c0.is_finite() { c0 } else { 0.0 };
    let c1 = c1_of(c0, false);
    let c1_inner = c1_of(c0, true);
    let witness = f
        .iter()
        .zip(w)
        .zip(pts)
        .max_by(|((a, b), _), ((c, d), _)| (c0 * *b - *a).partial_cmp(&(c0 * *d - *c)).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(_, s)| witness(s));
    TwoSidedFit { c0, c1, c1_inner, upper, upper_inner: upper_ratio(true), witness }
}

fn potential_bound_clauses(p: &PotentialSpec, cls: &GrowthClass, pts: &[Sample]) -> Vec<Clause> {
    // C0 W − C1 ≤ V ≤ C2 W with W = <x>^{2(M+1)}; only x samples matter
    let xs: Vec<Sample> = pts.iter().filter(|s| s.xi.iter().all(|v| *v == 0.0)).cloned().collect();
    let w: Vec<f64> = xs.iter().map(|s| bracket(&s.x).powf(2.0 * (cls.m + 1.0))).collect();
    let v: Vec<f64> = xs.iter().map(|s| p.v.eval(s.t, &s.x, &s.xi)).collect();
    let fit = two_sided_fit(&v, &w, &xs);
    let lower_ok = fit.c0 > 0.0 && stable(fit.c1, fit.c1_inner);
    let upper_ok = fit.upper > 0.0 && stable(fit.upper, fit.upper_inner);
    let src = derivative_source(&[&p.v]);
    vec![
        Clause {
            name: "v-lower".into(),
            inequality: "C0 <x>^(2(M+1)) - C1 <= V".into(),
            constant: fit.c1,
            inner_constant: fit.c1_inner,
            pass: lower_ok,
            witness: if lower_ok { None } else { fit.witness.clone() },
            derivatives: src.clone(),
            note: Some(format!("C0 = {:.6e}, C1 = {:.6e}", fit.c0, fit.c1)),
        },
        Clause {
            name: "v-upper".into(),
            inequality: "V <= C2 <x>^(2(M+1))".into(),
            constant: fit.upper,
            inner_constant: fit.upper_inner,
            pass: upper_ok,
            witness: None,
            derivatives: src,
            note: Some(format!("C2 = {:.6e}", fit.upper)),
        },
    ]
}

/// Constants of the two-sided bound
/// `C0*(<ξ>² + <x>^{2(M+1)}) − C1* ≤ h ≤ (<ξ>² + <x>^{2(M+1)})/C0*`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LowerBoundConstants {
    pub c0_star: f64,
    pub c1_star: f64,
}

impl LowerBoundConstants {
    /// Default shift `max(1, 2·C1* + C0*/2)` for `μ`.
    pub fn default_mu(&self) -> f64 {
        (2.0 * self.c1_star + 0.5 * self.c0_star).max(1.0)
    }

    /// Smallest admissible `μ`, `C0*/2 + C1*`.
    pub fn mu_floor(&self) -> f64 {
        0.5 * self.c0_star + self.c1_star
    }
}

pub fn fit_lower_bound_constants(
    p: &PotentialSpec,
    cls: &GrowthClass,
    bx: &SampleBox,
    n_samples: usize,
) -> Result<LowerBoundConstants> {
    if cls.kind != GrowthKind::A22 {
        return Err(Error::Domain("lower-bound constants need the polynomial growth class".into()));
    }
    let pts = samples(p.dim, bx, n_samples, true, 0xb0b);
    let w: Vec<f64> = pts
        .iter()
        .map(|s| 1.0 + s.xi.iter().map(|v| v * v).sum::<f64>() + bracket(&s.x).powf(2.0 * (cls.m + 1.0)))
        .collect();
    let h: Vec<f64> = pts.iter().map(|s| real_h(p, s.t, &s.x, &s.xi)).collect();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Infeasible("symbol is not finite on the sampling box".into()));
    }
    let fit = two_sided_fit(&h, &w, &pts);
    if !(fit.c0 > 0.0) {
        return Err(Error::Infeasible(format!("no positive C0* (fitted {:.3e})", fit.c0)));
    }
    if !stable(fit.c1, fit.c1_inner) {
        return Err(Error::Infeasible(format!(
            "C1* diverges with the box: {:.3e} on the full box vs {:.3e} on the half box",
            fit.c1, fit.c1_inner
        )));
    }
    Ok(LowerBoundConstants { c0_star: fit.c0, c1_star: fit.c1 })
}

/// Lower-bound constants from sampled values `f ≈ C0*·w − C1*`; `inner`
/// marks samples inside the half box.
pub(crate) fn lower_bound_from_values(f: &[f64], w: &[f64], inner: &[bool]) -> Result<LowerBoundConstants> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Infeasible("symbol is not finite on the sampling box".into()));
    }
    let pts: Vec<Sample> =
        inner.iter().map(|&i| Sample { t: 0.0, x: Vec::new(), xi: Vec::new(), inner: i }).collect();
    let fit = two_sided_fit(f, w, &pts);
    if !(fit.c0 > 0.0) {
        return Err(Error::Infeasible(format!("no positive C0* (fitted {:.3e})", fit.c0)));
    }
    if !stable(fit.c1, fit.c1_inner) {
        return Err(Error::Infeasible(format!(
            "C1* diverges with the box: {:.3e} on the full box vs {:.3e} on the half box",
            fit.c1, fit.c1_inner
        )));
    }
    Ok(LowerBoundConstants { c0_star: fit.c0, c1_star: fit.c1 })
}
