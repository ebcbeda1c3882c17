//! Midpoint (Weyl) quantization of symbols on a periodic lattice.
//!
//! Symbols of degree at most two in ξ use the symmetric orderings
//! `(cD + Dc)/2` and `(D_jD_k c + D_j c D_k + D_k c D_j + c D_jD_k)/4`.
//! General symbols are assembled as a dense kernel in the discrete Fourier
//! basis, where the matrix element between modes `ξ` and `ξ'` is the Fourier
//! coefficient of `s(t, x, (ξ+ξ')/2)` at `ξ' − ξ`. On a degree-two symbol the
//! two constructions coincide exactly.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{fft_forward, fft_inverse, Grid, State};
use crate::linalg::{self, NormEstimate};
use crate::symbols::{Degree, Symbol};
use crate::C64;

pub const DENSE_LIMIT: usize = 4096;
const DENSE_EIGEN_LIMIT: usize = 2048;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    PolyFast,
    DenseKernel,
    Composition,
}

type VecFn = dyn Fn(&[C64]) -> Vec<C64> + Send + Sync;

#[derive(Clone)]
enum Coef {
    Const(C64),
    Field(Arc<Vec<C64>>),
}

impl Coef {
    fn conj(&self) -> Coef {
        match self {
            Coef::Const(c) => Coef::Const(c.conj()),
            Coef::Field(v) => Coef::Field(Arc::new(v.iter().map(|z| z.conj()).collect())),
        }
    }

    fn classify(values: Vec<C64>, scale: f64) -> Option<Coef> {
        let tol = 64.0 * f64::EPSILON * scale.max(1.0);
        let first = values[0];
        if values.iter().all(|v| v.norm() <= tol) {
            return None;
        }
        if values.iter().all(|v| (v - first).norm() <= tol) {
            let mean = values.iter().sum::<C64>() / values.len() as f64;
            return Some(Coef::Const(mean));
        }
        Some(Coef::Field(Arc::new(values)))
    }
}

#[derive(Clone)]
struct PolyOp {
    c0: Option<Coef>,
    c1: Vec<(usize, Coef)>,
    c2: Vec<(usize, usize, Coef)>,
    freqs: Arc<Vec<f64>>,
}

enum Node {
    Identity,
    Zero,
    Scale(C64, Operator),
    Multiply(Arc<Vec<C64>>),
    Poly(PolyOp),
    /// Kernel in the discrete Fourier basis, FFT slot order.
    Dense(Arc<DMatrix<C64>>),
    /// Kernel in the position basis.
    Matrix(Arc<DMatrix<C64>>),
    Fiber { inner: Operator, first_axis: usize },
    Sum(Vec<Operator>),
    /// `ops[0] ∘ ops[1] ∘ ...`
    Product(Vec<Operator>),
    Func { apply: Arc<VecFn>, adjoint: Arc<VecFn> },
}

/// Linear operator on the states of one grid, frozen at a time `t`.
#[derive(Clone)]
pub struct Operator {
    grid: Grid,
    time: f64,
    node: Arc<Node>,
}

impl std::fmt::Debug for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Operator({:?}, t = {}, {:?})", self.grid, self.time, self.kind())
    }
}

impl Operator {
    fn with(grid: Grid, time: f64, node: Node) -> Operator {
        Operator { grid, time, node: Arc::new(node) }
    }

    pub fn identity(grid: Grid) -> Operator {
        Operator::with(grid, 0.0, Node::Identity)
    }

    pub fn zero(grid: Grid) -> Operator {
        Operator::with(grid, 0.0, Node::Zero)
    }

    pub fn multiply(grid: Grid, values: Vec<C64>) -> Result<Operator> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} multiplier values for {} points", values.len(), grid.len())));
        }
        Ok(Operator::with(grid, 0.0, Node::Multiply(Arc::new(values))))
    }

    /// Multiplication by a function of position.
    pub fn multiply_fn(grid: Grid, f: impl Fn(&[f64]) -> C64) -> Operator {
        let values = State::from_fn(grid, f).into_values();
        Operator::with(grid, 0.0, Node::Multiply(Arc::new(values)))
    }

    pub fn from_fn(
        grid: Grid,
        apply: impl Fn(&[C64]) -> Vec<C64> + Send + Sync + 'static,
        adjoint: impl Fn(&[C64]) -> Vec<C64> + Send + Sync + 'static,
    ) -> Operator {
        Operator::with(grid, 0.0, Node::Func { apply: Arc::new(apply), adjoint: Arc::new(adjoint) })
    }

    /// Wrap a position-basis matrix.
    pub fn from_matrix(grid: Grid, m: DMatrix<C64>) -> Result<Operator> {
        if m.nrows() != grid.len() || m.ncols() != grid.len() {
            return Err(Error::GridMismatch(format!("{}x{} matrix for {} points", m.nrows(), m.ncols(), grid.len())));
        }
        Ok(Operator::with(grid, 0.0, Node::Matrix(Arc::new(m))))
    }

    /// Extend an operator on a lower-dimensional grid to the axes
    /// `first_axis..first_axis + inner.dim` of `outer`.
    pub fn fiber(inner: Operator, outer: Grid, first_axis: usize) -> Result<Operator> {
        let g = inner.grid;
        if g.n() != outer.n() || g.half_width() != outer.half_width() || first_axis + g.dim() > outer.dim() {
            return Err(Error::GridMismatch(format!("cannot place {g:?} on axes {first_axis}.. of {outer:?}")));
        }
        let time = inner.time;
        Ok(Operator::with(outer, time, Node::Fiber { inner, first_axis }))
    }

    pub fn at_time(mut self, t: f64) -> Operator {
        self.time = t;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn kind(&self) -> Kind {
        match &*self.node {
            Node::Poly(_) | Node::Multiply(_) | Node::Identity | Node::Zero => Kind::PolyFast,
            Node::Dense(_) | Node::Matrix(_) => Kind::DenseKernel,
            _ => Kind::Composition,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(&*self.node, Node::Zero)
    }

    pub fn plus(&self, other: &Operator) -> Operator {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        let mut parts = Vec::new();
        for op in [self, other] {
            match &*op.node {
                Node::Sum(v) => parts.extend(v.iter().cloned()),
                _ => parts.push(op.clone()),
            }
        }
        Operator::with(self.grid, self.time, Node::Sum(parts))
    }

    pub fn minus(&self, other: &Operator) -> Operator {
        self.plus(&other.scaled(-ONE))
    }

    pub fn scaled(&self, c: C64) -> Operator {
        if c == ONE {
            return self.clone();
        }
        if c == ZERO || self.is_zero() {
            return Operator::zero(self.grid).at_time(self.time);
        }
        Operator::with(self.grid, self.time, Node::Scale(c, self.clone()))
    }

    /// `self + c·I`.
    pub fn shifted(&self, c: C64) -> Operator {
        if c == ZERO {
            return self.clone();
        }
        self.plus(&Operator::identity(self.grid).scaled(c))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Operator) -> Operator {
        if self.is_zero() || other.is_zero() {
            return Operator::zero(self.grid).at_time(self.time);
        }
        let mut parts = Vec::new();
        for op in [self, other] {
            match &*op.node {
                Node::Identity => {}
                Node::Product(v) => parts.extend(v.iter().cloned()),
                _ => parts.push(op.clone()),
            }
        }
        match parts.len() {
            0 => Operator::identity(self.grid).at_time(self.time),
            1 => parts.pop().unwrap(),
            _ => Operator::with(self.grid, self.time, Node::Product(parts)),
        }
    }

    /// `[self, other] = self∘other − other∘self`.
    pub fn commutator(&self, other: &Operator) -> Operator {
        self.compose(other).minus(&other.compose(self))
    }

    pub fn apply(&self, f: &State) -> Result<State> {
        self.grid.check_same(f.grid())?;
        State::new(self.grid, self.apply_vec(f.values()), f.time())
    }

    pub fn apply_vec(&self, f: &[C64]) -> Vec<C64> {
        self.apply_impl(f, false)
    }

    pub fn apply_adjoint_vec(&self, f: &[C64]) -> Vec<C64> {
        self.apply_impl(f, true)
    }

    fn apply_impl(&self, f: &[C64], adj: bool) -> Vec<C64> {
        let g = &self.grid;
        match &*self.node {
            Node::Identity => f.to_vec(),
            Node::Zero => vec![ZERO; f.len()],
            Node::Scale(c, op) => {
                let c = if adj { c.conj() } else { *c };
                op.apply_impl(f, adj).into_iter().map(|v| v * c).collect()
            }
            Node::Multiply(m) => f
                .iter()
                .zip(m.iter())
                .map(|(a, b)| if adj { a * b.conj() } else { a * b })
                .collect(),
            Node::Poly(p) => {
                if adj {
                    p.conj().apply(g, f)
                } else {
                    p.apply(g, f)
                }
            }
            Node::Dense(m) => {
                let mut buf = f.to_vec();
                fft_forward(g, &mut buf);
                let v = DVector::from_vec(buf);
                let out = if adj { m.ad_mul(&v) } else { &**m * v };
                let mut out: Vec<C64> = out.data.into();
                fft_inverse(g, &mut out);
                out
            }
            Node::Matrix(m) => {
                let v = DVector::from_column_slice(f);
                let out = if adj { m.ad_mul(&v) } else { &**m * v };
                out.data.into()
            }
            Node::Fiber { inner, first_axis } => fiber_apply(g, inner, *first_axis, f, adj),
            Node::Sum(ops) => {
                let mut acc = vec![ZERO; f.len()];
                for op in ops {
                    for (a, b) in acc.iter_mut().zip(op.apply_impl(f, adj)) {
                        *a += b;
                    }
                }
                acc
            }
            Node::Product(ops) => {
                let mut v = f.to_vec();
                if adj {
                    for op in ops.iter() {
                        v = op.apply_impl(&v, true);
                    }
                } else {
                    for op in ops.iter().rev() {
                        v = op.apply_impl(&v, false);
                    }
                }
                v
            }
            Node::Func { apply, adjoint } => {
                if adj {
                    adjoint(f)
                } else {
                    apply(f)
                }
            }
        }
    }

    /// The formal adjoint.
    pub fn adjoint(&self) -> Operator {
        let node = match &*self.node {
            Node::Identity => Node::Identity,
            Node::Zero => Node::Zero,
            Node::Scale(c, op) => Node::Scale(c.conj(), op.adjoint()),
            Node::Multiply(m) => Node::Multiply(Arc::new(m.iter().map(|z| z.conj()).collect())),
            Node::Poly(p) => Node::Poly(p.conj()),
            Node::Dense(m) => Node::Dense(Arc::new(m.adjoint())),
            Node::Matrix(m) => Node::Matrix(Arc::new(m.adjoint())),
            Node::Fiber { inner, first_axis } => Node::Fiber { inner: inner.adjoint(), first_axis: *first_axis },
            Node::Sum(ops) => Node::Sum(ops.iter().map(|o| o.adjoint()).collect()),
            Node::Product(ops) => Node::Product(ops.iter().rev().map(|o| o.adjoint()).collect()),
            Node::Func { apply, adjoint } => Node::Func { apply: adjoint.clone(), adjoint: apply.clone() },
        };
        Operator::with(self.grid, self.time, node)
    }

    /// Hermitian part `(A + A†)/2`.
    pub fn hermitian_part(&self) -> Operator {
        self.plus(&self.adjoint()).scaled(C64::new(0.5, 0.0))
    }

    /// Pointwise real part of the multiplier when the operator is a plain
    /// multiplication (possibly written as a poly symbol of degree zero).
    fn multiplier(&self) -> Option<Vec<C64>> {
        match &*self.node {
            Node::Multiply(m) => Some(m.to_vec()),
            Node::Poly(p) if p.c1.is_empty() && p.c2.is_empty() => Some(match &p.c0 {
                None => vec![ZERO; self.grid.len()],
                Some(Coef::Const(c)) => vec![*c; self.grid.len()],
                Some(Coef::Field(v)) => v.to_vec(),
            }),
            Node::Scale(c, op) => op.multiplier().map(|v| v.into_iter().map(|z| z * c).collect()),
            _ => None,
        }
    }

    /// Fourier multiplier `m(ξ)` in FFT order when the operator is one.
    fn fourier_multiplier(&self) -> Option<Vec<C64>> {
        match &*self.node {
            Node::Poly(p) if p.is_translation_invariant() => Some(p.symbol_on_lattice(&self.grid)),
            Node::Identity => Some(vec![ONE; self.grid.len()]),
            Node::Zero => Some(vec![ZERO; self.grid.len()]),
            Node::Scale(c, op) => op.fourier_multiplier().map(|v| v.into_iter().map(|z| z * c).collect()),
            _ => None,
        }
    }
}

fn fiber_apply(outer: &Grid, inner: &Operator, first: usize, f: &[C64], adj: bool) -> Vec<C64> {
    let n = outer.n();
    let d = inner.grid.dim();
    let block = n.pow(d as u32);
    let post = n.pow((outer.dim() - first - d) as u32);
    let pre = n.pow(first as u32);
    let mut out = vec![ZERO; f.len()];
    let mut sub = vec![ZERO; block];
    for p in 0..pre {
        for q in 0..post {
            for s in 0..block {
                sub[s] = f[(p * block + s) * post + q];
            }
            let r = inner.apply_impl(&sub, adj);
            for s in 0..block {
                out[(p * block + s) * post + q] = r[s];
            }
        }
    }
    out
}

impl PolyOp {
    fn conj(&self) -> PolyOp {
        PolyOp {
            c0: self.c0.as_ref().map(Coef::conj),
            c1: self.c1.iter().map(|(j, c)| (*j, c.conj())).collect(),
            c2: self.c2.iter().map(|(j, k, c)| (*j, *k, c.conj())).collect(),
            freqs: self.freqs.clone(),
        }
    }

    fn is_translation_invariant(&self) -> bool {
        !matches!(self.c0, Some(Coef::Field(_)))
            && self.c1.iter().all(|(_, c)| matches!(c, Coef::Const(_)))
            && self.c2.iter().all(|(_, _, c)| matches!(c, Coef::Const(_)))
    }

    /// Symbol values of the constant-coefficient part on the frequency lattice.
    fn symbol_on_lattice(&self, grid: &Grid) -> Vec<C64> {
        let dim = grid.dim();
        let base = match self.c0 {
            Some(Coef::Const(c)) => c,
            _ => ZERO,
        };
        self.freqs
            .chunks(dim)
            .map(|xi| base + self.const_multiplier(xi))
            .collect()
    }

    fn const_multiplier(&self, xi: &[f64]) -> C64 {
        let mut m = ZERO;
        for (j, c) in &self.c1 {
            if let Coef::Const(c) = c {
                m += c * xi[*j];
            }
        }
        for (j, k, c) in &self.c2 {
            if let Coef::Const(c) = c {
                m += c * (xi[*j] * xi[*k]);
            }
        }
        m
    }

    fn apply(&self, grid: &Grid, f: &[C64]) -> Vec<C64> {
        let dim = grid.dim();
        let len = f.len();
        let mut out = match &self.c0 {
            None => vec![ZERO; len],
            Some(Coef::Const(c)) => f.iter().map(|v| v * c).collect(),
            Some(Coef::Field(c)) => f.iter().zip(c.iter()).map(|(a, b)| a * b).collect(),
        };
        let has_const = self.c1.iter().any(|(_, c)| matches!(c, Coef::Const(_)))
            || self.c2.iter().any(|(_, _, c)| matches!(c, Coef::Const(_)));
        let has_field = self.c1.iter().any(|(_, c)| matches!(c, Coef::Field(_)))
            || self.c2.iter().any(|(_, _, c)| matches!(c, Coef::Field(_)));
        if !has_const && !has_field {
            return out;
        }
        let mut spec = f.to_vec();
        fft_forward(grid, &mut spec);
        if has_const {
            let mut buf: Vec<C64> = spec
                .iter()
                .zip(self.freqs.chunks(dim))
                .map(|(v, xi)| v * self.const_multiplier(xi))
                .collect();
            fft_inverse(grid, &mut buf);
            add_into(&mut out, &buf, ONE);
        }
        if !has_field {
            return out;
        }
        let freqs = &self.freqs;
        // D_j g and D_j D_k g from a transformed input
        let from_spec = |s: &[C64], j: usize, k: Option<usize>| -> Vec<C64> {
            let mut buf: Vec<C64> = s
                .iter()
                .zip(freqs.chunks(dim))
                .map(|(v, xi)| v * (xi[j] * k.map_or(1.0, |k| xi[k])))
                .collect();
            fft_inverse(grid, &mut buf);
            buf
        };
        let transform = |g: &[C64]| -> Vec<C64> {
            let mut b = g.to_vec();
            fft_forward(grid, &mut b);
            b
        };
        let mut df: Vec<Option<Vec<C64>>> = vec![None; dim];
        let d_of = |j: usize, df: &mut Vec<Option<Vec<C64>>>| -> Vec<C64> {
            if df[j].is_none() {
                df[j] = Some(from_spec(&spec, j, None));
            }
            df[j].clone().unwrap()
        };
        for (j, c) in &self.c1 {
            if let Coef::Field(c) = c {
                let dj = d_of(*j, &mut df);
                let cf: Vec<C64> = c.iter().zip(f).map(|(a, b)| a * b).collect();
                let dcf = from_spec(&transform(&cf), *j, None);
                for i in 0..len {
                    out[i] += 0.5 * (c[i] * dj[i] + dcf[i]);
                }
            }
        }
        for (j, k, c) in &self.c2 {
            if let Coef::Field(c) = c {
                let (j, k) = (*j, *k);
                let djk = from_spec(&spec, j, Some(k));
                let cf: Vec<C64> = c.iter().zip(f).map(|(a, b)| a * b).collect();
                let t1 = from_spec(&transform(&cf), j, Some(k));
                let dk = d_of(k, &mut df);
                let cdk: Vec<C64> = c.iter().zip(&dk).map(|(a, b)| a * b).collect();
                let t2 = from_spec(&transform(&cdk), j, None);
                let t3 = if j == k {
                    t2.clone()
                } else {
                    let dj = d_of(j, &mut df);
                    let cdj: Vec<C64> = c.iter().zip(&dj).map(|(a, b)| a * b).collect();
                    from_spec(&transform(&cdj), k, None)
                };
                for i in 0..len {
                    out[i] += 0.25 * (t1[i] + t2[i] + t3[i] + c[i] * djk[i]);
                }
            }
        }
        out
    }
}

fn add_into(acc: &mut [C64], v: &[C64], c: C64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += c * b;
    }
}

/// Fast path for symbols polynomial of degree at most two in ξ. The
/// coefficient fields are read off exactly from values at `ξ = 0, ±e_j,
/// e_j + e_k`.
pub fn quantize_poly(s: &Symbol, grid: &Grid, t: f64) -> Result<Operator> {
    let deg = match s.degree() {
        Degree::Poly(d) if d <= 2 => d,
        other => return Err(Error::Domain(format!("fast path needs degree <= 2 in xi, symbol has {other:?}"))),
    };
    if s.dim() != grid.dim() {
        return Err(Error::GridMismatch(format!("symbol in {} dimensions on a {}-dimensional grid", s.dim(), grid.dim())));
    }
    let dim = grid.dim();
    let len = grid.len();
    let pts = grid.points();
    let zero_xi = vec![0.0; dim];
    let unit = |j: usize, sign: f64| {
        let mut e = vec![0.0; dim];
        e[j] = sign;
        e
    };
    let eval_all = |xi: &[f64]| -> Vec<C64> {
        pts.par_chunks(dim).map(|x| s.eval(t, x, xi)).collect()
    };
    let s0 = eval_all(&zero_xi);
    let scale = s0.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut c1 = Vec::new();
    let mut c2 = Vec::new();
    if deg >= 1 {
        let plus: Vec<Vec<C64>> = (0..dim).map(|j| eval_all(&unit(j, 1.0))).collect();
        let minus: Vec<Vec<C64>> = (0..dim).map(|j| eval_all(&unit(j, -1.0))).collect();
        for j in 0..dim {
            let v: Vec<C64> = (0..len).map(|i| 0.5 * (plus[j][i] - minus[j][i])).collect();
            if let Some(c) = Coef::classify(v, scale) {
                c1.push((j, c));
            }
        }
        if deg == 2 {
            for j in 0..dim {
                let v: Vec<C64> = (0..len).map(|i| 0.5 * (plus[j][i] + minus[j][i]) - s0[i]).collect();
                if let Some(c) = Coef::classify(v, scale) {
                    c2.push((j, j, c));
                }
                for k in j + 1..dim {
                    let mut e = vec![0.0; dim];
                    e[j] = 1.0;
                    e[k] = 1.0;
                    let sjk = eval_all(&e);
                    let v: Vec<C64> = (0..len).map(|i| sjk[i] - plus[j][i] - plus[k][i] + s0[i]).collect();
                    if let Some(c) = Coef::classify(v, scale) {
                        c2.push((j, k, c));
                    }
                }
            }
        }
    }
    let c0 = Coef::classify(s0, scale);
    let p = PolyOp { c0, c1, c2, freqs: Arc::new(grid.freq_points()) };
    Ok(Operator::with(*grid, t, Node::Poly(p)))
}

/// Dense kernel for a general symbol, built in the Fourier basis.
pub fn quantize_dense(s: &Symbol, grid: &Grid, t: f64) -> Result<Operator> {
    let m = dense_momentum_matrix(s, grid, t)?;
    Ok(Operator::with(*grid, t, Node::Dense(Arc::new(m))))
}

/// Fast path when possible, dense kernel otherwise.
pub fn quantize(s: &Symbol, grid: &Grid, t: f64) -> Result<Operator> {
    match s.degree() {
        Degree::Poly(d) if d <= 2 => quantize_poly(s, grid, t),
        _ => quantize_dense(s, grid, t),
    }
}

fn dense_momentum_matrix(s: &Symbol, grid: &Grid, t: f64) -> Result<DMatrix<C64>> {
    let len = grid.len();
    if len > DENSE_LIMIT {
        return Err(Error::Size(format!("dense kernel needs at most {DENSE_LIMIT} points, grid has {len}")));
    }
    if s.dim() != grid.dim() {
        return Err(Error::GridMismatch(format!("symbol in {} dimensions on a {}-dimensional grid", s.dim(), grid.dim())));
    }
    let dim = grid.dim();
    let n = grid.n() as i64;
    let half = n / 2;
    // per-axis sums S = k + k' of signed frequencies range over [-n, n-2]
    let sums_per_axis = (2 * n - 1) as usize;
    let total_sums = sums_per_axis.pow(dim as u32);
    let pts = grid.points();
    let step = grid.freq_step();
    let slot = |k: i64| k.rem_euclid(n) as usize;
    let norm = 1.0 / len as f64;
    let mut m = DMatrix::<C64>::zeros(len, len);
    let chunk = 64usize;
    for start in (0..total_sums).step_by(chunk) {
        let end = (start + chunk).min(total_sums);
        let entries: Vec<Vec<(usize, usize, C64)>> = (start..end)
            .into_par_iter()
            .map(|flat| {
                let mut sum = vec![0i64; dim];
                let mut r = flat;
                for a in (0..dim).rev() {
                    sum[a] = (r % sums_per_axis) as i64 - n;
                    r /= sums_per_axis;
                }
                let zeta: Vec<f64> = sum.iter().map(|&sv| 0.5 * sv as f64 * step).collect();
                let mut g: Vec<C64> = pts.chunks(dim).map(|x| s.eval(t, x, &zeta)).collect();
                fft_forward(grid, &mut g);
                // all k with k' = S - k inside [-n/2, n/2 - 1] on every axis
                let ranges: Vec<(i64, i64)> = sum
                    .iter()
                    .map(|&sv| ((sv - (half - 1)).max(-half), (sv + half).min(half - 1)))
                    .collect();
                let mut out = Vec::new();
                let mut k: Vec<i64> = ranges.iter().map(|r| r.0).collect();
                if ranges.iter().any(|r| r.0 > r.1) {
                    return out;
                }
                loop {
                    let mut col = 0usize;
                    let mut row = 0usize;
                    let mut diff = 0usize;
                    for a in 0..dim {
                        let kp = sum[a] - k[a];
                        col = col * grid.n() + slot(k[a]);
                        row = row * grid.n() + slot(kp);
                        diff = diff * grid.n() + slot(kp - k[a]);
                    }
                    out.push((row, col, g[diff] * norm));
                    // odometer over the admissible box
                    let mut a = dim;
                    loop {
                        if a == 0 {
                            return out;
                        }
                        a -= 1;
                        if k[a] < ranges[a].1 {
                            k[a] += 1;
                            break;
                        }
                        k[a] = ranges[a].0;
                    }
                }
            })
            .collect();
        for list in entries {
            for (r, c, v) in list {
                m[(r, c)] = v;
            }
        }
    }
    Ok(m)
}

/// Position-basis matrix of any operator (columns are images of unit vectors).
pub fn to_dense(op: &Operator) -> Result<DMatrix<C64>> {
    let len = op.grid.len();
    if len > DENSE_LIMIT {
        return Err(Error::Size(format!("dense export needs at most {DENSE_LIMIT} points, grid has {len}")));
    }
    if let Node::Matrix(m) = &*op.node {
        return Ok((**m).clone());
    }
    Ok(linalg::dense_from_apply(|v| op.apply_vec(v), len))
}

/// Binary export: `u64` rows, `u64` cols, then row-major `(re, im)` pairs.
pub fn write_dense_binary(op: &Operator, mut w: impl Write) -> Result<()> {
    let m = to_dense(op)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].re.to_le_bytes())?;
            w.write_all(&m[(i, j)].im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn adjoint(op: &Operator) -> Operator {
    op.adjoint()
}

#[derive(Debug, Clone, Serialize)]
pub struct Floor {
    /// Smallest eigenvalue of the Hermitian part.
    pub value: f64,
    pub residual: f64,
    pub method: String,
}

/// Smallest eigenvalue of `(A + A†)/2`; its negative is the discrete
/// constant `C` in `(Af, f) ≥ −C‖f‖²`.
pub fn garding_floor(op: &Operator) -> Result<Floor> {
    if let Some(m) = op.multiplier() {
        let v = m.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        return Ok(Floor { value: v, residual: 0.0, method: "multiplier".into() });
    }
    if let Some(m) = op.fourier_multiplier() {
        let v = m.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        return Ok(Floor { value: v, residual: 0.0, method: "fourier-multiplier".into() });
    }
    let len = op.grid.len();
    if len <= DENSE_EIGEN_LIMIT {
        let m = to_dense(op)?;
        let ev = linalg::hermitian_part_eigenvalues(&m);
        return Ok(Floor { value: ev[0], residual: 0.0, method: "dense".into() });
    }
    let herm = op.hermitian_part();
    let est = linalg::lanczos_smallest(|v| herm.apply_vec(v), len, 600, 1e-10, 17);
    if !est.converged {
        return Err(Error::NoConvergence { what: "Lanczos".into(), residual: est.residual });
    }
    Ok(Floor { value: est.value, residual: est.residual, method: "lanczos".into() })
}

/// Power-iteration estimate of the operator norm.
pub fn op_norm_estimate(op: &Operator, iters: usize, seed: u64) -> Result<NormEstimate> {
    if iters < 20 {
        return Err(Error::Domain(format!("norm estimate needs at least 20 iterations, got {iters}")));
    }
    Ok(linalg::power_norm(
        |v| op.apply_vec(v),
        |v| op.apply_adjoint_vec(v),
        op.grid.len(),
        20,
        iters,
        seed,
    ))
}
