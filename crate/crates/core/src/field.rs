//! Periodic lattices, complex fields on them, FFT-based differentiation and
//! the boundary-mass monitor.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

pub const MAX_DERIVATIVE_ORDER: usize = 6;
const MAX_POINTS: usize = 1 << 22;

/// Uniform periodic lattice on `[-L, L)^D` with `N` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
    half_width: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize, half_width: f64) -> Result<Grid> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("points per axis must be even, got {n}")));
        }
        if n < 8 {
            return Err(Error::InvalidGrid(format!("points per axis must be at least 8, got {n}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidGrid(format!("half width must be positive, got {half_width}")));
        }
        let total = (0..dim).try_fold(1usize, |acc, _| acc.checked_mul(n));
        match total {
            Some(t) if t <= MAX_POINTS => Ok(Grid { dim, n, half_width }),
            _ => Err(Error::Size(format!("{n}^{dim} points exceeds the limit of {MAX_POINTS}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    /// Total number of lattice points, `N^D`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lattice volume element `h^D`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn coord(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.spacing()
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.coord(j)).collect()
    }

    /// Signed integer frequency of FFT slot `k`, in `{-N/2, ..., N/2-1}`.
    pub fn freq_index(&self, k: usize) -> i64 {
        let n = self.n as i64;
        let k = k as i64;
        if k < n / 2 {
            k
        } else {
            k - n
        }
    }

    pub fn freq_step(&self) -> f64 {
        std::f64::consts::PI / self.half_width
    }

    /// Angular frequency of FFT slot `k`.
    pub fn freq(&self, k: usize) -> f64 {
        self.freq_index(k) as f64 * self.freq_step()
    }

    /// Frequencies in FFT order.
    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.freq(k)).collect()
    }

    /// Frequencies in ascending order.
    pub fn freqs_sorted(&self) -> Vec<f64> {
        let mut f = self.freqs();
        f.sort_by(|a, b| a.partial_cmp(b).unwrap());
        f
    }

    pub fn is_nyquist(&self, k: usize) -> bool {
        k == self.n / 2
    }

    /// Multi-index of a flat row-major position (axis 0 slowest).
    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.dim).rev() {
            out[a] = idx % self.n;
            idx /= self.n;
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &j| acc * self.n + j)
    }

    /// Position of a flat index.
    pub fn point(&self, idx: usize, out: &mut [f64]) {
        let mut m = vec![0; self.dim];
        self.unravel(idx, &mut m);
        for a in 0..self.dim {
            out[a] = self.coord(m[a]);
        }
    }

    /// All lattice positions, flattened (`len * dim` entries).
    pub fn points(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len() * self.dim];
        for (idx, chunk) in out.chunks_mut(self.dim).enumerate() {
            self.point(idx, chunk);
        }
        out
    }

    /// All lattice frequencies in FFT order, flattened.
    pub fn freq_points(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len() * self.dim];
        let mut m = vec![0; self.dim];
        for (idx, chunk) in out.chunks_mut(self.dim).enumerate() {
            self.unravel(idx, &mut m);
            for a in 0..self.dim {
                chunk[a] = self.freq(m[a]);
            }
        }
        out
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Complex field on a grid, tagged with the time it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    grid: Grid,
    values: Vec<C64>,
    time: f64,
}

impl State {
    pub fn new(grid: Grid, values: Vec<C64>, time: f64) -> Result<State> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Domain("state contains non-finite values".into()));
        }
        Ok(State { grid, values, time })
    }

    pub fn zeros(grid: Grid) -> State {
        State { grid, values: vec![C64::new(0.0, 0.0); grid.len()], time: 0.0 }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> C64) -> State {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.point(i, &mut x);
                f(&x)
            })
            .collect();
        State { grid, values, time: 0.0 }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, t: f64) -> State {
        self.time = t;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    pub fn scaled(&self, c: C64) -> State {
        State { values: self.values.iter().map(|v| v * c).collect(), ..self.clone() }
    }

    pub fn normalized(&self) -> State {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            self.scaled(C64::new(1.0 / n, 0.0))
        }
    }

    /// `self - other`; grids must agree.
    pub fn minus(&self, other: &State) -> Result<State> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(State { values, ..self.clone() })
    }

    pub fn plus(&self, other: &State) -> Result<State> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(State { values, ..self.clone() })
    }

    pub fn conj(&self) -> State {
        State { values: self.values.iter().map(|v| v.conj()).collect(), ..self.clone() }
    }

    /// Pointwise product with a function of position.
    pub fn multiplied(&self, f: impl Fn(&[f64]) -> C64) -> State {
        let mut x = vec![0.0; self.grid.dim()];
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.grid.point(i, &mut x);
                v * f(&x)
            })
            .collect();
        State { values, ..self.clone() }
    }
}

/// `h^D Σ f·conj(g)`, conjugate linear in the second slot.
pub fn inner_product(f: &State, g: &State) -> Result<C64> {
    f.grid.check_same(&g.grid)?;
    Ok(dot(&f.values, &g.values) * f.grid.cell_volume())
}

pub fn norm(f: &State) -> f64 {
    (f.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * f.grid.cell_volume()).sqrt()
}

/// Plain `Σ a·conj(b)` in fixed order.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).fold(C64::new(0.0, 0.0), |acc, (x, y)| acc + x * y.conj())
}

// ---------------------------------------------------------------------------
// FFT

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    type Cache = Mutex<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cache.lock().unwrap();
    let (planner, map) = &mut *guard;
    map.entry((n, inverse))
        .or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Unnormalized D-dimensional FFT in place over row-major data.
pub fn fft_nd(grid: &Grid, data: &mut [C64], inverse: bool) {
    let n = grid.n();
    let dim = grid.dim();
    let fft = plan(n, inverse);
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            continue;
        }
        let block = n * stride;
        let mut lines = vec![C64::new(0.0, 0.0); block];
        for chunk in data.chunks_mut(block) {
            for i in 0..stride {
                for j in 0..n {
                    lines[i * n + j] = chunk[j * stride + i];
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            for i in 0..stride {
                for j in 0..n {
                    chunk[j * stride + i] = lines[i * n + j];
                }
            }
        }
    }
}

/// Forward transform.
pub fn fft_forward(grid: &Grid, data: &mut [C64]) {
    fft_nd(grid, data, false);
}

/// Inverse transform including the `1/N^D` factor.
pub fn fft_inverse(grid: &Grid, data: &mut [C64]) {
    fft_nd(grid, data, true);
    let s = 1.0 / grid.len() as f64;
    for v in data.iter_mut() {
        *v *= s;
    }
}

/// Apply a Fourier multiplier `m(ξ)` to raw values.
pub fn fourier_multiply(grid: &Grid, values: &[C64], m: impl Fn(&[f64]) -> C64) -> Vec<C64> {
    let mut buf = values.to_vec();
    fft_forward(grid, &mut buf);
    let freqs = grid.freq_points();
    for (v, xi) in buf.iter_mut().zip(freqs.chunks(grid.dim())) {
        *v *= m(xi);
    }
    fft_inverse(grid, &mut buf);
    buf
}

fn ipow(z: C64, k: usize) -> C64 {
    (0..k).fold(C64::new(1.0, 0.0), |acc, _| acc * z)
}

/// `∂^α f` by multiplication with `(iξ)^α`. The unpaired Nyquist mode is
/// zeroed for odd orders so real inputs stay real.
pub fn spectral_derivative(f: &State, alpha: &[usize]) -> Result<State> {
    let grid = f.grid;
    if alpha.len() != grid.dim() {
        return Err(Error::Domain(format!(
            "multi-index has {} entries for a {}-dimensional grid",
            alpha.len(),
            grid.dim()
        )));
    }
    let order: usize = alpha.iter().sum();
    if order > MAX_DERIVATIVE_ORDER {
        return Err(Error::Domain(format!(
            "derivative order {order} exceeds the maximum {MAX_DERIVATIVE_ORDER}"
        )));
    }
    if order == 0 {
        return Ok(f.clone());
    }
    let mut buf = f.values.clone();
    fft_forward(&grid, &mut buf);
    let mut m = vec![0; grid.dim()];
    for (idx, v) in buf.iter_mut().enumerate() {
        grid.unravel(idx, &mut m);
        let mut factor = C64::new(1.0, 0.0);
        for a in 0..grid.dim() {
            if alpha[a] == 0 {
                continue;
            }
            if alpha[a] % 2 == 1 && grid.is_nyquist(m[a]) {
                factor = C64::new(0.0, 0.0);
                break;
            }
            factor *= ipow(C64::new(0.0, grid.freq(m[a])), alpha[a]);
        }
        *v *= factor;
    }
    fft_inverse(&grid, &mut buf);
    Ok(State { grid, values: buf, time: f.time })
}

/// All multi-indices of dimension `dim` with total order at most `max`.
pub fn multi_indices(dim: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; dim];
    fn rec(a: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if a == cur.len() {
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur[a] = k;
            rec(a + 1, left - k, cur, out);
        }
        cur[a] = 0;
    }
    rec(0, max, &mut cur, &mut out);
    out.sort_by_key(|m| m.iter().sum::<usize>());
    out
}

/// Fraction of `‖f‖²` in the boundary layer. The layer on each face is
/// `margin_fraction` of the box width, so a uniform state gives
/// `1 − (1 − 2·margin)^D`.
pub fn boundary_mass(f: &State, margin_fraction: f64) -> Result<f64> {
    if !(margin_fraction > 0.0 && margin_fraction < 0.5) {
        return Err(Error::Domain(format!("margin fraction {margin_fraction} outside (0, 0.5)")));
    }
    let grid = f.grid;
    let l = grid.half_width();
    let band = margin_fraction * 2.0 * l;
    let near: Vec<bool> = grid
        .coords()
        .iter()
        .map(|&x| x + l < band || l - x < band)
        .collect();
    let mut m = vec![0; grid.dim()];
    let mut total = 0.0;
    let mut edge = 0.0;
    for (idx, v) in f.values.iter().enumerate() {
        let w = v.norm_sqr();
        total += w;
        grid.unravel(idx, &mut m);
        if m.iter().any(|&j| near[j]) {
            edge += w;
        }
    }
    Ok(if total == 0.0 { 0.0 } else { edge / total })
}

/// Error unless the boundary mass is at most `threshold`.
pub fn guard_boundary(f: &State, margin_fraction: f64, threshold: f64) -> Result<f64> {
    let mass = boundary_mass(f, margin_fraction)?;
    if mass > threshold {
        Err(Error::Boundary { mass, threshold })
    } else {
        Ok(mass)
    }
}

// ---------------------------------------------------------------------------
// states

pub fn gaussian(grid: Grid, center: &[f64], width: f64, momentum: &[f64]) -> State {
    State::from_fn(grid, |x| {
        let mut r2 = 0.0;
        let mut phase = 0.0;
        for a in 0..x.len() {
            let d = x[a] - center.get(a).copied().unwrap_or(0.0);
            r2 += d * d;
            phase += momentum.get(a).copied().unwrap_or(0.0) * d;
        }
        C64::from_polar((-r2 / (2.0 * width * width)).exp(), phase)
    })
    .normalized()
}

/// Normalized superposition of one to three Gaussian packets. The packet
/// parameters depend only on the seed and `L`, so the same seed gives the
/// same continuum function on every resolution.
pub fn random_packet_state(grid: Grid, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = grid.half_width();
    let count = rng.gen_range(1..=3);
    let dim = grid.dim();
    let mut packets = Vec::with_capacity(count);
    for _ in 0..count {
        let center: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.25 * l..0.25 * l)).collect();
        let momentum: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let width = rng.gen_range(0.05 * l..0.1 * l);
        let amp = C64::from_polar(rng.gen_range(0.5..1.0), rng.gen_range(0.0..std::f64::consts::TAU));
        packets.push((center, momentum, width, amp));
    }
    State::from_fn(grid, |x| {
        packets.iter().fold(C64::new(0.0, 0.0), |acc, (c, k, w, amp)| {
            let mut r2 = 0.0;
            let mut phase = 0.0;
            for a in 0..x.len() {
                let d = x[a] - c[a];
                r2 += d * d;
                phase += k[a] * x[a];
            }
            acc + amp * C64::from_polar((-r2 / (2.0 * w * w)).exp(), phase)
        })
    })
    .normalized()
}

/// Trigonometric interpolation onto a finer grid with the same box.
pub fn resample(f: &State, target: Grid) -> Result<State> {
    let src = f.grid;
    if src.dim() != target.dim() || src.half_width() != target.half_width() || target.n() < src.n() {
        return Err(Error::GridMismatch(format!("cannot resample {src:?} onto {target:?}")));
    }
    let dim = src.dim();
    let mut coef = f.values.clone();
    fft_forward(&src, &mut coef);
    let scale = 1.0 / src.len() as f64;
    let mut out = vec![C64::new(0.0, 0.0); target.len()];
    let mut m = vec![0; dim];
    let tn = target.n() as i64;
    let to_slot = |k: i64| (k.rem_euclid(tn)) as usize;
    for (idx, c) in coef.iter().enumerate() {
        src.unravel(idx, &mut m);
        // an old Nyquist mode is split evenly between ±N/2 on the finer grid
        let mut targets: Vec<(Vec<usize>, f64)> = vec![(Vec::with_capacity(dim), 1.0)];
        for &j in m.iter() {
            let k = src.freq_index(j);
            let opts: Vec<(usize, f64)> = if src.is_nyquist(j) && target.n() > src.n() {
                vec![(to_slot(k), 0.5), (to_slot(-k), 0.5)]
            } else {
                vec![(to_slot(k), 1.0)]
            };
            targets = targets
                .into_iter()
                .flat_map(|(pre, w)| {
                    opts.iter().map(move |&(s, ws)| {
                        let mut p = pre.clone();
                        p.push(s);
                        (p, w * ws)
                    })
                })
                .collect();
        }
        for (slots, w) in targets {
            out[target.ravel(&slots)] += c * (w * scale);
        }
    }
    fft_nd(&target, &mut out, true);
    Ok(State { grid: target, values: out, time: f.time })
}

// ---------------------------------------------------------------------------
// serialization

pub fn write_binary(f: &State, mut w: impl Write) -> Result<()> {
    w.write_all(&(f.grid.dim() as u64).to_le_bytes())?;
    w.write_all(&(f.grid.n() as u64).to_le_bytes())?;
    w.write_all(&f.grid.half_width().to_le_bytes())?;
    w.write_all(&f.time.to_le_bytes())?;
    for v in &f.values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(mut r: impl Read) -> Result<State> {
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
        r.read_exact(&mut b8)?;
        Ok(b8)
    };
    let dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let l = f64::from_le_bytes(next(&mut r)?);
    let t = f64::from_le_bytes(next(&mut r)?);
    let grid = Grid::new(dim, n, l)?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let re = f64::from_le_bytes(next(&mut r)?);
        let im = f64::from_le_bytes(next(&mut r)?);
        values.push(C64::new(re, im));
    }
    State::new(grid, values, t)
}

pub fn write_csv(f: &State, mut w: impl Write) -> Result<()> {
    writeln!(w, "dim,n,half_width,time_tag")?;
    writeln!(w, "{},{},{:e},{:e}", f.grid.dim(), f.grid.n(), f.grid.half_width(), f.time)?;
    writeln!(w, "re,im")?;
    for v in &f.values {
        writeln!(w, "{:e},{:e}", v.re, v.im)?;
    }
    Ok(())
}

pub fn read_csv(r: impl BufRead) -> Result<State> {
    let mut lines = r.lines();
    let mut line = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing {what}")))?
            .map_err(Error::from)
    };
    line("header")?;
    let head = line("grid line")?;
    let fields: Vec<&str> = head.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(Error::Parse(format!("grid line needs 4 fields: '{head}'")));
    }
    let bad = |s: &str| Error::Parse(format!("bad number '{s}'"));
    let dim: usize = fields[0].parse().map_err(|_| bad(fields[0]))?;
    let n: usize = fields[1].parse().map_err(|_| bad(fields[1]))?;
    let l: f64 = fields[2].parse().map_err(|_| bad(fields[2]))?;
    let t: f64 = fields[3].parse().map_err(|_| bad(fields[3]))?;
    let grid = Grid::new(dim, n, l)?;
    line("column header")?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let row = line("value row")?;
        let (re, im) = row.split_once(',').ok_or_else(|| Error::Parse(format!("bad row '{row}'")))?;
        values.push(C64::new(
            re.trim().parse().map_err(|_| bad(re))?,
            im.trim().parse().map_err(|_| bad(im))?,
        ));
    }
    State::new(grid, values, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn grid_frequencies() {
        let g = Grid::new(1, 8, PI).unwrap();
        assert_eq!(g.freqs_sorted(), vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        let g2 = Grid::new(2, 8, PI).unwrap();
        assert_eq!(g2.len(), 64);
        assert!((g.spacing() - PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(Grid::new(1, 7, 1.0), Err(Error::InvalidGrid(_))));
        assert!(Grid::new(1, 6, 1.0).is_err());
        assert!(Grid::new(1, 8, 0.0).is_err());
        assert!(Grid::new(1, 8, -1.0).is_err());
        assert!(matches!(Grid::new(4, 128, 1.0), Err(Error::Size(_))));
        assert!(Grid::new(2, 2048, 1.0).is_ok());
    }

    #[test]
    fn inner_product_examples() {
        let g = Grid::new(1, 64, PI).unwrap();
        let f = gaussian(g, &[0.0], 0.3, &[0.0]);
        let ip = inner_product(&f, &f).unwrap();
        assert!((ip.re - 1.0).abs() < 1e-12 && ip.im.abs() < 1e-12);
        let fi = f.scaled(C64::new(0.0, 1.0));
        let ip = inner_product(&f, &fi).unwrap();
        assert!((ip - C64::new(0.0, -1.0)).norm() < 1e-12);
        let s1 = State::from_fn(g, |x| c(x[0].sin()));
        let s2 = State::from_fn(g, |x| c((2.0 * x[0]).sin()));
        assert!(inner_product(&s1, &s2).unwrap().norm() < 1e-12);
        let other = State::zeros(Grid::new(1, 32, PI).unwrap());
        assert!(matches!(inner_product(&f, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn derivative_of_band_limited_input() {
        let g = Grid::new(1, 64, PI).unwrap();
        let f = State::from_fn(g, |x| c((3.0 * x[0]).sin()));
        let d = spectral_derivative(&f, &[1]).unwrap();
        let err = d
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| (v - c(3.0 * (3.0 * g.coord(j)).cos())).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-11, "{err}");
        let one = State::from_fn(g, |_| c(1.0));
        let d = spectral_derivative(&one, &[1]).unwrap();
        assert!(d.values().iter().all(|v| v.norm() < 1e-13));
        assert!(spectral_derivative(&one, &[7]).is_err());
    }

    #[test]
    fn second_derivative_matches_finite_differences_at_second_order() {
        // centered differences carry an O(h²) error against the spectral value
        let errs: Vec<f64> = [64usize, 128]
            .iter()
            .map(|&n| {
                let g = Grid::new(1, n, 8.0).unwrap();
                let f = State::from_fn(g, |x| c((-x[0] * x[0]).exp()));
                let d2 = spectral_derivative(&f, &[2]).unwrap();
                let h = g.spacing();
                let v = f.values();
                (0..n)
                    .map(|j| {
                        let fd = (v[(j + 1) % n] - 2.0 * v[j] + v[(j + n - 1) % n]) / (h * h);
                        (fd - d2.values()[j]).norm()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn boundary_mass_examples() {
        let g = Grid::new(1, 256, 10.0).unwrap();
        let f = gaussian(g, &[0.0], 0.5, &[0.0]);
        assert!(boundary_mass(&f, 0.1).unwrap() <= 1e-12);
        for dim in [1, 2] {
            let g = Grid::new(dim, 200, 10.0).unwrap();
            let uniform = State::from_fn(g, |_| c(1.0));
            let expect = 1.0 - 0.8f64.powi(dim as i32);
            let mass = boundary_mass(&uniform, 0.1).unwrap();
            assert!((mass - expect).abs() < 0.01, "{mass}");
            let wave = State::from_fn(g, |x| C64::from_polar(1.0, g.freq_step() * 3.0 * x[0]));
            assert!((boundary_mass(&wave, 0.1).unwrap() - mass).abs() < 1e-12);
        }
        assert!(boundary_mass(&f, 0.5).is_err());
        assert!(guard_boundary(&State::from_fn(g, |_| c(1.0)), 0.1, 1e-8).is_err());
    }

    #[test]
    fn resample_preserves_band_limited_functions() {
        let g = Grid::new(1, 64, 8.0).unwrap();
        let fine = Grid::new(1, 128, 8.0).unwrap();
        let f = gaussian(g, &[0.5], 0.7, &[1.0]);
        let r = resample(&f, fine).unwrap();
        let direct = gaussian(fine, &[0.5], 0.7, &[1.0]);
        assert!(r.minus(&direct).unwrap().norm() < 1e-12);
        let g2 = Grid::new(2, 32, 8.0).unwrap();
        let f2 = gaussian(g2, &[0.3, -0.2], 1.5, &[0.0, 0.5]);
        let r2 = resample(&f2, Grid::new(2, 64, 8.0).unwrap()).unwrap();
        assert!((r2.norm() - f2.norm()).abs() < 1e-10);
    }

    #[test]
    fn serialization_round_trips() {
        let g = Grid::new(2, 8, 3.0).unwrap();
        let f = random_packet_state(g, 7).with_time(0.25);
        let mut bin = Vec::new();
        write_binary(&f, &mut bin).unwrap();
        assert_eq!(read_binary(bin.as_slice()).unwrap(), f);
        let mut csv = Vec::new();
        write_csv(&f, &mut csv).unwrap();
        let back = read_csv(csv.as_slice()).unwrap();
        assert_eq!(back.grid(), f.grid());
        assert_eq!(back.time(), 0.25);
        assert!(back.minus(&f).unwrap().norm() < 1e-14);
        assert!(read_csv("dim,n\n1,7,1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn multi_index_enumeration() {
        let m = multi_indices(2, 2);
        assert_eq!(m.len(), 6);
        assert_eq!(m[0], vec![0, 0]);
        assert!(m.iter().all(|a| a.iter().sum::<usize>() <= 2));
    }

    fn random_state(grid: Grid, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        State::new(grid, values, 0.0).unwrap()
    }

    proptest! {
        #[test]
        fn parseval(seed in 0u64..1000, dim in 1usize..3) {
            let g = Grid::new(dim, 16, 2.5).unwrap();
            let f = random_state(g, seed);
            let mut coef = f.values().to_vec();
            fft_forward(&g, &mut coef);
            let freq_side = coef.iter().map(|v| v.norm_sqr()).sum::<f64>() * g.cell_volume() / g.len() as f64;
            let pos_side = f.norm().powi(2);
            prop_assert!((freq_side - pos_side).abs() <= 1e-12 * pos_side);
        }

        #[test]
        fn inner_product_is_hermitian(s1 in 0u64..1000, s2 in 0u64..1000) {
            let g = Grid::new(1, 32, 4.0).unwrap();
            let f = random_state(g, s1);
            let h = random_state(g, s2 + 5000);
            let a = inner_product(&f, &h).unwrap();
            let b = inner_product(&h, &f).unwrap().conj();
            prop_assert!((a - b).norm() <= 1e-14 * (1.0 + a.norm()));
        }

        #[test]
        fn mixed_derivatives_commute(seed in 0u64..500) {
            let g = Grid::new(2, 16, 3.0).unwrap();
            let f = random_packet_state(g, seed);
            let xy = spectral_derivative(&spectral_derivative(&f, &[1, 0]).unwrap(), &[0, 1]).unwrap();
            let yx = spectral_derivative(&spectral_derivative(&f, &[0, 1]).unwrap(), &[1, 0]).unwrap();
            let dev = xy.values().iter().zip(yx.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(dev <= 1e-12);
        }
    }
}
