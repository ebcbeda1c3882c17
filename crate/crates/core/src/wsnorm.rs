//! Weighted Sobolev norms `‖·‖_{a,M}` and their `Λ_M`-power realizations.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{guard_boundary, multi_indices, spectral_derivative, Grid, State};
use crate::linalg;
use crate::quantize::{garding_floor, quantize_poly, Operator};
use crate::symbols::{bracket, Degree, Role, Symbol};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryGuard {
    pub margin: f64,
    pub threshold: f64,
}

impl Default for BoundaryGuard {
    fn default() -> Self {
        BoundaryGuard { margin: 0.1, threshold: 1e-8 }
    }
}

impl BoundaryGuard {
    pub fn check(&self, f: &State) -> Result<f64> {
        guard_boundary(f, self.margin, self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormSpec {
    pub a: i32,
    pub m: f64,
    pub mu_prime: f64,
    pub mass: f64,
    pub guard: BoundaryGuard,
}

impl NormSpec {
    pub fn new(a: i32, m: f64) -> Result<NormSpec> {
        if a.abs() > 3 {
            return Err(Error::Domain(format!("Sobolev level {a} outside [-3, 3]")));
        }
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Domain(format!("growth index {m} must be a finite nonnegative number")));
        }
        Ok(NormSpec { a, m, mu_prime: 1.0, mass: 1.0, guard: BoundaryGuard::default() })
    }

    pub fn with_mu_prime(mut self, mu_prime: f64) -> NormSpec {
        self.mu_prime = mu_prime;
        self
    }

    pub fn with_mass(mut self, mass: f64) -> NormSpec {
        self.mass = mass;
        self
    }

    pub fn with_guard(mut self, guard: BoundaryGuard) -> NormSpec {
        self.guard = guard;
        self
    }

    pub fn with_level(mut self, a: i32) -> NormSpec {
        self.a = a;
        self
    }
}

/// `‖f‖ + Σ_{|α|≤2a} ‖∂^α f‖ + ‖<x>^{2a(M+1)} f‖`, and plain `‖f‖` at `a = 0`.
pub fn sobolev_norm(f: &State, spec: &NormSpec) -> Result<f64> {
    if spec.a < 0 {
        return Err(Error::Domain(format!("sobolev_norm needs a >= 0, got {}", spec.a)));
    }
    spec.guard.check(f)?;
    Ok(sobolev_norm_unguarded(f, spec.a as usize, spec.m))
}

pub(crate) fn sobolev_norm_unguarded(f: &State, a: usize, m: f64) -> f64 {
    let base = f.norm();
    if a == 0 {
        return base;
    }
    let derivs: f64 = multi_indices(f.grid().dim(), 2 * a)
        .iter()
        .map(|alpha| spectral_derivative(f, alpha).expect("order within limit").norm())
        .sum();
    let p = 2.0 * a as f64 * (m + 1.0);
    let weighted = f.multiplied(|x| C64::new(bracket(x).powf(p), 0.0)).norm();
    base + derivs + weighted
}

/// `μ′ + |ξ|²/2m + <x>^{2(M+1)}`.
pub fn lambda_m_symbol(dim: usize, spec: &NormSpec) -> Symbol {
    let (mu, mass, p) = (spec.mu_prime, spec.mass, 2.0 * (spec.m + 1.0));
    Symbol::new(dim, Degree::Poly(2), Role::LambdaM, move |_, x, xi| {
        let k: f64 = xi.iter().map(|v| v * v).sum();
        C64::new(mu + k / (2.0 * mass) + bracket(x).powf(p), 0.0)
    })
}

/// `Λ_M` on a grid with the `μ′` actually used.
#[derive(Debug, Clone)]
pub struct LambdaM {
    pub op: Operator,
    pub mu_prime: f64,
    pub floor: f64,
    pub raised: bool,
}

pub fn lambda_m_operator(grid: &Grid, spec: &NormSpec) -> Result<LambdaM> {
    let mut mu = spec.mu_prime;
    let mut raised = false;
    loop {
        let s = lambda_m_symbol(grid.dim(), &spec.with_mu_prime(mu));
        let op = quantize_poly(&s, grid, 0.0)?;
        let floor = garding_floor(&op)?.value;
        if floor > 0.0 {
            return Ok(LambdaM { op, mu_prime: mu, floor, raised });
        }
        mu += 1.0 - floor;
        raised = true;
    }
}

const SOLVE_TOL: f64 = 1e-12;
const SOLVE_LIMIT: f64 = 1e-10;

/// `Λ_M^p f` for `p ∈ {−1, 0, 1}`.
pub fn lambda_m_power_apply(f: &State, spec: &NormSpec, p: i32) -> Result<State> {
    let lam = lambda_m_operator(f.grid(), spec)?;
    apply_power(&lam.op, f, p)
}

fn apply_power(op: &Operator, f: &State, p: i32) -> Result<State> {
    match p {
        0 => Ok(f.clone()),
        1 => op.apply(f),
        -1 => {
            let (x, _) = solve(op, f.values())?;
            State::new(*f.grid(), x, f.time())
        }
        _ => Err(Error::Domain(format!("power {p} outside {{-1, 0, 1}}"))),
    }
}

fn solve(op: &Operator, b: &[C64]) -> Result<(Vec<C64>, linalg::SolveInfo)> {
    let n = b.len();
    match linalg::conjugate_gradient(|v| op.apply_vec(v), b, SOLVE_TOL, 20 * n + 200) {
        Ok(r) => Ok(r),
        Err(_) => linalg::gmres(|v| op.apply_vec(v), b, None, SOLVE_LIMIT, 60, 20 * n + 200),
    }
}

/// `‖Λ_M^a f‖` for `a < 0`.
pub fn dual_norm(f: &State, spec: &NormSpec) -> Result<f64> {
    if spec.a >= 0 {
        return Err(Error::Domain(format!("dual_norm needs a < 0, got {}", spec.a)));
    }
    let lam = lambda_m_operator(f.grid(), spec)?;
    dual_norm_with(&lam, f, spec.a)
}

/// `‖Λ_M^a f‖` for `a < 0` with a prebuilt `Λ_M`.
pub fn dual_norm_with(lam: &LambdaM, f: &State, a: i32) -> Result<f64> {
    let mut g = f.clone();
    for _ in 0..(-a) {
        g = apply_power(&lam.op, &g, -1)?;
    }
    Ok(g.norm())
}

/// `‖f‖_{a,M}` for `a ≥ 0`, `‖Λ_M^a f‖` otherwise.
pub fn level_norm(f: &State, spec: &NormSpec) -> Result<f64> {
    if spec.a >= 0 {
        sobolev_norm(f, spec)
    } else {
        dual_norm(f, spec)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceBand {
    pub a: i32,
    pub m: f64,
    pub mu_prime: f64,
    pub mu_prime_raised: bool,
    pub n_states: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub ratios: Vec<f64>,
}

/// Ratio statistics of `‖f‖_{a,M} / ‖Λ_M^a f‖` over an ensemble.
pub fn norm_equivalence_report(spec: &NormSpec, ensemble: &[State]) -> Result<EquivalenceBand> {
    if ensemble.is_empty() {
        return Err(Error::Domain("empty ensemble".into()));
    }
    if spec.a < 1 {
        return Err(Error::Domain(format!("equivalence band needs a >= 1, got {}", spec.a)));
    }
    let grid = *ensemble[0].grid();
    for f in ensemble {
        grid.check_same(f.grid())?;
        spec.guard.check(f)?;
    }
    let lam = lambda_m_operator(&grid, spec)?;
    let ratios: Vec<f64> = ensemble
        .par_iter()
        .map(|f| {
            let mut g = f.clone();
            for _ in 0..spec.a {
                g = lam.op.apply(&g)?;
            }
            Ok(sobolev_norm_unguarded(f, spec.a as usize, spec.m) / g.norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len();
    let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
    Ok(EquivalenceBand {
        a: spec.a,
        m: spec.m,
        mu_prime: lam.mu_prime,
        mu_prime_raised: lam.raised,
        n_states: k,
        min: sorted[0],
        max: sorted[k - 1],
        median,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{fft_forward, gaussian, random_packet_state};
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid {
        Grid::new(1, n, 10.0).unwrap()
    }

    #[test]
    fn level_zero_is_l2() {
        let g = grid(128);
        let f = gaussian(g, &[0.5], 1.0, &[1.0]);
        let s = NormSpec::new(0, 1.0).unwrap();
        assert_eq!(sobolev_norm(&f, &s).unwrap(), f.norm());
        assert_eq!(sobolev_norm(&State::zeros(g), &s.with_level(2)).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_level_one_matches_quadrature() {
        // f = π^{-1/4} e^{-x²/2}: ‖f'‖² = 1/2, ‖f''‖² = 3/4, ‖<x>² f‖² = 1 + 2·(1/2) + 3/4
        let g = grid(256);
        let f = gaussian(g, &[0.0], 1.0, &[0.0]);
        let s = NormSpec::new(1, 0.0).unwrap();
        let expect = 1.0 + 1.0 + 0.5f64.sqrt() + 0.75f64.sqrt() + (1.0 + 1.0 + 0.75f64).sqrt();
        assert!((sobolev_norm(&f, &s).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn boundary_contamination_is_rejected() {
        let g = grid(128);
        let f = gaussian(g, &[9.0], 1.0, &[0.0]);
        assert!(matches!(sobolev_norm(&f, &NormSpec::new(1, 0.0).unwrap()), Err(Error::Boundary { .. })));
    }

    #[test]
    fn lambda_round_trip() {
        let g = grid(128);
        let f = random_packet_state(g, 3);
        let s = NormSpec::new(1, 1.0).unwrap();
        assert_eq!(lambda_m_power_apply(&f, &s, 0).unwrap().values(), f.values());
        let up = lambda_m_power_apply(&f, &s, 1).unwrap();
        let back = lambda_m_power_apply(&up, &s, -1).unwrap();
        assert!(back.minus(&f).unwrap().norm() <= 1e-9 * f.norm());
        assert!((dual_norm(&up, &s.with_level(-1)).unwrap() - f.norm()).abs() <= 1e-9 * f.norm());
        assert_eq!(dual_norm(&State::zeros(g), &s.with_level(-1)).unwrap(), 0.0);
    }

    #[test]
    fn weightless_inverse_is_a_fourier_multiplier() {
        let g = grid(64);
        let s = Symbol::new(1, Degree::Poly(2), Role::LambdaM, |_, _, xi| C64::new(2.0 + xi[0] * xi[0] / 2.0, 0.0));
        let op = quantize_poly(&s, &g, 0.0).unwrap();
        let k = 5.0 * g.freq_step();
        let f = State::from_fn(g, |x| C64::from_polar(1.0, k * x[0]));
        let (x, _) = solve(&op, f.values()).unwrap();
        let expect = f.scaled(C64::new(1.0 / (2.0 + k * k / 2.0), 0.0));
        let err = x.iter().zip(expect.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let mut spec = x.clone();
        fft_forward(&g, &mut spec);
        assert_eq!(spec.iter().filter(|z| z.norm() > 1e-9).count(), 1);
    }

    #[test]
    fn equivalence_band_is_homogeneous() {
        let g = grid(128);
        let f = gaussian(g, &[0.0], 1.0, &[0.0]);
        let s = NormSpec::new(1, 1.0).unwrap();
        let b1 = norm_equivalence_report(&s, std::slice::from_ref(&f)).unwrap();
        assert!(b1.min > 0.0);
        let b2 = norm_equivalence_report(&s, &[f.clone(), f.scaled(C64::new(2.0, 0.0))]).unwrap();
        assert!((b2.ratios[0] - b2.ratios[1]).abs() < 1e-12 * b2.ratios[0]);
        assert!(!b2.mu_prime_raised);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn norm_axioms(s1 in 0u64..5000, s2 in 0u64..5000, c in -3.0f64..3.0, a in 0i32..3) {
            let g = grid(128);
            let f = random_packet_state(g, s1);
            let h = random_packet_state(g, s2);
            let spec = NormSpec::new(a, 1.0).unwrap();
            let nf = sobolev_norm(&f, &spec).unwrap();
            let nh = sobolev_norm(&h, &spec).unwrap();
            let scaled = sobolev_norm(&f.scaled(C64::new(c, 0.0)), &spec).unwrap();
            prop_assert!((scaled - c.abs() * nf).abs() <= 1e-12 * nf.max(1.0));
            let sum = sobolev_norm(&f.plus(&h).unwrap(), &spec).unwrap();
            prop_assert!(sum <= nf + nh + 1e-12 * (nf + nh));
            let up = sobolev_norm(&f, &spec.with_level(a + 1)).unwrap();
            prop_assert!(nf <= up);
        }
    }
}
