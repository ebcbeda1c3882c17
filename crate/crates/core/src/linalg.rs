//! Matrix-free Krylov solvers and norm/eigenvalue estimators on complex vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::dot;
use crate::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub fn vnorm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [C64], a: C64, x: &[C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn scale(v: &mut [C64], s: f64) {
    for z in v.iter_mut() {
        *z *= s;
    }
}

pub fn random_vector(n: usize, rng: &mut impl Rng) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveInfo {
    pub iterations: usize,
    pub residual: f64,
}

/// Restarted GMRES for `A x = b`. `tol` is relative to `‖b‖`.
pub fn gmres(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    b: &[C64],
    x0: Option<&[C64]>,
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<C64>, SolveInfo)> {
    let n = b.len();
    let bnorm = vnorm(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; n]);
    if bnorm == 0.0 {
        return Ok((vec![ZERO; n], SolveInfo { iterations: 0, residual: 0.0 }));
    }
    let m = restart.max(1).min(n);
    let mut total = 0;
    loop {
        let ax = apply(&x);
        let mut r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = vnorm(&r);
        let rel = beta / bnorm;
        if rel <= tol {
            return Ok((x, SolveInfo { iterations: total, residual: rel }));
        }
        if total >= max_iter {
            return Err(Error::NoConvergence { what: "GMRES".into(), residual: rel });
        }
        scale(&mut r, 1.0 / beta);
        let mut basis: Vec<Vec<C64>> = vec![r];
        let mut hess = vec![vec![ZERO; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![ZERO; m];
        let mut g = vec![ZERO; m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let mut w = apply(&basis[k]);
            // modified Gram-Schmidt, twice for stability
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let h = dot(&w, v);
                    hess[i][k] += h;
                    axpy(&mut w, -h, v);
                }
            }
            let wn = vnorm(&w);
            hess[k + 1][k] = C64::new(wn, 0.0);
            for i in 0..k {
                let t = cs[i] * hess[i][k] + sn[i] * hess[i + 1][k];
                hess[i + 1][k] = -sn[i].conj() * hess[i][k] + cs[i] * hess[i + 1][k];
                hess[i][k] = t;
            }
            let a = hess[k][k];
            let bk = hess[k + 1][k];
            let denom = (a.norm_sqr() + bk.norm_sqr()).sqrt();
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = ZERO;
            } else if a.norm() == 0.0 {
                cs[k] = 0.0;
                sn[k] = bk.conj() / denom;
            } else {
                cs[k] = a.norm() / denom;
                sn[k] = (a / a.norm()) * bk.conj() / denom;
            }
            hess[k][k] = cs[k] * a + sn[k] * bk;
            hess[k + 1][k] = ZERO;
            g[k + 1] = -sn[k].conj() * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            let res = g[k + 1].norm() / bnorm;
            if res <= tol * 0.5 || wn <= 1e-300 || total >= max_iter {
                break;
            }
            let mut v = w;
            scale(&mut v, 1.0 / wn);
            basis.push(v);
        }
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hess[i][j] * y[j];
            }
            y[i] = s / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(&mut x, *yj, &basis[j]);
        }
    }
}

/// Conjugate gradients for a Hermitian positive definite operator.
pub fn conjugate_gradient(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    b: &[C64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<C64>, SolveInfo)> {
    let n = b.len();
    let bnorm = vnorm(b);
    let mut x = vec![ZERO; n];
    if bnorm == 0.0 {
        return Ok((x, SolveInfo { iterations: 0, residual: 0.0 }));
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r).re;
    for it in 0..max_iter {
        let ap = apply(&p);
        let alpha = rr / dot(&ap, &p).re;
        axpy(&mut x, C64::new(alpha, 0.0), &p);
        axpy(&mut r, C64::new(-alpha, 0.0), &ap);
        let rr_new = dot(&r, &r).re;
        if rr_new.sqrt() / bnorm <= tol {
            // confirm with the true residual
            let ax = apply(&x);
            let true_res = vnorm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>()) / bnorm;
            if true_res <= tol * 10.0 {
                return Ok((x, SolveInfo { iterations: it + 1, residual: true_res }));
            }
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + *pi * beta;
        }
        rr = rr_new;
    }
    Err(Error::NoConvergence { what: "conjugate gradients".into(), residual: rr.sqrt() / bnorm })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EigenEstimate {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Smallest eigenvalue of a Hermitian operator by Lanczos with full
/// reorthogonalization.
pub fn lanczos_smallest(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    n: usize,
    max_steps: usize,
    tol: f64,
    seed: u64,
) -> EigenEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_vector(n, &mut rng);
    let nv = vnorm(&v);
    scale(&mut v, 1.0 / nv);
    let mut basis = vec![v];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let steps = max_steps.min(n).max(1);
    let mut best = EigenEstimate { value: f64::NAN, residual: f64::INFINITY, iterations: 0, converged: false };
    for k in 0..steps {
        let mut w = apply(&basis[k]);
        let a = dot(&w, &basis[k]).re;
        alpha.push(a);
        for _ in 0..2 {
            for b in basis.iter() {
                let h = dot(&w, b);
                axpy(&mut w, -h, b);
            }
        }
        let bn = vnorm(&w);
        let m = alpha.len();
        let mut t = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = alpha[i];
            if i + 1 < m {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (imin, &lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let resid = bn * eig.eigenvectors[(m - 1, imin)].abs();
        let scale_ref = alpha.iter().map(|x| x.abs()).fold(1.0, f64::max);
        best = EigenEstimate { value: lmin, residual: resid, iterations: k + 1, converged: resid <= tol * scale_ref };
        if best.converged || bn <= 1e-14 * scale_ref || k + 1 == steps {
            if bn <= 1e-14 * scale_ref || k + 1 == n {
                best.converged = true;
            }
            break;
        }
        beta.push(bn);
        scale(&mut w, 1.0 / bn);
        basis.push(w);
    }
    best
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    pub rel_change: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const NORM_CHANGE_LIMIT: f64 = 1e-4;

/// Largest singular value by power iteration on `A†A`. Runs at least
/// `min_iters` steps, then stops once the relative change drops below
/// `1e-12` or `max_iters` is reached.
pub fn power_norm(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    apply_adjoint: impl Fn(&[C64]) -> Vec<C64>,
    n: usize,
    min_iters: usize,
    max_iters: usize,
    seed: u64,
) -> NormEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_vector(n, &mut rng);
    let nv = vnorm(&v);
    scale(&mut v, 1.0 / nv);
    let mut sigma = 0.0;
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < max_iters.max(min_iters) {
        it += 1;
        let u = apply(&v);
        let s = vnorm(&u);
        if s == 0.0 {
            return NormEstimate { value: 0.0, rel_change: 0.0, iterations: it, converged: true };
        }
        let mut w = apply_adjoint(&u);
        let wn = vnorm(&w);
        // ‖A†Av‖ ≥ ‖Av‖² for unit v, so sqrt of it tracks σ² from above
        let s_new = (wn).sqrt();
        change = if sigma > 0.0 { (s_new - sigma).abs() / s_new } else { f64::INFINITY };
        sigma = s_new;
        scale(&mut w, 1.0 / wn);
        v = w;
        if it >= min_iters && change < 1e-12 {
            break;
        }
    }
    NormEstimate { value: sigma, rel_change: change, iterations: it, converged: change <= NORM_CHANGE_LIMIT }
}

/// Dense matrix with columns `apply(e_j)`.
pub fn dense_from_apply(apply: impl Fn(&[C64]) -> Vec<C64> + Sync, n: usize) -> DMatrix<C64> {
    use rayon::prelude::*;
    let cols: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![ZERO; n];
            e[j] = C64::new(1.0, 0.0);
            apply(&e)
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| cols[j][i])
}

/// Eigenvalues of `(A + A†)/2`, ascending.
pub fn hermitian_part_eigenvalues(a: &DMatrix<C64>) -> Vec<f64> {
    let h = (a + a.adjoint()) * C64::new(0.5, 0.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn largest_singular_value(a: &DMatrix<C64>) -> f64 {
    a.clone().svd(false, false).singular_values.iter().copied().fold(0.0, f64::max)
}

pub fn matvec(a: &DMatrix<C64>, x: &[C64]) -> Vec<C64> {
    (a * DVector::from_column_slice(x)).as_slice().to_vec()
}
