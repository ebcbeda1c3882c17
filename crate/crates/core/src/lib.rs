//! Numerical laboratory for magnetic Schrödinger operators with
//! pseudo-differential damping, `i∂u/∂t = (H(t) − iK(t))u`, where both
//! `H` and `K` are quantized with the midpoint (Weyl) rule on a periodic
//! lattice.
//!
//! Modules build on each other bottom-up: [`field`] holds grids and
//! states, [`symbols`] describes phase-space symbols and checks growth
//! conditions, [`quantize`] turns symbols into operators, [`wsnorm`]
//! measures weighted Sobolev norms, [`evolve`] and [`sensitivity`]
//! propagate, [`calculus`] scans parametrix and commutator norms and
//! [`manybody`] assembles multi-particle generators.

pub mod calculus;
pub mod error;
pub mod evolve;
pub mod expr;
pub mod field;
pub mod linalg;
pub mod manybody;
pub mod quantize;
pub mod sensitivity;
pub mod symbols;
pub mod wsnorm;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

pub(crate) fn stats_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    // least squares y = a + b x, returns (b, a, standard error of b)
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se = if xs.len() > 2 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (b, a, se)
}
