//! Small numerical helpers shared by the geometry and model modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Central-difference steps; the second is half the first so one Richardson
/// step cancels the `h^2` error term.
pub const FD_STEPS: [f64; 2] = [1e-3, 5e-4];

/// Relative cutoff for dropping directions from Gram systems and bases.
pub const RANK_TOL: f64 = 1e-10;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative at `t0` of a scalar function by central differences with one
/// Richardson extrapolation.
pub fn richardson<F>(f: F, t0: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let [h1, h2] = FD_STEPS;
    let d1 = (f(t0 + h1)? - f(t0 - h1)?) / (2.0 * h1);
    let d2 = (f(t0 + h2)? - f(t0 - h2)?) / (2.0 * h2);
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Componentwise version of [`richardson`] for vector-valued functions.
pub fn richardson_vec<F>(f: F, t0: f64) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let [h1, h2] = FD_STEPS;
    let (p1, m1) = (f(t0 + h1)?, f(t0 - h1)?);
    let (p2, m2) = (f(t0 + h2)?, f(t0 - h2)?);
    Ok((0..p1.len())
        .map(|i| {
            let d1 = (p1[i] - m1[i]) / (2.0 * h1);
            let d2 = (p2[i] - m2[i]) / (2.0 * h2);
            (4.0 * d2 - d1) / 3.0
        })
        .collect())
}

/// Minimum-norm solution of the symmetric positive semidefinite system
/// `G c = g`. Singular values below `RANK_TOL * max` are discarded; the number
/// of discarded directions is returned alongside the solution.
pub fn psd_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, usize) {
    let n = gram.nrows();
    if n == 0 {
        return (DVector::zeros(0), 0);
    }
    let svd = gram.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RANK_TOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DVector::zeros(n);
    let mut pruned = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            pruned += 1;
            continue;
        }
        let coef = u.column(k).dot(rhs) / s;
        out += v_t.row(k).transpose() * coef;
    }
    (out, pruned)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Index of the largest value; lowest index on ties.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
