//! Exponential (e) and mixture (m) parallel transports between points of the
//! simplex, their duality under the Fisher inner product, and the m-flatness
//! and m-curvature diagnostics for section tangent spaces.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{
    center, expectation, inner_product, Distribution, SampleSpace, StateFunction,
};
use crate::numeric::{argmax, stream_rng};
use crate::tangent::{subspace_residual, Subspace};

/// Inputs whose mean under the source point exceeds this are centered first.
const CENTERING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    Duality,
    Flatness,
    CurvatureFree,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairGap {
    pub label: String,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportReport {
    pub kind: TransportKind,
    pub tolerance: f64,
    pub max_gap: f64,
    pub argmax: Option<usize>,
    pub pairs: Vec<PairGap>,
    pub pass: bool,
}

impl TransportReport {
    pub fn from_pairs(kind: TransportKind, tolerance: f64, pairs: Vec<PairGap>) -> Self {
        let gaps: Vec<f64> = pairs.iter().map(|p| p.gap).collect();
        let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
        Self {
            kind,
            tolerance,
            max_gap,
            argmax: argmax(&gaps),
            pass: max_gap <= tolerance,
            pairs,
        }
    }
}

fn centered_at(d: &StateFunction, p: &Distribution, what: &str) -> Result<StateFunction> {
    let m = expectation(d, p)?;
    if m.abs() > CENTERING_TOL {
        log::warn!("{what}: input has mean {m:e} at the source point; centering first");
        center(d, p)
    } else {
        Ok(d.clone())
    }
}

/// `D - E_{P'}[D]`.
pub fn e_transport(d: &StateFunction, p: &Distribution, p_prime: &Distribution) -> Result<StateFunction> {
    let d = centered_at(d, p, "e_transport")?;
    let m = expectation(&d, p_prime)?;
    Ok(d.shift(-m))
}

/// `(dP/dP') D`.
pub fn m_transport(d: &StateFunction, p: &Distribution, p_prime: &Distribution) -> Result<StateFunction> {
    let d = centered_at(d, p, "m_transport")?;
    p.max_abs_diff(p_prime)?;
    let v = d
        .values()
        .iter()
        .zip(p.probs())
        .zip(p_prime.probs())
        .map(|((x, a), b)| a / b * x)
        .collect();
    StateFunction::new(d.space().clone(), v)
}

/// `|<D1, D2>_P - <e(D1), m(D2)>_{P'}|`.
pub fn duality_gap(
    d1: &StateFunction,
    d2: &StateFunction,
    p: &Distribution,
    p_prime: &Distribution,
) -> Result<f64> {
    let before = inner_product(d1, d2, p)?;
    let after = inner_product(&e_transport(d1, p, p_prime)?, &m_transport(d2, p, p_prime)?, p_prime)?;
    Ok((before - after).abs())
}

/// m-transport of every basis vector of `s` (a subspace at `P'`) to `target`,
/// re-orthonormalized there.
pub fn m_transport_subspace(s: &Subspace, target: &Distribution) -> Result<Subspace> {
    let moved = s
        .basis()
        .iter()
        .map(|b| m_transport(b, s.base(), target))
        .collect::<Result<Vec<_>>>()?;
    Subspace::span(target, moved)
}

/// Residual of the containment `m(T_{P'}) ⊆ T_P`; zero certifies it.
pub fn m_flatness_residual(tangent_at_prime: &Subspace, tangent_at_p: &Subspace, p: &Distribution) -> Result<f64> {
    if tangent_at_p.base().max_abs_diff(p)? > 1e-15 {
        return Err(Error::BaseMismatch);
    }
    subspace_residual(&m_transport_subspace(tangent_at_prime, p)?, tangent_at_p)
}

/// `max_b |<EIC, m(b)>_P|` over the orthonormal basis `b` of `T_{P'}`.
pub fn m_curvature_residual(eic: &StateFunction, tangent_at_prime: &Subspace, p: &Distribution) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for b in tangent_at_prime.basis() {
        let moved = m_transport(b, tangent_at_prime.base(), p)?;
        worst = worst.max(inner_product(eic, &moved, p)?.abs());
    }
    Ok(worst)
}

/// Strictly positive random distribution: weights uniform on `[0.05, 1)`.
pub fn random_distribution<R: Rng>(space: &std::sync::Arc<SampleSpace>, rng: &mut R) -> Result<Distribution> {
    let w: Vec<f64> = (0..space.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    Distribution::from_weights(space.clone(), &w)
}

/// Random function centered at `p`, raw values uniform on `[-1, 1)`.
pub fn random_centered<R: Rng>(p: &Distribution, rng: &mut R) -> Result<StateFunction> {
    let f = StateFunction::from_fn(p.space(), |_| rng.random_range(-1.0..1.0));
    center(&f, p)
}

/// Duality gaps over `count` random tuples with the number of states drawn
/// from `states`. Tuple `i` uses stream `i` of `seed`, so the report does not
/// depend on evaluation order.
pub fn duality_survey(
    states: std::ops::RangeInclusive<usize>,
    count: usize,
    seed: u64,
    tol: f64,
) -> Result<TransportReport> {
    let spaces = states
        .clone()
        .map(SampleSpace::indexed)
        .collect::<Result<Vec<_>>>()?;
    let lo = *states.start();
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let k = rng.random_range(states.clone());
            let space = &spaces[k - lo];
            let p = random_distribution(space, &mut rng)?;
            let q = random_distribution(space, &mut rng)?;
            let d1 = random_centered(&p, &mut rng)?;
            let d2 = random_centered(&p, &mut rng)?;
            Ok(PairGap {
                label: format!("tuple {i} (K={k})"),
                gap: duality_gap(&d1, &d2, &p, &q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransportReport::from_pairs(TransportKind::Duality, tol, pairs))
}
