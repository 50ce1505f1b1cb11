use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::manifold::{expectation, inner_product, mixture, StateFunction};
use crate::models::{EstimatingFunction, Parameterization, Section, Which};
use crate::numeric::{argmax, rng};
use crate::tangent::score_at;
use crate::transport::e_transport;

use super::{num, CsvRows};

/// Points of `[0, 1]` where `d/dt E_{P_t}[D]` is checked along a path.
pub const PATH_POINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct MemberOrtho {
    pub index: usize,
    pub tangent_dim: usize,
    /// `max_b |<D, b>_{P'}|` over the section tangent basis at the member.
    pub max_inner: f64,
    /// `max_t |d/dt E_{P_t}[D']|` along the section path from the member to
    /// the base, `D'` evaluated at the member's own parameters.
    pub path_derivative: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrthoReport {
    pub section: String,
    pub which: Which,
    pub seed: u64,
    pub members: usize,
    pub tolerance: f64,
    pub rows: Vec<MemberOrtho>,
    pub max_inner: f64,
    pub argmax_inner: Option<usize>,
    pub max_path_derivative: f64,
    pub argmax_path: Option<usize>,
    pub pass: bool,
}

impl OrthoReport {
    pub fn max_violation(&self) -> f64 {
        self.max_inner.max(self.max_path_derivative)
    }

    fn finish(section: &Section, rows: Vec<MemberOrtho>, tol: f64) -> Self {
        let inner: Vec<f64> = rows.iter().map(|r| r.max_inner).collect();
        let path: Vec<f64> = rows.iter().map(|r| r.path_derivative.unwrap_or(0.0)).collect();
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        let (max_inner, max_path_derivative) = (max(&inner), max(&path));
        Self {
            section: section.label.clone(),
            which: section.which,
            seed: section.seed,
            members: section.len(),
            tolerance: tol,
            argmax_inner: argmax(&inner),
            argmax_path: if rows.iter().any(|r| r.path_derivative.is_some()) { argmax(&path) } else { None },
            max_inner,
            max_path_derivative,
            pass: max_inner <= tol && max_path_derivative <= tol,
            rows,
        }
    }
}

impl CsvRows for OrthoReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["section", "member", "tangent_dim", "max_inner", "path_derivative"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    self.section.clone(),
                    r.index.to_string(),
                    r.tangent_dim.to_string(),
                    num(r.max_inner),
                    r.path_derivative.map(num).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

fn orthogonality(d: &StateFunction, section: &Section, i: usize) -> Result<(usize, f64)> {
    let t = section.tangent_at(i)?;
    let q = &section.members()[i];
    let mut worst: f64 = 0.0;
    for b in t.basis() {
        worst = worst.max(inner_product(d, b, q)?.abs());
    }
    Ok((t.dim(), worst))
}

/// `<D, b>_{P'}` over every member `P'` and section tangent vector `b` at it.
pub fn necessity_check(d_at_truth: &StateFunction, section: &Section, tol: f64) -> Result<OrthoReport> {
    let rows = (0..section.len())
        .into_par_iter()
        .map(|i| {
            let (tangent_dim, max_inner) = orthogonality(d_at_truth, section, i)?;
            Ok(MemberOrtho {
                index: i,
                tangent_dim,
                max_inner,
                path_derivative: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrthoReport::finish(section, rows, tol))
}

#[derive(Debug, Clone, Serialize)]
pub struct IffReport {
    pub function: String,
    pub tolerance: f64,
    pub sections: Vec<OrthoReport>,
    pub max_violation: f64,
    /// Doubly robust according to the orthogonality characterization.
    pub doubly_robust: bool,
}

impl CsvRows for IffReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["section", "member", "tangent_dim", "max_inner", "path_derivative"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.sections.iter().flat_map(|s| s.rows()).collect()
    }
}

/// Orthogonality of `D` at the base to both sections' tangent spaces at every
/// member, plus `g(t) = E_{P_t}[D(theta(P'), gamma(P'))]` being flat along the
/// section path from each member `P'` back to the base.
pub fn iff_check(
    d: &EstimatingFunction,
    param: &Parameterization,
    sections: &[&Section],
    tol: f64,
) -> Result<IffReport> {
    let mut reports = Vec::with_capacity(sections.len());
    for section in sections {
        let d_base = d.at(param, section.base())?;
        let rows = (0..section.len())
            .into_par_iter()
            .map(|i| {
                let (tangent_dim, max_inner) = orthogonality(&d_base, section, i)?;
                let path_derivative = if i == 0 {
                    None
                } else {
                    let d_member = d.at(param, &section.members()[i])?;
                    let path = section.path(i, 0)?;
                    let mut worst: f64 = 0.0;
                    for &t in &PATH_POINTS {
                        let pt = path.at(t)?;
                        worst = worst.max(inner_product(&d_member, &score_at(&path, t)?, &pt)?.abs());
                    }
                    Some(worst)
                };
                Ok(MemberOrtho {
                    index: i,
                    tangent_dim,
                    max_inner,
                    path_derivative,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(OrthoReport::finish(section, rows, tol));
    }
    let max_violation = reports.iter().map(|r| r.max_violation()).fold(0.0, f64::max);
    Ok(IffReport {
        function: d.name.clone(),
        tolerance: tol,
        doubly_robust: reports.iter().all(|r| r.pass),
        max_violation,
        sections: reports,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexityProbe {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    pub section: String,
    pub which: Which,
    pub seed: u64,
    pub tolerance: f64,
    pub probes: Vec<ConvexityProbe>,
    pub max_deviation: f64,
    pub argmax: Option<usize>,
    pub pass: bool,
}

impl CsvRows for ConvexityReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["section", "i", "j", "t", "deviation"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.probes
            .iter()
            .map(|p| vec![self.section.clone(), p.i.to_string(), p.j.to_string(), p.t.to_string(), num(p.deviation)])
            .collect()
    }
}

/// Section membership of `(1 - t) P_i + t P_j` for `pairs` seeded random
/// member pairs and `t` in `{1/4, 1/2, 3/4}`.
pub fn convexity_check(section: &Section, pairs: usize, tol: f64) -> Result<ConvexityReport> {
    let n = section.len();
    let mut chosen = Vec::new();
    if n >= 2 {
        let mut r = rng(section.seed ^ 0x9e37_79b9_7f4a_7c15);
        for _ in 0..pairs {
            let i = r.random_range(0..n);
            let j = (i + r.random_range(1..n)) % n;
            chosen.push((i, j));
        }
    }
    let probes = chosen
        .par_iter()
        .flat_map_iter(|&(i, j)| [0.25, 0.5, 0.75].into_iter().map(move |t| (i, j, t)))
        .map(|(i, j, t)| {
            let q = mixture(&section.members()[i], &section.members()[j], t)?;
            Ok(ConvexityProbe {
                i,
                j,
                t,
                deviation: section.deviation(&q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let devs: Vec<f64> = probes.iter().map(|p| p.deviation).collect();
    let max_deviation = devs.iter().cloned().fold(0.0, f64::max);
    Ok(ConvexityReport {
        section: section.label.clone(),
        which: section.which,
        seed: section.seed,
        tolerance: tol,
        argmax: argmax(&devs),
        pass: max_deviation <= tol,
        max_deviation,
        probes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EInvarianceRow {
    pub index: usize,
    /// `|| e(D, P -> P') - D || = |E_{P'}[D]|`.
    pub transport_gap: f64,
    /// `|E_P[D]|` with the member's varying nuisance swapped in.
    pub swapped_bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EInvarianceReport {
    pub function: String,
    pub section: String,
    pub which: Which,
    pub tolerance: f64,
    pub rows: Vec<EInvarianceRow>,
    pub max_transport_gap: f64,
    pub max_swapped_bias: f64,
    pub invariant: bool,
    pub unbiased: bool,
    /// Both hold or both fail.
    pub equivalent: bool,
}

impl CsvRows for EInvarianceReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["section", "member", "transport_gap", "swapped_bias"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![self.section.clone(), r.index.to_string(), num(r.transport_gap), num(r.swapped_bias)])
            .collect()
    }
}

pub fn e_invariance_check(
    d: &EstimatingFunction,
    param: &Parameterization,
    section: &Section,
    tol: f64,
) -> Result<EInvarianceReport> {
    let p = section.base();
    let (theta, g1, g2) = param.evaluate(p)?;
    let d_truth = d.eval(theta, &g1, &g2)?;
    let rows = section
        .members()
        .par_iter()
        .enumerate()
        .map(|(index, q)| {
            let moved = e_transport(&d_truth, p, q)?;
            let transport_gap = moved.sub(&d_truth)?.max_abs();
            let swapped = param.gamma(section.which, q)?;
            let bias = match section.which {
                Which::One => d.mean(p, theta, &swapped, &g2)?,
                Which::Two => d.mean(p, theta, &g1, &swapped)?,
            };
            debug_assert!((transport_gap - expectation(&d_truth, q)?.abs()).abs() < 1e-12);
            Ok(EInvarianceRow {
                index,
                transport_gap,
                swapped_bias: bias.abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_transport_gap = rows.iter().map(|r| r.transport_gap).fold(0.0, f64::max);
    let max_swapped_bias = rows.iter().map(|r| r.swapped_bias).fold(0.0, f64::max);
    let invariant = max_transport_gap <= tol;
    let unbiased = max_swapped_bias <= tol;
    Ok(EInvarianceReport {
        function: d.name.clone(),
        section: section.label.clone(),
        which: section.which,
        tolerance: tol,
        rows,
        max_transport_gap,
        max_swapped_bias,
        invariant,
        unbiased,
        equivalent: invariant == unbiased,
    })
}
