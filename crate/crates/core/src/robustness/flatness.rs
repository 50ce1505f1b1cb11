use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::manifold::inner_product;
use crate::models::{Model, Which};
use crate::tangent::eic_from_chart;
use crate::transport::{m_curvature_residual, m_flatness_residual, PairGap, TransportKind, TransportReport};

use super::{convexity_check, dr_bruteforce, theta_slope, ConvexityReport};

#[derive(Debug, Clone, Serialize)]
pub struct FlatnessConfig {
    pub members: usize,
    pub seed: u64,
    pub pairs: usize,
    pub grid_size: usize,
    pub tol_convex: f64,
    pub tol_flat: f64,
    pub tol_curvature: f64,
    pub tol_dr: f64,
    /// Riesz-identity tolerance deciding whether a normalized estimating
    /// function is an influence curve.
    pub tol_ic: f64,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self {
            members: 50,
            seed: 0,
            pairs: 67,
            grid_size: 200,
            tol_convex: 1e-12,
            tol_flat: 1e-10,
            tol_curvature: 1e-8,
            tol_dr: 1e-8,
            tol_ic: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SectionGeometryReport {
    pub section: String,
    pub which: Which,
    pub declared_convex: bool,
    pub convexity: ConvexityReport,
    pub flatness: TransportReport,
    pub curvature: TransportReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionVerdict {
    pub function: String,
    /// `max_j |<D / (-d theta' E D), s_j> - d theta / d x_j|` over chart scores.
    pub ic_gap: f64,
    pub is_ic: bool,
    pub dr_max1: f64,
    pub dr_max2: f64,
    pub doubly_robust: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Chain {
    pub convex_implies_flat: bool,
    pub flat_implies_curvature_free: bool,
    pub curvature_free_implies_eic_dr: bool,
    pub flat_implies_ics_dr: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatnessReport {
    pub model: String,
    pub parameterization: String,
    pub config: FlatnessConfig,
    pub sections: Vec<SectionGeometryReport>,
    pub eic_rank: usize,
    pub eic_pruned: usize,
    /// `max |IC_eff - EIC|` for the first (efficient) estimating function.
    pub efficient_gap: f64,
    pub functions: Vec<FunctionVerdict>,
    pub convex: bool,
    pub flat: bool,
    pub curvature_free: bool,
    pub eic_dr: bool,
    pub chain: Chain,
    pub pass: bool,
}

/// m-flatness and m-curvature of both sections at the truth, with the
/// implication chain convex => flat => curvature-free => EIC doubly robust
/// cross-checked against brute-force verdicts.
pub fn flatness_suite(model: &dyn Model, config: &FlatnessConfig) -> Result<FlatnessReport> {
    let p = model.truth();
    let param = model.parameterization();
    let chart = model.chart()?;
    let eic = eic_from_chart(&chart, &*param.theta, p)?;
    let scores = chart.scores()?;

    let mut sections = Vec::with_capacity(2);
    for (k, which) in [Which::One, Which::Two].into_iter().enumerate() {
        let section = model.sample_section(p, which, config.members, config.seed.wrapping_add(k as u64 + 1))?;
        let convexity = convexity_check(&section, config.pairs, config.tol_convex)?;
        let at_p = section.tangent_at(0)?;
        let rows = (1..section.len())
            .into_par_iter()
            .map(|i| {
                let t = section.tangent_at(i)?;
                Ok((m_flatness_residual(&t, &at_p, p)?, m_curvature_residual(&eic.eic, &t, p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = |i: usize| format!("{} member {}", section.label, i + 1);
        let flat = rows.iter().enumerate().map(|(i, r)| PairGap { label: label(i), gap: r.0 }).collect();
        let curv = rows.iter().enumerate().map(|(i, r)| PairGap { label: label(i), gap: r.1 }).collect();
        sections.push(SectionGeometryReport {
            section: section.label.clone(),
            which,
            declared_convex: section.is_convex(),
            convexity,
            flatness: TransportReport::from_pairs(TransportKind::Flatness, config.tol_flat, flat),
            curvature: TransportReport::from_pairs(TransportKind::CurvatureFree, config.tol_curvature, curv),
        });
    }

    let grid1 = model.nuisance_grid(Which::One, config.grid_size, config.seed.wrapping_add(11));
    let grid2 = model.nuisance_grid(Which::Two, config.grid_size, config.seed.wrapping_add(12));
    let mut functions = Vec::new();
    let mut efficient_gap = f64::INFINITY;
    for (k, d) in model.estimating_functions().iter().enumerate() {
        let slope = theta_slope(d, &param, p)?;
        let ic = d.at(&param, p)?.scale(-1.0 / slope);
        let mut ic_gap: f64 = 0.0;
        for (s, g) in scores.iter().zip(&eic.gradient) {
            ic_gap = ic_gap.max((inner_product(&ic, s, p)? - g).abs());
        }
        if k == 0 {
            efficient_gap = ic.max_abs_diff(&eic.eic)?;
        }
        let dr = dr_bruteforce(model.name(), d, &param, p, &grid1, &grid2, config.tol_dr)?;
        functions.push(FunctionVerdict {
            function: d.name.clone(),
            ic_gap,
            is_ic: ic_gap <= config.tol_ic,
            dr_max1: dr.max1,
            dr_max2: dr.max2,
            doubly_robust: dr.pass,
        });
    }

    let convex = sections.iter().all(|s| s.convexity.pass);
    let flat = sections.iter().all(|s| s.flatness.pass);
    let curvature_free = sections.iter().all(|s| s.curvature.pass);
    let eic_dr = efficient_gap <= config.tol_ic && functions.first().is_some_and(|f| f.doubly_robust);
    let chain = {
        let convex_implies_flat = !convex || flat;
        let flat_implies_curvature_free = !flat || curvature_free;
        let curvature_free_implies_eic_dr = !curvature_free || eic_dr;
        let flat_implies_ics_dr = !flat || functions.iter().filter(|f| f.is_ic).all(|f| f.doubly_robust);
        Chain {
            convex_implies_flat,
            flat_implies_curvature_free,
            curvature_free_implies_eic_dr,
            flat_implies_ics_dr,
            consistent: convex_implies_flat
                && flat_implies_curvature_free
                && curvature_free_implies_eic_dr
                && flat_implies_ics_dr,
        }
    };
    Ok(FlatnessReport {
        model: model.name().to_string(),
        parameterization: param.name.clone(),
        config: config.clone(),
        sections,
        eic_rank: eic.rank,
        eic_pruned: eic.pruned,
        efficient_gap,
        functions,
        convex,
        flat,
        curvature_free,
        eic_dr,
        pass: flat && curvature_free && chain.consistent,
        chain,
    })
}
