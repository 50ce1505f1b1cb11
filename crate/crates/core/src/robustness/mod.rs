//! Verification engine: estimating-function conditions, brute-force double
//! robustness, orthogonality along sections, convexity, e-transport
//! invariance and the flatness chain.

mod flatness;
mod ortho;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::manifold::{expectation, Distribution};
use crate::models::{EstimatingFunction, NuisanceValue, Parameterization, Which};
use crate::numeric::{argmax, richardson};

pub use flatness::{flatness_suite, FlatnessConfig, FlatnessReport, FunctionVerdict, SectionGeometryReport};
pub use ortho::{
    convexity_check, e_invariance_check, iff_check, necessity_check, ConvexityProbe, ConvexityReport,
    EInvarianceReport, EInvarianceRow, IffReport, MemberOrtho, OrthoReport, PATH_POINTS,
};

/// Half-width of the default `theta` neighborhood for local identification.
pub const THETA_RADIUS: f64 = 0.2;
pub const THETA_STEPS: usize = 9;

/// One CSV row per grid point, member or probe.
pub trait CsvRows {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

pub fn to_csv(report: &dyn CsvRows) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(report.header()).map_err(csv_err)?;
    for row in report.rows() {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

pub fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Evenly spaced points in `[theta - radius, theta + radius]`, with `theta`
/// itself removed.
pub fn theta_grid(theta: f64, radius: f64, steps: usize) -> Vec<f64> {
    if steps < 2 {
        return vec![theta + radius];
    }
    (0..steps)
        .map(|i| -radius + 2.0 * radius * i as f64 / (steps - 1) as f64)
        .filter(|o| o.abs() > 1e-12 * radius.max(1.0))
        .map(|o| theta + o)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ThetaProbe {
    pub theta: f64,
    pub mean: f64,
}

/// The three defining conditions of an estimating function at `P`.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatingFunctionReport {
    pub function: String,
    pub theta: f64,
    pub tolerance: f64,
    /// `E_P[D(theta(P), gamma(P))]`.
    pub mean_at_truth: f64,
    pub unbiased: bool,
    pub probes: Vec<ThetaProbe>,
    /// `E_P[D(theta', gamma(P))]` is nonzero at every probe.
    pub identified: bool,
    pub second_moment: f64,
    pub pass: bool,
}

pub fn check_estimating_function(
    d: &EstimatingFunction,
    param: &Parameterization,
    p: &Distribution,
    theta_grid: &[f64],
    tol: f64,
) -> Result<EstimatingFunctionReport> {
    let (theta, g1, g2) = param.evaluate(p)?;
    let at = d.eval(theta, &g1, &g2)?;
    let mean_at_truth = expectation(&at, p)?;
    let second_moment = expectation(&at.mul(&at)?, p)?;
    let probes = theta_grid
        .iter()
        .map(|&t| {
            Ok(ThetaProbe {
                theta: t,
                mean: d.mean(p, t, &g1, &g2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unbiased = mean_at_truth.abs() <= tol;
    let identified = probes.iter().all(|r| r.mean.abs() > tol);
    Ok(EstimatingFunctionReport {
        function: d.name.clone(),
        theta,
        tolerance: tol,
        mean_at_truth,
        unbiased,
        identified,
        second_moment,
        pass: unbiased && identified && second_moment.is_finite(),
        probes,
    })
}

/// `d/d theta' E_P[D(theta', gamma(P))]` at `theta(P)`.
pub fn theta_slope(d: &EstimatingFunction, param: &Parameterization, p: &Distribution) -> Result<f64> {
    let (theta, g1, g2) = param.evaluate(p)?;
    richardson(|t| d.mean(p, t, &g1, &g2), theta)
}

/// Exact expectations of `D` over both nuisance grids, the other nuisance at
/// the truth.
#[derive(Debug, Clone, Serialize)]
pub struct DRReport {
    pub model: String,
    pub function: String,
    pub tolerance: f64,
    pub grid1_size: usize,
    pub grid2_size: usize,
    /// `|E_P[D(theta, g1', gamma2(P))]|` per point of grid 1.
    pub violations1: Vec<f64>,
    /// `|E_P[D(theta, gamma1(P), g2')]|` per point of grid 2.
    pub violations2: Vec<f64>,
    pub max1: f64,
    pub argmax1: Option<usize>,
    pub max2: f64,
    pub argmax2: Option<usize>,
    pub pass: bool,
}

impl DRReport {
    pub fn max_violation(&self) -> f64 {
        self.max1.max(self.max2)
    }
}

pub fn dr_bruteforce(
    model_id: &str,
    d: &EstimatingFunction,
    param: &Parameterization,
    p: &Distribution,
    grid1: &[NuisanceValue],
    grid2: &[NuisanceValue],
    tol: f64,
) -> Result<DRReport> {
    let (theta, g1, g2) = param.evaluate(p)?;
    let violations1 = grid1
        .par_iter()
        .map(|g| Ok(d.mean(p, theta, g, &g2)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    let violations2 = grid2
        .par_iter()
        .map(|g| Ok(d.mean(p, theta, &g1, g)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let (max1, max2) = (max(&violations1), max(&violations2));
    Ok(DRReport {
        model: model_id.to_string(),
        function: d.name.clone(),
        tolerance: tol,
        grid1_size: grid1.len(),
        grid2_size: grid2.len(),
        argmax1: argmax(&violations1),
        argmax2: argmax(&violations2),
        violations1,
        violations2,
        max1,
        max2,
        pass: max1 <= tol && max2 <= tol,
    })
}

impl CsvRows for DRReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["function", "side", "index", "violation", "pass"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let side = |which: Which, v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &x)| {
                    vec![
                        self.function.clone(),
                        format!("grid{}", if which == Which::One { 1 } else { 2 }),
                        i.to_string(),
                        num(x),
                        (x <= self.tolerance).to_string(),
                    ]
                })
                .collect::<Vec<_>>()
        };
        let mut rows = side(Which::One, &self.violations1);
        rows.extend(side(Which::Two, &self.violations2));
        rows
    }
}
