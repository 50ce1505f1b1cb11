//! Finite-state model zoo: treatment-arm mean (AIPW), partially linear model
//! and the conditional odds-ratio model under two nuisance parameterizations.
//!
//! Each model exposes its truth, a chart of the whole model, a
//! parameterization `(theta, gamma1, gamma2)`, its known estimating functions,
//! seeded section samplers and nuisance grids.

mod ate;
mod odds_ratio;
mod plm;
pub mod spec;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{expectation, Distribution, SampleSpace, StateFunction};
use crate::numeric::rng;
use crate::tangent::{convex_tangent_basis, Chart, Path, Subspace};

pub use ate::{build_ate, AteModel, AteTables};
pub use odds_ratio::{build_odds_ratio, parameterize_odds_ratio, OddsRatioModel, OddsRatioTables, Scheme};
pub use plm::{build_plm, PlmModel, PlmSpec};
pub use spec::{load_model_spec, ModelSpec};

/// Grid and section tables for probabilities stay inside `(DELTA, 1 - DELTA)`.
pub const DELTA: f64 = 0.01;

/// Default equality tolerance for `theta` and nuisance values.
pub const EQUALITY_TOL: f64 = 1e-10;

/// Which nuisance component a section or grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Which {
    /// `gamma1` varies; `theta` and `gamma2` are held at the base point.
    #[serde(rename = "1")]
    One,
    /// `gamma2` varies; `theta` and `gamma1` are held at the base point.
    #[serde(rename = "2")]
    Two,
}

impl Which {
    pub fn other(self) -> Self {
        match self {
            Which::One => Which::Two,
            Which::Two => Which::One,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Which::One => "M1",
            Which::Two => "M2",
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A nuisance value: a finite table of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValue(pub Vec<f64>);

impl NuisanceValue {
    pub fn distance(&self, other: &NuisanceValue) -> f64 {
        if self.0.len() != other.0.len() {
            return f64::INFINITY;
        }
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub type Functional = Arc<dyn Fn(&Distribution) -> Result<f64> + Send + Sync>;
pub type NuisanceMap = Arc<dyn Fn(&Distribution) -> Result<NuisanceValue> + Send + Sync>;
pub type Evaluator =
    Arc<dyn Fn(f64, &NuisanceValue, &NuisanceValue) -> Result<StateFunction> + Send + Sync>;

#[derive(Clone)]
pub struct Parameterization {
    pub name: String,
    pub theta: Functional,
    pub gamma1: NuisanceMap,
    pub gamma2: NuisanceMap,
    pub tolerance: f64,
}

impl fmt::Debug for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameterization")
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .finish_non_exhaustive()
    }
}

impl Parameterization {
    pub fn gamma(&self, which: Which, p: &Distribution) -> Result<NuisanceValue> {
        match which {
            Which::One => (self.gamma1)(p),
            Which::Two => (self.gamma2)(p),
        }
    }

    /// `(theta(P), gamma1(P), gamma2(P))`.
    pub fn evaluate(&self, p: &Distribution) -> Result<(f64, NuisanceValue, NuisanceValue)> {
        Ok(((self.theta)(p)?, (self.gamma1)(p)?, (self.gamma2)(p)?))
    }
}

/// `D(theta, gamma1, gamma2)`, a state function for every argument triple.
#[derive(Clone)]
pub struct EstimatingFunction {
    pub name: String,
    /// `D` is affine in `theta`, so the estimating equation has a one-step root.
    pub theta_affine: bool,
    evaluator: Evaluator,
}

impl fmt::Debug for EstimatingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatingFunction")
            .field("name", &self.name)
            .field("theta_affine", &self.theta_affine)
            .finish_non_exhaustive()
    }
}

impl EstimatingFunction {
    pub fn new(name: impl Into<String>, theta_affine: bool, evaluator: Evaluator) -> Self {
        Self {
            name: name.into(),
            theta_affine,
            evaluator,
        }
    }

    pub fn eval(&self, theta: f64, g1: &NuisanceValue, g2: &NuisanceValue) -> Result<StateFunction> {
        (self.evaluator)(theta, g1, g2)
    }

    /// `D(theta(P), gamma1(P), gamma2(P))`.
    pub fn at(&self, param: &Parameterization, p: &Distribution) -> Result<StateFunction> {
        let (t, g1, g2) = param.evaluate(p)?;
        self.eval(t, &g1, &g2)
    }

    /// `E_P[D(theta, gamma1, gamma2)]`.
    pub fn mean(&self, p: &Distribution, theta: f64, g1: &NuisanceValue, g2: &NuisanceValue) -> Result<f64> {
        expectation(&self.eval(theta, g1, g2)?, p)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

pub type Deviation = Arc<dyn Fn(&Distribution) -> Result<f64> + Send + Sync>;
pub type ChartAt = Arc<dyn Fn(&Distribution) -> Result<Chart> + Send + Sync>;

/// How tangent spaces and connecting paths of a section are obtained.
#[derive(Clone)]
pub enum SectionGeometry {
    /// Tangents from `dP'/dP - 1` over the members; members joined by mixtures.
    Convex,
    /// Tangents from scores of a section chart centered at the member; members
    /// joined by straight lines in chart coordinates.
    Charted(ChartAt),
}

/// A sampled section `M_j(P)`: members sharing `theta` and the other nuisance
/// with the base point. `members[0]` is the base.
#[derive(Clone)]
pub struct Section {
    pub label: String,
    pub which: Which,
    pub seed: u64,
    members: Vec<Distribution>,
    deviation: Deviation,
    geometry: SectionGeometry,
}

impl fmt::Debug for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Section")
            .field("label", &self.label)
            .field("which", &self.which)
            .field("seed", &self.seed)
            .field("members", &self.members.len())
            .field("convex", &self.is_convex())
            .finish()
    }
}

impl Section {
    pub fn new(
        label: impl Into<String>,
        which: Which,
        seed: u64,
        members: Vec<Distribution>,
        deviation: Deviation,
        geometry: SectionGeometry,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("section members"));
        }
        Ok(Self {
            label: label.into(),
            which,
            seed,
            members,
            deviation,
            geometry,
        })
    }

    pub fn base(&self) -> &Distribution {
        &self.members[0]
    }

    pub fn members(&self) -> &[Distribution] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.geometry, SectionGeometry::Convex)
    }

    /// Distance of `q` from satisfying the section's defining equalities.
    pub fn deviation(&self, q: &Distribution) -> Result<f64> {
        (self.deviation)(q)
    }

    pub fn tangent_at(&self, i: usize) -> Result<Subspace> {
        let member = &self.members[i];
        match &self.geometry {
            SectionGeometry::Convex => convex_tangent_basis(&self.members, member),
            SectionGeometry::Charted(chart_at) => Subspace::span(member, chart_at(member)?.scores()?),
        }
    }

    /// A path inside the section from member `from` to member `to`.
    pub fn path(&self, from: usize, to: usize) -> Result<Path> {
        let (a, b) = (&self.members[from], &self.members[to]);
        match &self.geometry {
            SectionGeometry::Convex => Path::mixture(a, b),
            SectionGeometry::Charted(chart_at) => {
                let ca = chart_at(a)?;
                let cb = chart_at(b)?;
                let dir = cb.base().iter().zip(ca.base()).map(|(x, y)| x - y).collect();
                Path::chart(&ca, dir)
            }
        }
    }
}

/// Deviation from the section through `base` that varies `which`.
pub fn section_deviation(
    param: &Parameterization,
    model_residual: Functional,
    base: &Distribution,
    which: Which,
) -> Result<Deviation> {
    let theta0 = (param.theta)(base)?;
    let other = which.other();
    let held = param.gamma(other, base)?;
    let param = param.clone();
    Ok(Arc::new(move |q: &Distribution| {
        let dt = ((param.theta)(q)? - theta0).abs();
        let dg = param.gamma(other, q)?.distance(&held);
        Ok(dt.max(dg).max(model_residual(q)?))
    }))
}

/// Information every zoo member provides.
pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;

    /// Resolved parameters, echoed into report headers.
    fn describe(&self) -> serde_json::Value;

    fn space(&self) -> &Arc<SampleSpace>;

    fn truth(&self) -> &Distribution;

    /// Chart of the whole model centered at the truth.
    fn chart(&self) -> Result<Chart>;

    fn parameterization(&self) -> Parameterization;

    /// Distance of `p` from the model's defining restriction (zero for a
    /// saturated model).
    fn model_residual(&self, p: &Distribution) -> Result<f64>;

    /// The model is the whole simplex.
    fn saturated(&self) -> bool;

    /// Known estimating functions; the first is the efficient one.
    fn estimating_functions(&self) -> Vec<EstimatingFunction>;

    fn sample_section(&self, base: &Distribution, which: Which, count: usize, seed: u64) -> Result<Section>;

    fn nuisance_grid(&self, which: Which, size: usize, seed: u64) -> Vec<NuisanceValue>;

    /// Fixed misspecified nuisance value used by simulations.
    fn designated_wrong(&self, which: Which) -> NuisanceValue;

    fn theta(&self) -> Result<f64> {
        (self.parameterization().theta)(self.truth())
    }

    fn truth_nuisance(&self, which: Which) -> Result<NuisanceValue> {
        self.parameterization().gamma(which, self.truth())
    }

    fn efficient_function(&self) -> EstimatingFunction {
        self.estimating_functions().remove(0)
    }
}

pub type ModelInstance = Arc<dyn Model>;

impl fmt::Debug for dyn Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model({})", self.describe())
    }
}

/// Seeded grid of probability tables inside `(DELTA, 1 - DELTA)`: the truth,
/// then the two boundary-adjacent constant tables, then uniform draws.
pub fn probability_grid(truth: &NuisanceValue, size: usize, seed: u64) -> Vec<NuisanceValue> {
    let lo = DELTA + 1e-3;
    let hi = 1.0 - DELTA - 1e-3;
    let n = truth.0.len();
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let v = match i {
            0 => truth.clone(),
            1 => NuisanceValue(vec![lo; n]),
            2 => NuisanceValue(vec![hi; n]),
            _ => NuisanceValue((0..n).map(|_| r.random_range(lo..hi)).collect()),
        };
        out.push(v);
    }
    out
}

/// Seeded grid of real tables within `radius` of the truth (truth first).
pub fn real_grid(truth: &NuisanceValue, radius: f64, size: usize, seed: u64) -> Vec<NuisanceValue> {
    let mut r = rng(seed);
    (0..size)
        .map(|i| {
            if i == 0 {
                truth.clone()
            } else {
                NuisanceValue(
                    truth
                        .0
                        .iter()
                        .map(|t| t + r.random_range(-radius..radius))
                        .collect(),
                )
            }
        })
        .collect()
}

pub(crate) fn clip_prob(x: f64) -> f64 {
    x.clamp(DELTA + 1e-3, 1.0 - DELTA - 1e-3)
}

pub(crate) fn check_open_unit(field: &str, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::param(
                format!("{field}[{i}]"),
                format!("{v} is outside the open interval (0, 1)"),
            ));
        }
    }
    Ok(())
}

pub(crate) fn check_simplex(field: &str, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::param(format!("{field}[{i}]"), format!("{v} is not a positive probability")));
        }
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::param(field, format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

/// Log-ratios against the first entry.
pub(crate) fn log_ratios(p: &[f64]) -> Vec<f64> {
    p[1..].iter().map(|x| (x / p[0]).ln()).collect()
}

pub(crate) fn softmax_first_fixed(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(0.0, f64::max);
    let mut w = Vec::with_capacity(eta.len() + 1);
    w.push((-m).exp());
    w.extend(eta.iter().map(|e| (e - m).exp()));
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

/// Labels `"0".."n-1"` when none are supplied.
pub(crate) fn default_levels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

pub(crate) fn level_value(label: &str, index: usize) -> f64 {
    label.parse().unwrap_or(index as f64)
}

/// Runs `draw` until it yields a member, at most 100 times.
pub(crate) fn with_retries<T>(mut draw: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    const RETRIES: usize = 100;
    for _ in 0..RETRIES {
        if let Some(v) = draw()? {
            return Ok(v);
        }
    }
    Err(Error::SectionSampling {
        retries: RETRIES,
        reason: "perturbed member left the admissible region".into(),
    })
}
