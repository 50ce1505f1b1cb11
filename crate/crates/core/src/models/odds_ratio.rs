use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::manifold::{Distribution, SampleSpace, State, StateFunction};
use crate::numeric::{expit, logit, rng};
use crate::tangent::{Builder, Chart};

use super::ate::{check_len, idx};
use super::{
    check_open_unit, check_simplex, clip_prob, default_levels, level_value, log_ratios, probability_grid,
    section_deviation, softmax_first_fixed, with_retries, EstimatingFunction, Model, NuisanceValue, Parameterization,
    Section, SectionGeometry, Which, EQUALITY_TOL,
};

/// Nuisance parameterization of the conditional odds-ratio model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `gamma1 = f(A | L)`, `gamma2 = f(Y | A, L)`.
    Canonical,
    /// `gamma1 = f(Y | A = 0, L)`, `gamma2 = f(A | Y = 0, L)`.
    Alternative,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Canonical => "canonical",
            Scheme::Alternative => "alternative",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Scheme::Canonical),
            "alternative" => Ok(Scheme::Alternative),
            other => Err(Error::param("parameterization", format!("unknown scheme {other:?}"))),
        }
    }
}

/// `f(y, a | l) ∝ f1(y | l) f2(a | l) exp(theta y a)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OddsRatioTables {
    pub theta: f64,
    /// `f(Y = 1 | A = 0, L = l)`.
    pub baseline_y: Vec<f64>,
    /// `f(A = 1 | Y = 0, L = l)`.
    pub baseline_a: Vec<f64>,
    pub p_l: Vec<f64>,
}

impl OddsRatioTables {
    fn levels(&self) -> usize {
        self.p_l.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.levels();
        if n == 0 {
            return Err(Error::Empty("p_l"));
        }
        if !self.theta.is_finite() {
            return Err(Error::param("theta", "must be finite"));
        }
        for (field, t) in [("baseline_y", &self.baseline_y), ("baseline_a", &self.baseline_a)] {
            if t.len() != n {
                return Err(Error::param(field, format!("expected {n} entries, got {}", t.len())));
            }
            check_open_unit(field, t)?;
        }
        check_simplex("p_l", &self.p_l)
    }
}

/// Per-level conditional joint `f(y, a | l)` as `[f00, f10, f01, f11]`
/// (index `a * 2 + y`).
fn factorized_cell(theta: f64, by: f64, ba: f64) -> [f64; 4] {
    let mut c = [0.0; 4];
    for a in 0..2 {
        for y in 0..2 {
            let f1 = if y == 1 { by } else { 1.0 - by };
            let f2 = if a == 1 { ba } else { 1.0 - ba };
            c[a * 2 + y] = f1 * f2 * (theta * (y * a) as f64).exp();
        }
    }
    let z: f64 = c.iter().sum();
    c.map(|v| v / z)
}

/// `f(a | l) f(y | a, l)` with `f(Y = 1 | a, l) = mu[a]`.
fn sequential_cell(pa: f64, mu: [f64; 2]) -> [f64; 4] {
    let mut c = [0.0; 4];
    for a in 0..2 {
        let fa = if a == 1 { pa } else { 1.0 - pa };
        c[a * 2 + 1] = fa * mu[a];
        c[a * 2] = fa * (1.0 - mu[a]);
    }
    c
}

fn joint(space: &Arc<SampleSpace>, p_l: &[f64], cells: &[[f64; 4]]) -> Result<Distribution> {
    let mut probs = vec![0.0; space.len()];
    for (l, c) in cells.iter().enumerate() {
        for a in 0..2 {
            for y in 0..2 {
                probs[idx(y, a, l)] = p_l[l] * c[a * 2 + y];
            }
        }
    }
    Distribution::new(space.clone(), probs)
}

fn split(p: &Distribution, levels: usize) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    if p.len() != 4 * levels {
        return Err(Error::SpaceMismatch);
    }
    let q = p.probs();
    let mut p_l = Vec::with_capacity(levels);
    let mut cells = Vec::with_capacity(levels);
    for l in 0..levels {
        let raw = [q[idx(0, 0, l)], q[idx(1, 0, l)], q[idx(0, 1, l)], q[idx(1, 1, l)]];
        let m: f64 = raw.iter().sum();
        p_l.push(m);
        cells.push(raw.map(|v| v / m));
    }
    Ok((p_l, cells))
}

fn log_or(c: &[f64; 4]) -> f64 {
    (c[3] * c[0] / (c[1] * c[2])).ln()
}

fn theta_of(p_l: &[f64], cells: &[[f64; 4]]) -> f64 {
    p_l.iter().zip(cells).map(|(w, c)| w * log_or(c)).sum()
}

fn baseline_y(c: &[f64; 4]) -> f64 {
    c[1] / (c[0] + c[1])
}

fn baseline_a(c: &[f64; 4]) -> f64 {
    c[2] / (c[0] + c[2])
}

fn prob_a(c: &[f64; 4]) -> f64 {
    c[2] + c[3]
}

fn outcome_given(c: &[f64; 4], a: usize) -> f64 {
    c[a * 2 + 1] / (c[a * 2] + c[a * 2 + 1])
}

#[derive(Debug, Clone)]
pub struct OddsRatioModel {
    tables: OddsRatioTables,
    scheme: Scheme,
    levels: Vec<String>,
    space: Arc<SampleSpace>,
    truth: Distribution,
}

/// The model under the alternative parameterization; see
/// [`OddsRatioModel::with_scheme`] for the canonical one.
pub fn build_odds_ratio(levels: Option<Vec<String>>, tables: OddsRatioTables) -> Result<OddsRatioModel> {
    tables.validate()?;
    let levels = levels.unwrap_or_else(|| default_levels(tables.levels()));
    if levels.len() != tables.levels() {
        return Err(Error::param("levels", "one label per level of L required"));
    }
    let mut states = Vec::with_capacity(4 * levels.len());
    for (l, lab) in levels.iter().enumerate() {
        for a in 0..2 {
            for y in 0..2 {
                states.push(State::new(
                    vec![y.to_string(), a.to_string(), lab.clone()],
                    vec![y as f64, a as f64, level_value(lab, l)],
                ));
            }
        }
    }
    let space = SampleSpace::new(vec!["Y".into(), "A".into(), "L".into()], states)?;
    let cells: Vec<[f64; 4]> = (0..tables.levels())
        .map(|l| factorized_cell(tables.theta, tables.baseline_y[l], tables.baseline_a[l]))
        .collect();
    let truth = joint(&space, &tables.p_l, &cells)?;
    Ok(OddsRatioModel {
        tables,
        scheme: Scheme::Alternative,
        levels,
        space,
        truth,
    })
}

pub fn parameterize_odds_ratio(model: &OddsRatioModel, scheme: Scheme) -> Parameterization {
    model.clone().with_scheme(scheme).parameterization()
}

impl OddsRatioModel {
    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn tables(&self) -> &OddsRatioTables {
        &self.tables
    }

    fn n(&self) -> usize {
        self.levels.len()
    }

    /// Full-model chart in `(theta, pL, logit f1, logit f2)` centered at `p`.
    pub fn chart_at(&self, p: &Distribution) -> Result<Chart> {
        let n = self.n();
        let (p_l, cells) = split(p, n)?;
        let mut base = vec![theta_of(&p_l, &cells)];
        base.extend(log_ratios(&p_l));
        base.extend(cells.iter().map(|c| logit(baseline_y(c))));
        base.extend(cells.iter().map(|c| logit(baseline_a(c))));
        let mut names = vec!["theta".to_string()];
        names.extend((1..n).map(|l| format!("log_ratio_L{l}")));
        names.extend((0..n).map(|l| format!("logit_baseline_y{l}")));
        names.extend((0..n).map(|l| format!("logit_baseline_a{l}")));
        let mut theta_coords = vec![false; names.len()];
        theta_coords[0] = true;
        let space = self.space.clone();
        let builder: Builder = Arc::new(move |x: &[f64]| {
            let p_l = softmax_first_fixed(&x[1..n]);
            let cells: Vec<[f64; 4]> = (0..n)
                .map(|l| factorized_cell(x[0], expit(x[n + l]), expit(x[2 * n + l])))
                .collect();
            joint(&space, &p_l, &cells)
        });
        Chart::new(names, base, theta_coords, builder)
    }

    /// Conditional cells implied by a nuisance pair under the current scheme.
    fn cells_from(scheme: Scheme, theta: f64, g1: &[f64], g2: &[f64], n: usize) -> Vec<[f64; 4]> {
        (0..n)
            .map(|l| match scheme {
                Scheme::Alternative => factorized_cell(theta, g1[l], g2[l]),
                Scheme::Canonical => sequential_cell(g1[l], [g2[l], g2[n + l]]),
            })
            .collect()
    }

    /// Efficient estimating function `h(L) U / E[h(L)^2 U^2]` with
    /// `U = exp(-theta A Y) (A - pi0(L)) (Y - mu0(L))`, where
    /// `mu0 = f(Y = 1 | A = 0, L)` and `pi0 = f(A = 1 | Y = 0, L)` are read off
    /// the nuisances and `h(L) = E[S_theta U | L] / E[U^2 | L]`. Conditional
    /// moments use the cells implied by the nuisances; the outer normalizer
    /// uses the instance's `pL`.
    pub fn efficient(&self) -> EstimatingFunction {
        let (space, scheme, n) = (self.space.clone(), self.scheme, self.n());
        let p_l = self.tables.p_l.clone();
        let g2_len = match scheme {
            Scheme::Alternative => n,
            Scheme::Canonical => 2 * n,
        };
        EstimatingFunction::new(
            format!("efficient-{scheme}"),
            false,
            Arc::new(move |theta, g1, g2| {
                check_len(g1, n)?;
                check_len(g2, g2_len)?;
                let cells = Self::cells_from(scheme, theta, &g1.0, &g2.0, n);
                let mut h = vec![0.0; n];
                let mut u = vec![[0.0; 4]; n];
                let mut norm = 0.0;
                for l in 0..n {
                    let c = &cells[l];
                    let (mu0, pi0) = (baseline_y(c), baseline_a(c));
                    let eya = c[3];
                    let (mut su, mut uu) = (0.0, 0.0);
                    for a in 0..2 {
                        for y in 0..2 {
                            let k = a * 2 + y;
                            let ya = (y * a) as f64;
                            u[l][k] = (-theta * ya).exp() * (a as f64 - pi0) * (y as f64 - mu0);
                            su += c[k] * (ya - eya) * u[l][k];
                            uu += c[k] * u[l][k] * u[l][k];
                        }
                    }
                    h[l] = su / uu;
                    norm += p_l[l] * h[l] * h[l] * uu;
                }
                Ok(StateFunction::from_fn(&space, |i| {
                    let (y, a, l) = (i % 2, (i / 2) % 2, i / 4);
                    h[l] * u[l][a * 2 + y] / norm
                }))
            }),
        )
    }

    fn canonical_builder(&self, theta: f64, pa: Vec<f64>) -> Builder {
        let (space, n) = (self.space.clone(), self.n());
        Arc::new(move |x: &[f64]| {
            let p_l = softmax_first_fixed(&x[..n - 1]);
            let cells: Vec<[f64; 4]> = (0..n)
                .map(|l| {
                    let c = x[n - 1 + l];
                    sequential_cell(pa[l], [expit(c), expit(c + theta)])
                })
                .collect();
            joint(&space, &p_l, &cells)
        })
    }
}

impl Model for OddsRatioModel {
    fn name(&self) -> &'static str {
        "odds_ratio"
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "model": "odds_ratio",
            "parameterization": self.scheme,
            "levels": self.levels,
            "theta": self.tables.theta,
            "baseline_y": self.tables.baseline_y,
            "baseline_a": self.tables.baseline_a,
            "p_l": self.tables.p_l,
        })
    }

    fn space(&self) -> &Arc<SampleSpace> {
        &self.space
    }

    fn truth(&self) -> &Distribution {
        &self.truth
    }

    fn chart(&self) -> Result<Chart> {
        self.chart_at(&self.truth)
    }

    fn parameterization(&self) -> Parameterization {
        let n = self.n();
        let theta: super::Functional = Arc::new(move |p| {
            let (p_l, cells) = split(p, n)?;
            Ok(theta_of(&p_l, &cells))
        });
        let (gamma1, gamma2): (super::NuisanceMap, super::NuisanceMap) = match self.scheme {
            Scheme::Alternative => (
                Arc::new(move |p| Ok(NuisanceValue(split(p, n)?.1.iter().map(baseline_y).collect()))),
                Arc::new(move |p| Ok(NuisanceValue(split(p, n)?.1.iter().map(baseline_a).collect()))),
            ),
            Scheme::Canonical => (
                Arc::new(move |p| Ok(NuisanceValue(split(p, n)?.1.iter().map(prob_a).collect()))),
                Arc::new(move |p| {
                    let cells = split(p, n)?.1;
                    let mut v: Vec<f64> = cells.iter().map(|c| outcome_given(c, 0)).collect();
                    v.extend(cells.iter().map(|c| outcome_given(c, 1)));
                    Ok(NuisanceValue(v))
                }),
            ),
        };
        Parameterization {
            name: self.scheme.to_string(),
            theta,
            gamma1,
            gamma2,
            tolerance: EQUALITY_TOL,
        }
    }

    /// Spread of the per-level log odds ratios around `theta`.
    fn model_residual(&self, p: &Distribution) -> Result<f64> {
        let (p_l, cells) = split(p, self.n())?;
        let theta = theta_of(&p_l, &cells);
        Ok(cells.iter().fold(0.0, |m, c| m.max((log_or(c) - theta).abs())))
    }

    fn saturated(&self) -> bool {
        false
    }

    fn estimating_functions(&self) -> Vec<EstimatingFunction> {
        vec![self.efficient()]
    }

    fn sample_section(&self, base: &Distribution, which: Which, count: usize, seed: u64) -> Result<Section> {
        let resid = self.model_residual(base)?;
        if resid > 1e-10 {
            return Err(Error::param("base", format!("distribution is off the model (residual {resid:e})")));
        }
        let n = self.n();
        let (p_l, cells) = split(base, n)?;
        let theta = theta_of(&p_l, &cells);
        let mut r = rng(seed);
        let mut members = vec![base.clone()];
        let label = format!("odds_ratio {} {}", self.scheme, which.label());

        let geometry = match (self.scheme, which) {
            (Scheme::Alternative, _) => {
                let chart = self.chart_at(base)?;
                // coordinates: theta | pL (n-1) | logit f1 (n) | logit f2 (n)
                let moving = match which {
                    Which::One => n..2 * n,
                    Which::Two => 2 * n..3 * n,
                };
                for _ in 1..count {
                    let mut x = chart.base().to_vec();
                    for v in &mut x[1..n] {
                        *v += r.random_range(-0.5..0.5);
                    }
                    for v in &mut x[moving.clone()] {
                        *v += r.random_range(-0.6..0.6);
                    }
                    members.push(chart.eval(&x)?);
                }
                SectionGeometry::Convex
            }
            (Scheme::Canonical, Which::One) => {
                for _ in 1..count {
                    let q = with_retries(|| {
                        let w: Vec<f64> = p_l.iter().map(|p| p * r.random_range(-0.5..0.5f64).exp()).collect();
                        let s: f64 = w.iter().sum();
                        let pl: Vec<f64> = w.iter().map(|x| x / s).collect();
                        let cs: Vec<[f64; 4]> = cells
                            .iter()
                            .map(|c| {
                                let pa = expit(logit(prob_a(c)) + r.random_range(-0.6..0.6));
                                sequential_cell(pa, [outcome_given(c, 0), outcome_given(c, 1)])
                            })
                            .collect();
                        joint(&self.space, &pl, &cs).map(Some)
                    })?;
                    members.push(q);
                }
                SectionGeometry::Convex
            }
            (Scheme::Canonical, Which::Two) => {
                let pa: Vec<f64> = cells.iter().map(prob_a).collect();
                let builder = self.canonical_builder(theta, pa);
                let mut x0 = log_ratios(&p_l);
                x0.extend(cells.iter().map(|c| logit(outcome_given(c, 0))));
                let mut names: Vec<String> = (1..n).map(|l| format!("log_ratio_L{l}")).collect();
                names.extend((0..n).map(|l| format!("logit_mu0_{l}")));
                let chart = Chart::new(names, x0.clone(), vec![false; 2 * n - 1], builder)?;
                for _ in 1..count {
                    let x: Vec<f64> = x0.iter().map(|v| v + r.random_range(-0.6..0.6)).collect();
                    members.push(chart.eval(&x)?);
                }
                let chart_at = move |q: &Distribution| -> Result<Chart> {
                    let (pl, cs) = split(q, n)?;
                    let mut x = log_ratios(&pl);
                    x.extend(cs.iter().map(|c| logit(outcome_given(c, 0))));
                    chart.recentered(x)
                };
                SectionGeometry::Charted(Arc::new(chart_at))
            }
        };
        let model = self.clone();
        let residual = Arc::new(move |q: &Distribution| model.model_residual(q));
        let dev = section_deviation(&self.parameterization(), residual, base, which)?;
        Section::new(label, which, seed, members, dev, geometry)
    }

    fn nuisance_grid(&self, which: Which, size: usize, seed: u64) -> Vec<NuisanceValue> {
        let truth = self.truth_nuisance(which).expect("truth lies on the model space");
        probability_grid(&truth, size, seed)
    }

    fn designated_wrong(&self, which: Which) -> NuisanceValue {
        let truth = self.truth_nuisance(which).expect("truth lies on the model space");
        let shift = match which {
            Which::One => 0.1,
            Which::Two => -0.1,
        };
        NuisanceValue(truth.0.iter().map(|v| clip_prob(v + shift)).collect())
    }
}
