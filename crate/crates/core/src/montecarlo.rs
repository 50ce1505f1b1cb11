//! Sample-level double robustness: i.i.d. draws from a model's truth,
//! empirical estimating equations solved under correct and designated-wrong
//! nuisances, and a bias table.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Distribution, SampleSpace};
use crate::models::{EstimatingFunction, Model, NuisanceValue, Which};
use crate::numeric::stream_rng;
use crate::robustness::{num, CsvRows};

/// Bisection stops once the bracket is this narrow.
pub const ROOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub seed: u64,
    pub stream: u64,
    pub states: usize,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Empirical distribution as weights summing to one.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.states];
        for &i in &self.indices {
            w[i] += 1.0;
        }
        let n = self.indices.len() as f64;
        w.iter_mut().for_each(|x| *x /= n);
        w
    }
}

fn cdf(p: &Distribution) -> Vec<f64> {
    let mut acc = 0.0;
    p.probs()
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

fn draw<R: Rng>(cdf: &[f64], r: &mut R) -> usize {
    let u: f64 = r.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// `n` inverse-CDF draws from stream `stream` of the seeded generator.
pub fn sample_stream(p: &Distribution, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("n", "need at least one draw"));
    }
    let c = cdf(p);
    let mut r = stream_rng(seed, stream);
    Ok(Dataset {
        seed,
        stream,
        states: p.len(),
        indices: (0..n).map(|_| draw(&c, &mut r)).collect(),
    })
}

pub fn sample(p: &Distribution, n: usize, seed: u64) -> Result<Dataset> {
    sample_stream(p, n, seed, 0)
}

fn sample_weights(c: &[f64], n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut r = stream_rng(seed, stream);
    let mut w = vec![0.0; c.len()];
    for _ in 0..n {
        w[draw(c, &mut r)] += 1.0;
    }
    w.iter_mut().for_each(|x| *x /= n as f64);
    w
}

/// Root of `theta -> sum_x w(x) D(theta, g1, g2)(x)`.
///
/// Affine functions take one exact step; others are bisected on `bracket`.
pub fn solve_theta_weighted(
    space: &std::sync::Arc<SampleSpace>,
    weights: &[f64],
    d: &EstimatingFunction,
    g1: &NuisanceValue,
    g2: &NuisanceValue,
    bracket: (f64, f64),
) -> Result<f64> {
    if weights.len() != space.len() {
        return Err(Error::Dimension {
            expected: space.len(),
            got: weights.len(),
        });
    }
    let mean = |theta: f64| -> Result<f64> {
        let f = d.eval(theta, g1, g2)?;
        Ok(f.values().iter().zip(weights).map(|(v, w)| v * w).sum())
    };
    let (lo, hi) = bracket;
    if d.theta_affine {
        let m0 = mean(0.0)?;
        let slope = mean(1.0)? - m0;
        if slope.abs() <= 1e-14 * (1.0 + m0.abs()) {
            return Err(Error::NoRoot { lo, hi });
        }
        return Ok(-m0 / slope);
    }
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (mean(a)?, mean(b)?);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::NoRoot { lo, hi });
    }
    let sa = fa.signum();
    while b - a > ROOT_TOL {
        let m = 0.5 * (a + b);
        let fm = mean(m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == sa {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

pub fn solve_theta(
    data: &Dataset,
    space: &std::sync::Arc<SampleSpace>,
    d: &EstimatingFunction,
    g1: &NuisanceValue,
    g2: &NuisanceValue,
    bracket: (f64, f64),
) -> Result<f64> {
    solve_theta_weighted(space, &data.weights(), d, g1, g2, bracket)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    BothTrue,
    Gamma1Wrong,
    Gamma2Wrong,
    BothWrong,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::BothTrue,
        Scenario::Gamma1Wrong,
        Scenario::Gamma2Wrong,
        Scenario::BothWrong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::BothTrue => "both-true",
            Scenario::Gamma1Wrong => "gamma1-wrong",
            Scenario::Gamma2Wrong => "gamma2-wrong",
            Scenario::BothWrong => "both-wrong",
        }
    }

    /// Nuisance pair used by the scenario.
    pub fn nuisances(self, model: &dyn Model) -> Result<(NuisanceValue, NuisanceValue)> {
        let pick = |which: Which, wrong: bool| -> Result<NuisanceValue> {
            if wrong {
                Ok(model.designated_wrong(which))
            } else {
                model.truth_nuisance(which)
            }
        };
        let (w1, w2) = match self {
            Scenario::BothTrue => (false, false),
            Scenario::Gamma1Wrong => (true, false),
            Scenario::Gamma2Wrong => (false, true),
            Scenario::BothWrong => (true, true),
        };
        Ok((pick(Which::One, w1)?, pick(Which::Two, w2)?))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::param("scenario", format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub n: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
    /// Bisection bracket `theta(P) +- radius` for non-affine functions.
    pub bracket_radius: f64,
    /// `|bias| <= unbiased_factor * SE` when the population bias vanishes.
    pub unbiased_factor: f64,
    /// `|bias| >= biased_factor * SE` otherwise.
    pub biased_factor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: vec![50_000],
            reps: 500,
            seed: 0,
            scenarios: Scenario::ALL.to_vec(),
            bracket_radius: 1.0,
            unbiased_factor: 3.0,
            biased_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub n: usize,
    pub reps: usize,
    pub scenario: Scenario,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub se: f64,
    pub failures: usize,
    /// Root of the estimating equation with exact expectations.
    pub population_root: f64,
    pub population_bias: f64,
    /// The population bias vanishes, so the sample bias should be within noise.
    pub expect_unbiased: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentTable {
    pub model: String,
    pub function: String,
    pub theta: f64,
    pub config: ExperimentConfig,
    pub rows: Vec<ExperimentRow>,
    pub pass: bool,
}

impl CsvRows for ExperimentTable {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "n",
            "reps",
            "scenario",
            "mean",
            "bias",
            "sd",
            "se",
            "failures",
            "population_bias",
            "pass",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.reps.to_string(),
                    r.scenario.to_string(),
                    num(r.mean),
                    num(r.bias),
                    num(r.sd),
                    num(r.se),
                    r.failures.to_string(),
                    num(r.population_bias),
                    r.pass.to_string(),
                ]
            })
            .collect()
    }
}

/// Population roots below this count as unbiased.
const POPULATION_TOL: f64 = 1e-8;

pub fn run_experiment(model: &dyn Model, d: &EstimatingFunction, config: &ExperimentConfig) -> Result<ExperimentTable> {
    if config.reps < 2 {
        return Err(Error::param("reps", "need at least two replicates"));
    }
    if config.scenarios.is_empty() {
        return Err(Error::Empty("scenarios"));
    }
    let p = model.truth();
    let space = model.space();
    let theta = model.theta()?;
    let bracket = (theta - config.bracket_radius, theta + config.bracket_radius);
    let nuisances = config
        .scenarios
        .iter()
        .map(|s| s.nuisances(model))
        .collect::<Result<Vec<_>>>()?;
    let population = nuisances
        .iter()
        .map(|(g1, g2)| solve_theta_weighted(space, p.probs(), d, g1, g2, bracket))
        .collect::<Result<Vec<_>>>()?;
    let c = cdf(p);
    let mut rows = Vec::new();
    for &n in &config.n {
        if n == 0 {
            return Err(Error::param("n", "need at least one draw"));
        }
        // estimates[rep][scenario]
        let estimates: Vec<Vec<Option<f64>>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| {
                let w = sample_weights(&c, n, config.seed, rep as u64);
                nuisances
                    .iter()
                    .map(|(g1, g2)| solve_theta_weighted(space, &w, d, g1, g2, bracket).ok())
                    .collect()
            })
            .collect();
        for (k, &scenario) in config.scenarios.iter().enumerate() {
            let ok: Vec<f64> = estimates.iter().filter_map(|e| e[k]).collect();
            let failures = config.reps - ok.len();
            let m = ok.len() as f64;
            let mean = ok.iter().sum::<f64>() / m;
            let sd = (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            let se = sd / m.sqrt();
            let bias = mean - theta;
            let population_bias = population[k] - theta;
            let expect_unbiased = population_bias.abs() <= POPULATION_TOL;
            let pass = ok.len() >= 2
                && if expect_unbiased {
                    bias.abs() <= config.unbiased_factor * se
                } else {
                    bias.abs() >= config.biased_factor * se
                };
            rows.push(ExperimentRow {
                n,
                reps: config.reps,
                scenario,
                mean,
                bias,
                sd,
                se,
                failures,
                population_root: population[k],
                population_bias,
                expect_unbiased,
                pass,
            });
        }
    }
    Ok(ExperimentTable {
        model: model.name().to_string(),
        function: d.name.clone(),
        theta,
        config: config.clone(),
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}
