use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::manifold::{center, density_ratio, mixture_unchecked, Distribution, StateFunction};
use crate::numeric::{richardson, richardson_vec};

pub type Builder = Arc<dyn Fn(&[f64]) -> Result<Distribution> + Send + Sync>;

/// A finite-dimensional coordinate system on (part of) the manifold.
#[derive(Clone)]
pub struct Chart {
    names: Vec<String>,
    base: Vec<f64>,
    theta_coords: Vec<bool>,
    builder: Builder,
}

impl fmt::Debug for Chart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Chart")
            .field("names", &self.names)
            .field("base", &self.base)
            .field("theta_coords", &self.theta_coords)
            .finish_non_exhaustive()
    }
}

impl Chart {
    pub fn new(
        names: Vec<String>,
        base: Vec<f64>,
        theta_coords: Vec<bool>,
        builder: Builder,
    ) -> Result<Self> {
        if names.len() != base.len() || theta_coords.len() != base.len() {
            return Err(Error::Dimension {
                expected: base.len(),
                got: names.len().min(theta_coords.len()),
            });
        }
        builder(&base)?;
        Ok(Self {
            names,
            base,
            theta_coords,
            builder,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn theta_coords(&self) -> &[bool] {
        &self.theta_coords
    }

    pub fn eval(&self, params: &[f64]) -> Result<Distribution> {
        if params.len() != self.base.len() {
            return Err(Error::Dimension {
                expected: self.base.len(),
                got: params.len(),
            });
        }
        (self.builder)(params)
    }

    pub fn base_distribution(&self) -> Result<Distribution> {
        self.eval(&self.base)
    }

    /// Same coordinates, different base point.
    pub fn recentered(&self, base: Vec<f64>) -> Result<Self> {
        Self::new(
            self.names.clone(),
            base,
            self.theta_coords.clone(),
            self.builder.clone(),
        )
    }

    /// The path moving coordinate `j` alone.
    pub fn coordinate_path(&self, j: usize) -> Path {
        let mut dir = vec![0.0; self.dim()];
        dir[j] = 1.0;
        Path::Chart {
            chart: self.clone(),
            direction: dir,
        }
    }

    /// Scores of all coordinate paths at the base point.
    pub fn scores(&self) -> Result<Vec<StateFunction>> {
        (0..self.dim())
            .map(|j| score_of_path(&self.coordinate_path(j)))
            .collect()
    }
}

/// Saturated chart on the full simplex: log-ratios against the first state.
pub fn multinomial_chart(p: &Distribution) -> Result<Chart> {
    let lp = p.log_probs();
    let k = p.len();
    let base = (1..k).map(|i| lp[i] - lp[0]).collect();
    let space = p.space().clone();
    let builder: Builder = Arc::new(move |eta: &[f64]| {
        let m = eta.iter().cloned().fold(0.0, f64::max);
        let mut w = Vec::with_capacity(eta.len() + 1);
        w.push((-m).exp());
        w.extend(eta.iter().map(|e| (e - m).exp()));
        let total: f64 = w.iter().sum();
        Distribution::new(space.clone(), w.into_iter().map(|x| x / total).collect())
    });
    Chart::new(
        (1..k).map(|i| format!("log_ratio_{i}")).collect(),
        base,
        vec![false; k - 1],
        builder,
    )
}

/// A one-dimensional submodel `t -> P_t` through `P_0`.
#[derive(Debug, Clone)]
pub enum Path {
    /// `(1 - t) from + t to`.
    Mixture { from: Distribution, to: Distribution },
    /// `chart(base + t direction)`.
    Chart { chart: Chart, direction: Vec<f64> },
}

impl Path {
    pub fn mixture(from: &Distribution, to: &Distribution) -> Result<Self> {
        from.max_abs_diff(to)?;
        Ok(Path::Mixture {
            from: from.clone(),
            to: to.clone(),
        })
    }

    pub fn chart(chart: &Chart, direction: Vec<f64>) -> Result<Self> {
        if direction.len() != chart.dim() {
            return Err(Error::Dimension {
                expected: chart.dim(),
                got: direction.len(),
            });
        }
        Ok(Path::Chart {
            chart: chart.clone(),
            direction,
        })
    }

    /// Evaluates the path. `t` may step slightly outside `[0, 1]` so that
    /// derivatives at the endpoints can be taken by central differences.
    pub fn at(&self, t: f64) -> Result<Distribution> {
        match self {
            Path::Mixture { from, to } => mixture_unchecked(from, to, t),
            Path::Chart { chart, direction } => {
                let params: Vec<f64> = chart
                    .base()
                    .iter()
                    .zip(direction)
                    .map(|(b, d)| b + t * d)
                    .collect();
                chart.eval(&params)
            }
        }
    }

    pub fn start(&self) -> Result<Distribution> {
        self.at(0.0)
    }
}

/// `d/dt log p_t` at `t = 0`.
pub fn score_of_path(path: &Path) -> Result<StateFunction> {
    score_at(path, 0.0)
}

/// Score of the path at an interior point `t`: the mixture form is exact,
/// chart paths are differentiated numerically and centered at `p_t`.
pub fn score_at(path: &Path, t: f64) -> Result<StateFunction> {
    match path {
        Path::Mixture { from, to } => {
            if t == 0.0 {
                return Ok(density_ratio(from, to)?.shift(-1.0));
            }
            let pt = path.at(t)?;
            let space = pt.space().clone();
            let v = from
                .probs()
                .iter()
                .zip(to.probs())
                .zip(pt.probs())
                .map(|((a, b), q)| (b - a) / q)
                .collect();
            StateFunction::new(space, v)
        }
        Path::Chart { .. } => {
            let pt = path.at(t)?;
            let d = richardson_vec(|s| Ok(path.at(s)?.log_probs()), t)?;
            center(&StateFunction::new(pt.space().clone(), d)?, &pt)
        }
    }
}

/// `d/dt theta(P_t)` at `t`.
pub fn derivative_at<F>(theta: F, path: &Path, t: f64) -> Result<f64>
where
    F: Fn(&Distribution) -> Result<f64>,
{
    richardson(|s| theta(&path.at(s)?), t)
}

pub fn pathwise_derivative<F>(theta: F, path: &Path) -> Result<f64>
where
    F: Fn(&Distribution) -> Result<f64>,
{
    derivative_at(theta, path, 0.0)
}
