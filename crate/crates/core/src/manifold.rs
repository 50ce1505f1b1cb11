//! Finite sample spaces, strictly positive distributions and real functions on
//! states, together with the `P`-weighted Hilbert-space primitives.
//!
//! Every point of the manifold is a [`Distribution`]: a strictly positive
//! probability vector over an enumerated [`SampleSpace`]. Tangent vectors,
//! scores, influence curves and density ratios are all [`StateFunction`]s.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Normalization tolerance applied when a distribution is constructed.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Default lower bound on every state probability.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// One enumerated state: a tuple of level labels with a real embedding per
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct State {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl State {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Self {
        Self { labels, values }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.labels.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSpace {
    variables: Vec<String>,
    states: Vec<State>,
}

impl SampleSpace {
    pub fn new(variables: Vec<String>, states: Vec<State>) -> Result<Arc<Self>> {
        if states.is_empty() {
            return Err(Error::InvalidSpace("no states".into()));
        }
        for (i, s) in states.iter().enumerate() {
            if s.labels.len() != variables.len() || s.values.len() != variables.len() {
                return Err(Error::InvalidSpace(format!(
                    "state {i} has {} labels / {} values for {} variables",
                    s.labels.len(),
                    s.values.len(),
                    variables.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in states.iter().enumerate() {
            if !seen.insert(s.labels.clone()) {
                return Err(Error::InvalidSpace(format!("state {i} {s} is duplicated")));
            }
        }
        Ok(Arc::new(Self { variables, states }))
    }

    /// A space of `k` anonymous states labelled `0..k` on a single variable `X`.
    pub fn indexed(k: usize) -> Result<Arc<Self>> {
        let states = (0..k)
            .map(|i| State::new(vec![i.to_string()], vec![i as f64]))
            .collect();
        Self::new(vec!["X".into()], states)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &State {
        &self.states[i]
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }
}

fn same_space(a: &Arc<SampleSpace>, b: &Arc<SampleSpace>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn ensure_same(a: &Arc<SampleSpace>, b: &Arc<SampleSpace>) -> Result<()> {
    if same_space(a, b) {
        Ok(())
    } else {
        Err(Error::SpaceMismatch)
    }
}

/// A strictly positive probability vector on a [`SampleSpace`].
#[derive(Debug, Clone)]
pub struct Distribution {
    space: Arc<SampleSpace>,
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates positivity against [`DEFAULT_FLOOR`] and normalization to
    /// [`NORMALIZATION_TOL`], then renormalizes exactly.
    pub fn new(space: Arc<SampleSpace>, probs: Vec<f64>) -> Result<Self> {
        Self::with_floor(space, probs, DEFAULT_FLOOR)
    }

    pub fn with_floor(space: Arc<SampleSpace>, probs: Vec<f64>, floor: f64) -> Result<Self> {
        if probs.len() != space.len() {
            return Err(Error::Dimension {
                expected: space.len(),
                got: probs.len(),
            });
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p < floor {
                return Err(Error::InvalidDistribution(format!(
                    "probability {p:e} at state {} is below the floor {floor:e}",
                    space.state(i)
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total:.17}"
            )));
        }
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { space, probs })
    }

    /// Normalizes arbitrary positive weights.
    pub fn from_weights(space: Arc<SampleSpace>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Self::new(space, weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(space: Arc<SampleSpace>) -> Self {
        let k = space.len();
        Self {
            probs: vec![1.0 / k as f64; k],
            space,
        }
    }

    pub fn space(&self) -> &Arc<SampleSpace> {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Distribution) -> Result<f64> {
        ensure_same(&self.space, &other.space)?;
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl Serialize for Distribution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.probs.serialize(s)
    }
}

/// A real function on the states of a space.
#[derive(Debug, Clone)]
pub struct StateFunction {
    space: Arc<SampleSpace>,
    values: Vec<f64>,
}

impl StateFunction {
    pub fn new(space: Arc<SampleSpace>, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::Dimension {
                expected: space.len(),
                got: values.len(),
            });
        }
        Ok(Self { space, values })
    }

    pub fn from_fn(space: &Arc<SampleSpace>, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            values: (0..space.len()).map(f).collect(),
            space: space.clone(),
        }
    }

    pub fn constant(space: &Arc<SampleSpace>, c: f64) -> Self {
        Self::from_fn(space, |_| c)
    }

    pub fn zero(space: &Arc<SampleSpace>) -> Self {
        Self::constant(space, 0.0)
    }

    /// Indicator of a single state.
    pub fn indicator(space: &Arc<SampleSpace>, state: usize) -> Self {
        Self::from_fn(space, |i| if i == state { 1.0 } else { 0.0 })
    }

    pub fn space(&self) -> &Arc<SampleSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            space: self.space.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same(&self.space, &other.space)?;
        Ok(Self {
            space: self.space.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn shift(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup-norm distance.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }
}

impl Serialize for StateFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

pub fn expectation(f: &StateFunction, p: &Distribution) -> Result<f64> {
    ensure_same(&f.space, &p.space)?;
    Ok(f.values.iter().zip(&p.probs).map(|(v, q)| v * q).sum())
}

pub fn inner_product(f: &StateFunction, g: &StateFunction, p: &Distribution) -> Result<f64> {
    ensure_same(&f.space, &g.space)?;
    ensure_same(&f.space, &p.space)?;
    Ok(f
        .values
        .iter()
        .zip(&g.values)
        .zip(&p.probs)
        .map(|((a, b), q)| a * b * q)
        .sum())
}

/// `P`-weighted L2 norm.
pub fn norm(f: &StateFunction, p: &Distribution) -> Result<f64> {
    Ok(inner_product(f, f, p)?.sqrt())
}

/// The ratio `x -> P'(x) / P(x)`.
pub fn density_ratio(p: &Distribution, p_prime: &Distribution) -> Result<StateFunction> {
    ensure_same(&p.space, &p_prime.space)?;
    Ok(StateFunction {
        space: p.space.clone(),
        values: p
            .probs
            .iter()
            .zip(&p_prime.probs)
            .map(|(a, b)| b / a)
            .collect(),
    })
}

/// The affine mixture `(1 - t) P + t P'`.
pub fn mixture(p: &Distribution, p_prime: &Distribution, t: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::MixtureWeight(t));
    }
    mixture_unchecked(p, p_prime, t)
}

/// Mixture evaluated on any `t` for which the result stays strictly positive.
/// Used for differentiating across the endpoints of a mixture path.
pub(crate) fn mixture_unchecked(p: &Distribution, p_prime: &Distribution, t: f64) -> Result<Distribution> {
    ensure_same(&p.space, &p_prime.space)?;
    let mut probs = Vec::with_capacity(p.len());
    for (i, (a, b)) in p.probs.iter().zip(&p_prime.probs).enumerate() {
        let v = (1.0 - t) * a + t * b;
        if v <= 0.0 {
            return Err(Error::NonPositive { state: i, value: v, t });
        }
        probs.push(v);
    }
    Ok(Distribution {
        space: p.space.clone(),
        probs,
    })
}

/// `f - E_P[f]`, the image of `f` in `L2_0(P)`.
pub fn center(f: &StateFunction, p: &Distribution) -> Result<StateFunction> {
    let m = expectation(f, p)?;
    Ok(f.shift(-m))
}
