use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::manifold::{Distribution, SampleSpace, State, StateFunction};
use crate::numeric::{expit, logit, rng};
use crate::tangent::{Builder, Chart};

use super::ate::check_len;
use super::{
    check_open_unit, check_simplex, clip_prob, default_levels, level_value, log_ratios, probability_grid, real_grid,
    section_deviation, softmax_first_fixed, with_retries, EstimatingFunction, Model, NuisanceValue, Parameterization,
    Section, SectionGeometry, Which, EQUALITY_TOL,
};

/// `Y = theta A + omega(L) + eps` with binary-support `A`, finite `L` and
/// finitely supported mean-zero `eps` independent of `(A, L)` at the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlmSpec {
    pub theta: f64,
    pub omega: Vec<f64>,
    pub p_l: Vec<f64>,
    /// The two support points of `A`.
    pub a_values: [f64; 2],
    /// `P(A = a_values[1] | L = l)`.
    pub propensity: Vec<f64>,
    pub eps_values: Vec<f64>,
    pub eps_probs: Vec<f64>,
    /// `d(A, L)` as `d[l][k]` for `A = a_values[k]`; `d = A` when absent.
    pub d: Option<Vec<[f64; 2]>>,
}

impl PlmSpec {
    /// `theta = 2`, `omega(l) = l`, `eps = +-1` equiprobable, binary `A` and `L`.
    pub fn example() -> Self {
        PlmSpec {
            theta: 2.0,
            omega: vec![0.0, 1.0],
            p_l: vec![0.5, 0.5],
            a_values: [0.0, 1.0],
            propensity: vec![0.4, 0.6],
            eps_values: vec![-1.0, 1.0],
            eps_probs: vec![0.5, 0.5],
            d: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.p_l.len();
        if n == 0 {
            return Err(Error::Empty("p_l"));
        }
        check_simplex("p_l", &self.p_l)?;
        for (field, len) in [("omega", self.omega.len()), ("propensity", self.propensity.len())] {
            if len != n {
                return Err(Error::param(field, format!("expected {n} entries, got {len}")));
            }
        }
        check_open_unit("propensity", &self.propensity)?;
        if self.a_values[0] == self.a_values[1] {
            return Err(Error::param("a_values", "the two support points of A coincide"));
        }
        if self.eps_values.len() < 2 || self.eps_values.len() != self.eps_probs.len() {
            return Err(Error::param("eps_values", "need at least two points, one probability each"));
        }
        check_simplex("eps_probs", &self.eps_probs)?;
        let mut sorted = self.eps_values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("eps_values", "support points must be distinct"));
        }
        let mean: f64 = self.eps_values.iter().zip(&self.eps_probs).map(|(e, p)| e * p).sum();
        if mean.abs() > 1e-12 {
            return Err(Error::param("eps_values", format!("error distribution has mean {mean}, not 0")));
        }
        if let Some(d) = &self.d {
            if d.len() != n {
                return Err(Error::param("d", format!("expected {n} rows, got {}", d.len())));
            }
        }
        Ok(())
    }

    fn d_table(&self) -> Vec<[f64; 2]> {
        self.d.clone().unwrap_or_else(|| vec![self.a_values; self.p_l.len()])
    }
}

#[derive(Debug, Clone)]
struct Layout {
    levels: usize,
    eps: usize,
    a_values: [f64; 2],
    /// Fixed `Y` support of every `(l, k)` cell.
    support: Vec<Vec<f64>>,
    d: Vec<[f64; 2]>,
}

impl Layout {
    fn cell(&self, l: usize, k: usize) -> usize {
        l * 2 + k
    }

    fn index(&self, l: usize, k: usize, j: usize) -> usize {
        self.cell(l, k) * self.eps + j
    }

    fn unpack(&self, i: usize) -> (usize, usize, usize) {
        let c = i / self.eps;
        (c / 2, c % 2, i % self.eps)
    }

    fn y(&self, i: usize) -> f64 {
        let (l, k, j) = self.unpack(i);
        self.support[self.cell(l, k)][j]
    }

    fn chart_dim(&self) -> usize {
        1 + 3 * self.levels - 1 + 2 * self.levels * (self.eps - 1)
    }
}

/// Marginals and cell conditionals of a distribution on the PLM space.
struct Pieces {
    p_l: Vec<f64>,
    propensity: Vec<f64>,
    cells: Vec<Vec<f64>>,
    means: Vec<f64>,
}

fn pieces(lay: &Layout, p: &Distribution) -> Result<Pieces> {
    if p.len() != lay.levels * 2 * lay.eps {
        return Err(Error::SpaceMismatch);
    }
    let q = p.probs();
    let mut out = Pieces {
        p_l: vec![0.0; lay.levels],
        propensity: vec![0.0; lay.levels],
        cells: Vec::with_capacity(2 * lay.levels),
        means: Vec::with_capacity(2 * lay.levels),
    };
    for l in 0..lay.levels {
        let mut mass = [0.0; 2];
        for k in 0..2 {
            let c = lay.cell(l, k);
            let w: Vec<f64> = (0..lay.eps).map(|j| q[lay.index(l, k, j)]).collect();
            mass[k] = w.iter().sum();
            let cond: Vec<f64> = w.iter().map(|x| x / mass[k]).collect();
            out.means.push(cond.iter().zip(&lay.support[c]).map(|(a, y)| a * y).sum());
            out.cells.push(cond);
        }
        out.p_l[l] = mass[0] + mass[1];
        out.propensity[l] = mass[1] / out.p_l[l];
    }
    Ok(out)
}

fn slopes(lay: &Layout, pc: &Pieces) -> Vec<f64> {
    let da = lay.a_values[1] - lay.a_values[0];
    (0..lay.levels)
        .map(|l| (pc.means[lay.cell(l, 1)] - pc.means[lay.cell(l, 0)]) / da)
        .collect()
}

fn theta_of(lay: &Layout, pc: &Pieces) -> f64 {
    slopes(lay, pc).iter().zip(&pc.p_l).map(|(s, p)| s * p).sum()
}

fn gamma1_of(lay: &Layout, pc: &Pieces) -> Vec<f64> {
    (0..lay.levels)
        .map(|l| (1.0 - pc.propensity[l]) * lay.d[l][0] + pc.propensity[l] * lay.d[l][1])
        .collect()
}

fn gamma2_of(lay: &Layout, pc: &Pieces, theta: f64) -> Vec<f64> {
    (0..lay.levels)
        .map(|l| {
            let e = pc.propensity[l];
            let ey = (1.0 - e) * pc.means[lay.cell(l, 0)] + e * pc.means[lay.cell(l, 1)];
            let ea = (1.0 - e) * lay.a_values[0] + e * lay.a_values[1];
            ey - theta * ea
        })
        .collect()
}

/// Exponential tilt of `s` over `y` whose mean is `mu`.
fn tilt(s: &[f64], y: &[f64], mu: f64) -> Result<Vec<f64>> {
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(mu > lo && mu < hi) {
        return Err(Error::param("cell mean", format!("{mu} is outside the support ({lo}, {hi})")));
    }
    let z: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let weights = |lambda: f64| -> Vec<f64> {
        let m = z.iter().map(|v| lambda * v).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().zip(&z).map(|(a, v)| a * (lambda * v - m).exp()).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect()
    };
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = weights(lambda);
        let f: f64 = w.iter().zip(&z).map(|(p, v)| p * v).sum();
        if f.abs() <= 1e-16 * scale {
            return Ok(w);
        }
        if f < 0.0 {
            a = lambda;
        } else {
            b = lambda;
        }
        let var: f64 = w.iter().zip(&z).map(|(p, v)| p * (v - f) * (v - f)).sum();
        let mut next = lambda - f / var;
        if !next.is_finite() || next <= a || next >= b {
            next = match (a.is_finite(), b.is_finite()) {
                (true, true) => 0.5 * (a + b),
                (true, false) => a + 1.0 + a.abs(),
                (false, true) => b - 1.0 - b.abs(),
                (false, false) => 0.0,
            };
        }
        if (next - lambda).abs() <= 1e-16 * (1.0 + lambda.abs()) {
            return Ok(weights(next));
        }
        lambda = next;
    }
    Ok(weights(lambda))
}

/// Builds a joint from `[theta, omega(L), logit e(L), log-ratio pL, shapes]`.
fn build_from(lay: &Layout, space: &Arc<SampleSpace>, x: &[f64]) -> Result<Distribution> {
    let n = lay.levels;
    let theta = x[0];
    let omega = &x[1..1 + n];
    let e: Vec<f64> = x[1 + n..1 + 2 * n].iter().map(|&v| expit(v)).collect();
    let p_l = softmax_first_fixed(&x[1 + 2 * n..3 * n]);
    let shapes = &x[3 * n..];
    let mut probs = vec![0.0; space.len()];
    for l in 0..n {
        for k in 0..2 {
            let c = lay.cell(l, k);
            let s = softmax_first_fixed(&shapes[c * (lay.eps - 1)..(c + 1) * (lay.eps - 1)]);
            let q = tilt(&s, &lay.support[c], theta * lay.a_values[k] + omega[l])?;
            let pk = if k == 1 { e[l] } else { 1.0 - e[l] };
            for j in 0..lay.eps {
                probs[lay.index(l, k, j)] = p_l[l] * pk * q[j];
            }
        }
    }
    Distribution::new(space.clone(), probs)
}

#[derive(Debug, Clone)]
pub struct PlmModel {
    spec: PlmSpec,
    levels: Vec<String>,
    layout: Arc<Layout>,
    space: Arc<SampleSpace>,
    truth: Distribution,
}

pub fn build_plm(levels: Option<Vec<String>>, spec: PlmSpec) -> Result<PlmModel> {
    spec.validate()?;
    let n = spec.p_l.len();
    let levels = levels.unwrap_or_else(|| default_levels(n));
    if levels.len() != n {
        return Err(Error::param("levels", "one label per level of L required"));
    }
    let eps = spec.eps_values.len();
    let mut support = Vec::with_capacity(2 * n);
    let mut states = Vec::with_capacity(2 * n * eps);
    for (l, lab) in levels.iter().enumerate() {
        for k in 0..2 {
            let a = spec.a_values[k];
            let ys: Vec<f64> = spec.eps_values.iter().map(|e| spec.theta * a + spec.omega[l] + e).collect();
            for &y in &ys {
                states.push(State::new(
                    vec![fmt_num(y), fmt_num(a), lab.clone()],
                    vec![y, a, level_value(lab, l)],
                ));
            }
            support.push(ys);
        }
    }
    let space = SampleSpace::new(vec!["Y".into(), "A".into(), "L".into()], states)?;
    let layout = Arc::new(Layout {
        levels: n,
        eps,
        a_values: spec.a_values,
        support,
        d: spec.d_table(),
    });
    let mut probs = vec![0.0; space.len()];
    for l in 0..n {
        for k in 0..2 {
            let pk = if k == 1 { spec.propensity[l] } else { 1.0 - spec.propensity[l] };
            for j in 0..eps {
                probs[layout.index(l, k, j)] = spec.p_l[l] * pk * spec.eps_probs[j];
            }
        }
    }
    let truth = Distribution::new(space.clone(), probs)?;
    Ok(PlmModel {
        spec,
        levels,
        layout,
        space,
        truth,
    })
}

fn fmt_num(x: f64) -> String {
    let r = (x * 1e9).round() / 1e9;
    format!("{}", r + 0.0)
}

impl PlmModel {
    pub fn spec(&self) -> &PlmSpec {
        &self.spec
    }

    fn coords(&self, p: &Distribution) -> Result<Vec<f64>> {
        let lay = &self.layout;
        let pc = pieces(lay, p)?;
        let theta = theta_of(lay, &pc);
        let mut c = vec![theta];
        c.extend(gamma2_of(lay, &pc, theta));
        c.extend(pc.propensity.iter().map(|&e| logit(e)));
        c.extend(log_ratios(&pc.p_l));
        for cell in &pc.cells {
            c.extend(log_ratios(cell));
        }
        Ok(c)
    }

    /// Chart of the model centered at a member `p`.
    pub fn chart_at(&self, p: &Distribution) -> Result<Chart> {
        let resid = self.model_residual(p)?;
        if resid > 1e-10 {
            return Err(Error::param("base", format!("distribution is off the model (residual {resid:e})")));
        }
        let lay = &self.layout;
        let n = lay.levels;
        let mut names = vec!["theta".to_string()];
        names.extend((0..n).map(|l| format!("omega_{l}")));
        names.extend((0..n).map(|l| format!("logit_e{l}")));
        names.extend((1..n).map(|l| format!("log_ratio_L{l}")));
        for l in 0..n {
            for k in 0..2 {
                names.extend((1..lay.eps).map(|j| format!("shape_{l}_{k}_{j}")));
            }
        }
        debug_assert_eq!(names.len(), lay.chart_dim());
        let mut theta_coords = vec![false; names.len()];
        theta_coords[0] = true;
        let (lay, space) = (self.layout.clone(), self.space.clone());
        let builder: Builder = Arc::new(move |x: &[f64]| build_from(&lay, &space, x));
        Chart::new(names, self.coords(p)?, theta_coords, builder)
    }

    /// `{d(A, L) - gamma1(L)} {Y - theta A - gamma2(L)}`.
    pub fn partial_linear(&self) -> EstimatingFunction {
        let (lay, space) = (self.layout.clone(), self.space.clone());
        EstimatingFunction::new(
            "partially-linear",
            true,
            Arc::new(move |theta, g1, g2| {
                check_len(g1, lay.levels)?;
                check_len(g2, lay.levels)?;
                Ok(StateFunction::from_fn(&space, |i| {
                    let (l, k, _) = lay.unpack(i);
                    let a = lay.a_values[k];
                    (lay.d[l][k] - g1.0[l]) * (lay.y(i) - theta * a - g2.0[l])
                }))
            }),
        )
    }

    fn d_is_probability(&self) -> bool {
        self.layout.d.iter().flatten().all(|&v| (0.0..=1.0).contains(&v))
    }
}

impl Model for PlmModel {
    fn name(&self) -> &'static str {
        "plm"
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "model": "plm",
            "levels": self.levels,
            "theta": self.spec.theta,
            "omega": self.spec.omega,
            "p_l": self.spec.p_l,
            "a_values": self.spec.a_values,
            "propensity": self.spec.propensity,
            "eps_values": self.spec.eps_values,
            "eps_probs": self.spec.eps_probs,
            "d": self.layout.d,
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
        let (l0, l1, l2) = (self.layout.clone(), self.layout.clone(), self.layout.clone());
        Parameterization {
            name: "E[d|L]/omega".into(),
            theta: Arc::new(move |p| Ok(theta_of(&l0, &pieces(&l0, p)?))),
            gamma1: Arc::new(move |p| Ok(NuisanceValue(gamma1_of(&l1, &pieces(&l1, p)?)))),
            gamma2: Arc::new(move |p| {
                let pc = pieces(&l2, p)?;
                let theta = theta_of(&l2, &pc);
                Ok(NuisanceValue(gamma2_of(&l2, &pc, theta)))
            }),
            tolerance: EQUALITY_TOL,
        }
    }

    /// Spread of the within-`L` regression slopes around `theta`.
    fn model_residual(&self, p: &Distribution) -> Result<f64> {
        let pc = pieces(&self.layout, p)?;
        let theta = theta_of(&self.layout, &pc);
        Ok(slopes(&self.layout, &pc).iter().fold(0.0, |m, s| m.max((s - theta).abs())))
    }

    fn saturated(&self) -> bool {
        false
    }

    fn estimating_functions(&self) -> Vec<EstimatingFunction> {
        vec![self.partial_linear()]
    }

    fn sample_section(&self, base: &Distribution, which: Which, count: usize, seed: u64) -> Result<Section> {
        let chart = self.chart_at(base)?;
        let x0 = chart.base().to_vec();
        let n = self.layout.levels;
        let mut r = rng(seed);
        let mut members = vec![base.clone()];
        for _ in 1..count {
            let q = with_retries(|| {
                let mut x = x0.clone();
                match which {
                    // theta and omega fixed
                    Which::One => {
                        for v in &mut x[1 + n..1 + 2 * n] {
                            *v += r.random_range(-0.6..0.6);
                        }
                    }
                    // theta and the law of A given L fixed
                    Which::Two => {
                        for v in &mut x[1..1 + n] {
                            *v += r.random_range(-0.5..0.5);
                        }
                    }
                }
                for v in &mut x[1 + 2 * n..] {
                    *v += r.random_range(-0.5..0.5);
                }
                match chart.eval(&x) {
                    Ok(q) => Ok(Some(q)),
                    Err(Error::InvalidParameter { .. }) | Err(Error::NonPositive { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })?;
            members.push(q);
        }
        let model = self.clone();
        let residual = Arc::new(move |q: &Distribution| model.model_residual(q));
        let dev = section_deviation(&self.parameterization(), residual, base, which)?;
        Section::new(format!("plm {}", which.label()), which, seed, members, dev, SectionGeometry::Convex)
    }

    fn nuisance_grid(&self, which: Which, size: usize, seed: u64) -> Vec<NuisanceValue> {
        let truth = self.truth_nuisance(which).expect("truth lies on the model space");
        match which {
            Which::One if self.d_is_probability() => probability_grid(&truth, size, seed),
            Which::One => {
                let span = self.layout.d.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                real_grid(&truth, span.max(1.0), size, seed)
            }
            Which::Two => real_grid(&truth, 1.0, size, seed),
        }
    }

    fn designated_wrong(&self, which: Which) -> NuisanceValue {
        let truth = self.truth_nuisance(which).expect("truth lies on the model space");
        match which {
            Which::One if self.d_is_probability() => NuisanceValue(truth.0.iter().map(|v| clip_prob(v + 0.1)).collect()),
            Which::One => NuisanceValue(truth.0.iter().map(|v| v + 0.1).collect()),
            Which::Two => NuisanceValue(truth.0.iter().rev().map(|v| v + 0.5).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{expectation, mixture};
    use crate::tangent::eic_from_chart;

    fn example() -> PlmModel {
        build_plm(None, PlmSpec::example()).unwrap()
    }

    // E[D] by direct summation over (l, a, eps) with the joint written out.
    fn mean_by_summation(spec: &PlmSpec, theta: f64, g1: &[f64], g2: &[f64]) -> f64 {
        let mut total = 0.0;
        for l in 0..spec.p_l.len() {
            for k in 0..2 {
                let a = spec.a_values[k];
                let pa = if k == 1 { spec.propensity[l] } else { 1.0 - spec.propensity[l] };
                for (e, pe) in spec.eps_values.iter().zip(&spec.eps_probs) {
                    let y = spec.theta * a + spec.omega[l] + e;
                    total += spec.p_l[l] * pa * pe * (a - g1[l]) * (y - theta * a - g2[l]);
                }
            }
        }
        total
    }

    #[test]
    fn space_and_truth() {
        let m = example();
        assert_eq!(m.space().len(), 8);
        assert!((m.theta().unwrap() - 2.0).abs() < 1e-15);
        assert!(m.truth_nuisance(Which::Two).unwrap().distance(&NuisanceValue(vec![0.0, 1.0])) < 1e-15);
        let g1 = m.truth_nuisance(Which::One).unwrap().0;
        assert!((g1[0] - 0.4).abs() < 1e-15 && (g1[1] - 0.6).abs() < 1e-15);
        assert!(m.model_residual(m.truth()).unwrap() < 1e-15);
    }

    #[test]
    fn rejects_non_mean_zero_errors() {
        let mut spec = PlmSpec::example();
        spec.eps_probs = vec![0.3, 0.7];
        let err = build_plm(None, spec).unwrap_err();
        assert!(err.to_string().contains("eps_values"), "{err}");
    }

    #[test]
    fn double_robustness_by_summation() {
        let m = example();
        let d = m.partial_linear();
        let spec = m.spec().clone();
        let g1 = m.truth_nuisance(Which::One).unwrap();
        let g2 = m.truth_nuisance(Which::Two).unwrap();
        let p = m.truth();
        assert!(d.mean(p, 2.0, &g1, &g2).unwrap().abs() < 1e-12);
        let w2 = NuisanceValue(vec![0.7, -0.4]);
        let w1 = NuisanceValue(vec![0.15, 0.9]);
        for (a, b) in [(&w1, &g2), (&g1, &w2)] {
            let got = d.mean(p, 2.0, a, b).unwrap();
            assert!(got.abs() < 1e-12, "{got}");
            assert!((got - mean_by_summation(&spec, 2.0, &a.0, &b.0)).abs() < 1e-15);
        }
        assert!(d.mean(p, 2.0, &w1, &w2).unwrap().abs() > 1e-3);
        // nonzero slope in theta
        assert!((d.mean(p, 2.5, &g1, &g2).unwrap() - d.mean(p, 2.0, &g1, &g2).unwrap()).abs() > 0.01);
    }

    #[test]
    fn tilt_hits_requested_mean() {
        let q = tilt(&[0.2, 0.5, 0.3], &[-1.0, 0.0, 2.0], 0.7).unwrap();
        let mean: f64 = q.iter().zip([-1.0, 0.0, 2.0]).map(|(a, y)| a * y).sum();
        assert!((mean - 0.7).abs() < 1e-15);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(tilt(&[0.5, 0.5], &[-1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn chart_reproduces_truth_and_prunes() {
        let m = example();
        let c = m.chart().unwrap();
        assert!(c.base_distribution().unwrap().max_abs_diff(m.truth()).unwrap() < 1e-12);
        let r = eic_from_chart(&c, &*m.parameterization().theta, m.truth()).unwrap();
        // two-point errors: every shape coordinate is redundant
        assert_eq!(r.rank, 6);
        // homoscedastic errors: the EIC is D scaled by 1 / E[{A - E(A|L)} A]
        let d = m.partial_linear().at(&m.parameterization(), m.truth()).unwrap();
        let slope = expectation(&StateFunction::from_fn(m.space(), |i| {
            let (l, k, _) = m.layout.unpack(i);
            let a = m.layout.a_values[k];
            (a - [0.4, 0.6][l]) * a
        }), m.truth())
        .unwrap();
        assert!(r.eic.max_abs_diff(&d.scale(1.0 / slope)).unwrap() < 1e-8);
    }

    #[test]
    fn sections_hold_membership_and_convexity() {
        let mut spec = PlmSpec::example();
        spec.eps_values = vec![-1.0, 0.0, 2.0];
        spec.eps_probs = vec![0.5, 0.25, 0.25];
        let m = build_plm(None, spec).unwrap();
        for which in [Which::One, Which::Two] {
            let s = m.sample_section(m.truth(), which, 30, 9).unwrap();
            for q in s.members() {
                assert!(s.deviation(q).unwrap() <= 1e-10);
            }
            let mid = mixture(&s.members()[3], &s.members()[17], 0.5).unwrap();
            assert!(s.deviation(&mid).unwrap() <= 1e-12);
        }
    }
}
