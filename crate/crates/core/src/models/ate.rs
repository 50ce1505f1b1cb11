use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::manifold::{Distribution, SampleSpace, State, StateFunction};
use crate::numeric::{expit, logit, rng};
use crate::tangent::{Builder, Chart};

use super::{
    check_open_unit, check_simplex, clip_prob, default_levels, level_value, log_ratios, probability_grid,
    section_deviation, softmax_first_fixed, with_retries, EstimatingFunction, Model, NuisanceValue,
    Parameterization, Section, SectionGeometry, Which, DELTA, EQUALITY_TOL,
};

/// Tables of the binary-treatment, binary-outcome model with finite `L`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteTables {
    pub p_l: Vec<f64>,
    /// `P(A = 1 | L = l)`.
    pub propensity: Vec<f64>,
    /// `outcome[a][l] = P(Y = 1 | A = a, L = l)`.
    pub outcome: [Vec<f64>; 2],
}

#[inline]
pub(crate) fn idx(y: usize, a: usize, l: usize) -> usize {
    (l * 2 + a) * 2 + y
}

impl AteTables {
    pub fn levels(&self) -> usize {
        self.p_l.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.levels();
        if n == 0 {
            return Err(Error::Empty("p_l"));
        }
        for (field, t) in [
            ("propensity", &self.propensity),
            ("outcome[0]", &self.outcome[0]),
            ("outcome[1]", &self.outcome[1]),
        ] {
            if t.len() != n {
                return Err(Error::param(field, format!("expected {n} entries, got {}", t.len())));
            }
            check_open_unit(field, t)?;
        }
        check_simplex("p_l", &self.p_l)
    }

    pub fn joint(&self, space: &Arc<SampleSpace>) -> Result<Distribution> {
        let mut probs = vec![0.0; space.len()];
        for l in 0..self.levels() {
            for a in 0..2 {
                let pa = if a == 1 { self.propensity[l] } else { 1.0 - self.propensity[l] };
                let m = self.outcome[a][l];
                probs[idx(1, a, l)] = self.p_l[l] * pa * m;
                probs[idx(0, a, l)] = self.p_l[l] * pa * (1.0 - m);
            }
        }
        Distribution::new(space.clone(), probs)
    }

    pub fn recover(p: &Distribution, levels: usize) -> Result<Self> {
        if p.len() != 4 * levels {
            return Err(Error::SpaceMismatch);
        }
        let q = p.probs();
        let mut t = AteTables {
            p_l: vec![0.0; levels],
            propensity: vec![0.0; levels],
            outcome: [vec![0.0; levels], vec![0.0; levels]],
        };
        for l in 0..levels {
            let pa = [q[idx(0, 0, l)] + q[idx(1, 0, l)], q[idx(0, 1, l)] + q[idx(1, 1, l)]];
            t.p_l[l] = pa[0] + pa[1];
            t.propensity[l] = pa[1] / t.p_l[l];
            for a in 0..2 {
                t.outcome[a][l] = q[idx(1, a, l)] / pa[a];
            }
        }
        Ok(t)
    }

    /// `sum_l pL(l) P(Y = 1 | arm, l)`.
    pub fn theta(&self, arm: usize) -> f64 {
        self.p_l.iter().zip(&self.outcome[arm]).map(|(p, m)| p * m).sum()
    }

    fn coords(&self) -> Vec<f64> {
        let mut c = log_ratios(&self.p_l);
        c.extend(self.propensity.iter().map(|&e| logit(e)));
        for a in 0..2 {
            c.extend(self.outcome[a].iter().map(|&m| logit(m)));
        }
        c
    }

    fn from_coords(x: &[f64], levels: usize) -> Self {
        let (pl, rest) = x.split_at(levels - 1);
        let (e, rest) = rest.split_at(levels);
        let (m0, m1) = rest.split_at(levels);
        AteTables {
            p_l: softmax_first_fixed(pl),
            propensity: e.iter().map(|&v| expit(v)).collect(),
            outcome: [m0.iter().map(|&v| expit(v)).collect(), m1.iter().map(|&v| expit(v)).collect()],
        }
    }
}

/// Mean of `Y` on one treatment arm, `theta = E{E(Y | A = arm, L)}`, with
/// `gamma1 = E(Y | A, L)` and `gamma2 = P(A = 1 | L)`.
#[derive(Debug, Clone)]
pub struct AteModel {
    tables: AteTables,
    arm: usize,
    levels: Vec<String>,
    space: Arc<SampleSpace>,
    truth: Distribution,
}

pub fn build_ate(levels: Option<Vec<String>>, tables: AteTables, arm: usize) -> Result<AteModel> {
    if arm > 1 {
        return Err(Error::param("arm", format!("{arm} is not a binary treatment value")));
    }
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
    let truth = tables.joint(&space)?;
    Ok(AteModel {
        tables,
        arm,
        levels,
        space,
        truth,
    })
}

impl AteModel {
    pub fn tables(&self) -> &AteTables {
        &self.tables
    }

    pub fn arm(&self) -> usize {
        self.arm
    }

    fn n(&self) -> usize {
        self.levels.len()
    }

    fn recover(&self, p: &Distribution) -> Result<AteTables> {
        if !Arc::ptr_eq(p.space(), &self.space) && **p.space() != *self.space {
            return Err(Error::SpaceMismatch);
        }
        AteTables::recover(p, self.n())
    }

    /// Chart of the saturated model centered at `p`.
    pub fn chart_at(&self, p: &Distribution) -> Result<Chart> {
        let n = self.n();
        let tables = self.recover(p)?;
        let mut names: Vec<String> = (1..n).map(|l| format!("log_ratio_L{l}")).collect();
        names.extend((0..n).map(|l| format!("logit_e{l}")));
        for a in 0..2 {
            names.extend((0..n).map(|l| format!("logit_m{a}_{l}")));
        }
        let space = self.space.clone();
        let builder: Builder = Arc::new(move |x: &[f64]| AteTables::from_coords(x, n).joint(&space));
        let dim = names.len();
        Chart::new(names, tables.coords(), vec![false; dim], builder)
    }

    /// The AIPW function `w (y - gamma1(arm, l)) + gamma1(arm, l) - theta` with
    /// `w = 1(A = arm) / P(A = arm | l)`.
    pub fn aipw(&self) -> EstimatingFunction {
        let (space, arm, n) = (self.space.clone(), self.arm, self.n());
        EstimatingFunction::new(
            "aipw",
            true,
            Arc::new(move |theta, g1, g2| {
                check_len(g1, 2 * n)?;
                check_len(g2, n)?;
                Ok(StateFunction::from_fn(&space, |i| {
                    let (y, a, l) = unpack(i);
                    let m = g1.0[arm * n + l];
                    let pi = arm_prob(g2.0[l], arm);
                    let w = if a == arm { 1.0 / pi } else { 0.0 };
                    w * (y as f64 - m) + m - theta
                }))
            }),
        )
    }

    /// Inverse probability weighting, `1(A = arm) Y / P(A = arm | l) - theta`.
    pub fn ipw(&self) -> EstimatingFunction {
        let (space, arm, n) = (self.space.clone(), self.arm, self.n());
        EstimatingFunction::new(
            "ipw",
            true,
            Arc::new(move |theta, _g1, g2| {
                check_len(g2, n)?;
                Ok(StateFunction::from_fn(&space, |i| {
                    let (y, a, l) = unpack(i);
                    let w = if a == arm { 1.0 / arm_prob(g2.0[l], arm) } else { 0.0 };
                    w * y as f64 - theta
                }))
            }),
        )
    }
}

fn unpack(i: usize) -> (usize, usize, usize) {
    (i % 2, (i / 2) % 2, i / 4)
}

fn arm_prob(e: f64, arm: usize) -> f64 {
    if arm == 1 {
        e
    } else {
        1.0 - e
    }
}

pub(crate) fn check_len(v: &NuisanceValue, n: usize) -> Result<()> {
    if v.0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: v.0.len(),
        });
    }
    Ok(())
}

fn inside(x: f64) -> bool {
    x > DELTA && x < 1.0 - DELTA
}

impl Model for AteModel {
    fn name(&self) -> &'static str {
        "ate"
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "model": "ate",
            "arm": self.arm,
            "levels": self.levels,
            "p_l": self.tables.p_l,
            "propensity": self.tables.propensity,
            "outcome": {"0": self.tables.outcome[0], "1": self.tables.outcome[1]},
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
        let (n, arm) = (self.n(), self.arm);
        let space = self.space.clone();
        let guard = move |p: &Distribution| {
            if p.len() != space.len() {
                return Err(Error::SpaceMismatch);
            }
            AteTables::recover(p, n)
        };
        let g = guard.clone();
        let g1 = guard.clone();
        Parameterization {
            name: "outcome-regression/propensity".into(),
            theta: Arc::new(move |p| Ok(g(p)?.theta(arm))),
            gamma1: Arc::new(move |p| {
                let t = g1(p)?;
                Ok(NuisanceValue([t.outcome[0].clone(), t.outcome[1].clone()].concat()))
            }),
            gamma2: Arc::new(move |p| Ok(NuisanceValue(guard(p)?.propensity))),
            tolerance: EQUALITY_TOL,
        }
    }

    fn model_residual(&self, _p: &Distribution) -> Result<f64> {
        Ok(0.0)
    }

    fn saturated(&self) -> bool {
        true
    }

    fn estimating_functions(&self) -> Vec<EstimatingFunction> {
        vec![self.aipw(), self.ipw()]
    }

    fn sample_section(&self, base: &Distribution, which: Which, count: usize, seed: u64) -> Result<Section> {
        let t0 = self.recover(base)?;
        let theta0 = t0.theta(self.arm);
        let arm = self.arm;
        let mut r = rng(seed);
        let mut members = vec![base.clone()];
        for _ in 1..count {
            let q = with_retries(|| {
                let mut t = t0.clone();
                match which {
                    Which::One => {
                        let w: Vec<f64> = t0.p_l.iter().map(|p| p * r.random_range(-0.5..0.5f64).exp()).collect();
                        let s: f64 = w.iter().sum();
                        t.p_l = w.iter().map(|x| x / s).collect();
                        for a in 0..2 {
                            for m in t.outcome[a].iter_mut() {
                                *m += r.random_range(-0.15..0.15);
                            }
                        }
                        // affine repair of theta along the arm's outcome table
                        let lambda = theta0 - t.theta(arm);
                        for m in t.outcome[arm].iter_mut() {
                            *m += lambda;
                        }
                        if !t.outcome.iter().flatten().all(|&m| inside(m)) {
                            return Ok(None);
                        }
                    }
                    Which::Two => {
                        for e in t.propensity.iter_mut() {
                            *e += r.random_range(-0.2..0.2);
                        }
                        if !t.propensity.iter().all(|&e| inside(e)) {
                            return Ok(None);
                        }
                    }
                }
                t.joint(&self.space).map(Some)
            })?;
            members.push(q);
        }
        let residual = Arc::new(|_: &Distribution| Ok(0.0));
        let dev = section_deviation(&self.parameterization(), residual, base, which)?;
        Section::new(format!("ate {}", which.label()), which, seed, members, dev, SectionGeometry::Convex)
    }

    fn nuisance_grid(&self, which: Which, size: usize, seed: u64) -> Vec<NuisanceValue> {
        let truth = match which {
            Which::One => NuisanceValue([self.tables.outcome[0].clone(), self.tables.outcome[1].clone()].concat()),
            Which::Two => NuisanceValue(self.tables.propensity.clone()),
        };
        probability_grid(&truth, size, seed)
    }

    /// `gamma1 + 0.1` (clipped), or the propensity table reversed across `L`.
    fn designated_wrong(&self, which: Which) -> NuisanceValue {
        match which {
            Which::One => NuisanceValue(
                self.tables.outcome.iter().flatten().map(|m| clip_prob(m + 0.1)).collect(),
            ),
            Which::Two => NuisanceValue(self.tables.propensity.iter().rev().cloned().collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{expectation, mixture};
    use crate::tangent::eic_from_chart;

    pub(crate) fn example() -> AteModel {
        build_ate(
            None,
            AteTables {
                p_l: vec![0.5, 0.5],
                propensity: vec![0.3, 0.7],
                outcome: [vec![0.1, 0.4], vec![0.2, 0.6]],
            },
            1,
        )
        .unwrap()
    }

    // theta = sum over states with A = arm of P(1, arm, l) / P(arm | l)
    fn theta_by_summation(p: &Distribution, arm: usize, levels: usize) -> f64 {
        let q = p.probs();
        (0..levels)
            .map(|l| {
                let pl: f64 = (0..4).map(|k| q[4 * l + k]).sum();
                let pa = q[idx(0, arm, l)] + q[idx(1, arm, l)];
                q[idx(1, arm, l)] / (pa / pl)
            })
            .sum()
    }

    #[test]
    fn theta_examples() {
        let m = example();
        let theta = m.theta().unwrap();
        assert!((theta - 0.4).abs() < 1e-15);
        assert!((theta_by_summation(m.truth(), 1, 2) - 0.4).abs() < 1e-15);

        let single = build_ate(
            None,
            AteTables {
                p_l: vec![1.0],
                propensity: vec![0.4],
                outcome: [vec![0.3], vec![0.7]],
            },
            0,
        )
        .unwrap();
        assert!((single.theta().unwrap() - 0.3).abs() < 1e-15);

        let constant = build_ate(
            None,
            AteTables {
                p_l: vec![0.2, 0.3, 0.5],
                propensity: vec![0.1, 0.5, 0.9],
                outcome: [vec![0.25; 3], vec![0.25; 3]],
            },
            1,
        )
        .unwrap();
        assert!((constant.theta().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_probabilities_outside_unit_interval() {
        let bad = AteTables {
            p_l: vec![0.5, 0.5],
            propensity: vec![1.0, 0.7],
            outcome: [vec![0.1, 0.4], vec![0.2, 0.6]],
        };
        let err = build_ate(None, bad, 1).unwrap_err();
        assert!(err.to_string().contains("propensity[0]"), "{err}");
    }

    #[test]
    fn recover_round_trips() {
        let m = example();
        let back = AteTables::recover(m.truth(), 2).unwrap();
        for (a, b) in back.outcome.iter().flatten().zip(m.tables().outcome.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = m.chart().unwrap();
        assert!(c.base_distribution().unwrap().max_abs_diff(m.truth()).unwrap() < 1e-12);
    }

    #[test]
    fn aipw_double_robustness_by_summation() {
        let m = example();
        let d = m.aipw();
        let p = m.truth();
        let g1 = m.truth_nuisance(Which::One).unwrap();
        let g2 = m.truth_nuisance(Which::Two).unwrap();
        assert!(d.mean(p, 0.4, &g1, &g2).unwrap().abs() < 1e-12);
        let wrong1 = NuisanceValue(vec![0.9, 0.05, 0.33, 0.71]);
        assert!(d.mean(p, 0.4, &wrong1, &g2).unwrap().abs() < 1e-15);
        let wrong2 = NuisanceValue(vec![0.8, 0.15]);
        assert!(d.mean(p, 0.4, &g1, &wrong2).unwrap().abs() < 1e-15);
        let both = d
            .mean(p, 0.4, &m.designated_wrong(Which::One), &m.designated_wrong(Which::Two))
            .unwrap();
        assert!(both.abs() >= 0.01, "{both}");
        // local identification: E D(theta') = theta - theta'
        assert!((d.mean(p, 0.1, &g1, &g2).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ipw_unbiased_only_with_true_propensity() {
        let m = example();
        let d = m.ipw();
        let g1 = m.truth_nuisance(Which::One).unwrap();
        let g2 = m.truth_nuisance(Which::Two).unwrap();
        assert!(d.mean(m.truth(), 0.4, &g1, &g2).unwrap().abs() < 1e-15);
        assert!(d.mean(m.truth(), 0.4, &g1, &m.designated_wrong(Which::Two)).unwrap().abs() > 1e-3);
    }

    #[test]
    fn eic_equals_aipw_at_truth() {
        let m = example();
        let p = m.truth();
        let r = eic_from_chart(&m.chart().unwrap(), &*m.parameterization().theta, p).unwrap();
        let aipw = m.aipw().at(&m.parameterization(), p).unwrap();
        assert!(r.eic.max_abs_diff(&aipw).unwrap() < 1e-8);
        assert_eq!(r.pruned, 0);
    }

    #[test]
    fn sections_hold_membership() {
        let m = example();
        for which in [Which::One, Which::Two] {
            let single = m.sample_section(m.truth(), which, 1, 3).unwrap();
            assert_eq!(single.len(), 1);
            assert_eq!(single.base().max_abs_diff(m.truth()).unwrap(), 0.0);
            let s = m.sample_section(m.truth(), which, 40, 3).unwrap();
            assert_eq!(s.len(), 40);
            for q in s.members() {
                assert!(s.deviation(q).unwrap() <= 1e-10);
            }
            let mid = mixture(&s.members()[7], &s.members()[23], 0.5).unwrap();
            assert!(s.deviation(&mid).unwrap() <= 1e-12);
            let theta = &m.parameterization().theta;
            assert!((theta(&mid).unwrap() - theta_by_summation(&mid, 1, 2)).abs() < 1e-15);
        }
    }

    #[test]
    fn expectation_of_aipw_under_member() {
        let m = example();
        let s = m.sample_section(m.truth(), Which::One, 5, 11).unwrap();
        let d = m.aipw().at(&m.parameterization(), m.truth()).unwrap();
        // gamma2 and theta shared: E_{P'} of D at the truth vanishes
        for q in s.members() {
            assert!(expectation(&d, q).unwrap().abs() < 1e-12);
        }
    }
}
