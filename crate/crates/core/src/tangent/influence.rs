use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{inner_product, Distribution, StateFunction};
use crate::numeric::{argmax, psd_solve};

use super::path::{derivative_at, pathwise_derivative, score_of_path, Chart, Path};
use super::subspace::same_point;

#[derive(Debug, Clone, Serialize)]
pub struct PathGap {
    pub derivative: f64,
    pub inner: f64,
    pub gap: f64,
}

/// Outcome of checking the Riesz identity `d theta(P_t)/dt = <IC, S>_P` over a
/// batch of paths.
#[derive(Debug, Clone, Serialize)]
pub struct RieszReport {
    pub tolerance: f64,
    pub paths: Vec<PathGap>,
    pub max_gap: f64,
    pub argmax: Option<usize>,
    pub pass: bool,
}

pub fn verify_influence_curve<F>(
    ic: &StateFunction,
    theta: F,
    paths: &[Path],
    p: &Distribution,
    tol: f64,
) -> Result<RieszReport>
where
    F: Fn(&Distribution) -> Result<f64>,
{
    let mut rows = Vec::with_capacity(paths.len());
    for path in paths {
        if !same_point(&path.start()?, p) && path.start()?.max_abs_diff(p)? > 1e-12 {
            return Err(Error::param("paths", "every path must start at P"));
        }
        let derivative = pathwise_derivative(&theta, path)?;
        let inner = inner_product(ic, &score_of_path(path)?, p)?;
        rows.push(PathGap {
            derivative,
            inner,
            gap: (derivative - inner).abs(),
        });
    }
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
    Ok(RieszReport {
        tolerance: tol,
        paths: rows,
        max_gap,
        argmax: argmax(&gaps),
        pass: max_gap <= tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EicResult {
    pub eic: StateFunction,
    /// `d theta / d coordinate` at the chart base.
    pub gradient: Vec<f64>,
    /// Directions of the score Gram matrix discarded as numerically dependent.
    pub pruned: usize,
    pub rank: usize,
}

/// Efficient influence curve of `theta` at the chart base: the unique element of
/// the span of the chart scores whose inner products with every score equal
/// the corresponding partial derivatives of `theta`.
pub fn eic_from_chart<F>(chart: &Chart, theta: F, p: &Distribution) -> Result<EicResult>
where
    F: Fn(&Distribution) -> Result<f64>,
{
    let at_base = chart.base_distribution()?;
    if at_base.max_abs_diff(p)? > 1e-12 {
        return Err(Error::param("chart", "chart base does not reproduce P"));
    }
    let scores = chart.scores()?;
    let gradient = (0..chart.dim())
        .map(|j| derivative_at(&theta, &chart.coordinate_path(j), 0.0))
        .collect::<Result<Vec<_>>>()?;
    let m = scores.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = inner_product(&scores[i], &scores[j], p)?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let (coef, pruned) = psd_solve(&gram, &DVector::from_vec(gradient.clone()));
    let mut eic = StateFunction::zero(p.space());
    for (c, s) in coef.iter().zip(&scores) {
        eic = eic.axpy(*c, s)?;
    }
    if pruned > 0 {
        log::debug!("eic_from_chart: pruned {pruned} dependent score directions");
    }
    Ok(EicResult {
        eic,
        gradient,
        pruned,
        rank: m - pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{center, expectation, SampleSpace};
    use crate::tangent::multinomial_chart;
    use std::sync::Arc;

    fn setup() -> (Distribution, StateFunction) {
        let s = SampleSpace::indexed(2).unwrap();
        let p = Distribution::new(s.clone(), vec![0.5, 0.5]).unwrap();
        let f = StateFunction::new(s, vec![1.0, 0.0]).unwrap();
        (p, f)
    }

    #[test]
    fn riesz_identity_for_linear_functional() {
        let (p, f) = setup();
        let q = Distribution::new(p.space().clone(), vec![0.25, 0.75]).unwrap();
        let ic = center(&f, &p).unwrap();
        let theta = |d: &Distribution| expectation(&f, d);
        let r = verify_influence_curve(&ic, theta, &[Path::mixture(&p, &q).unwrap()], &p, 1e-12)
            .unwrap();
        assert!((r.paths[0].derivative + 0.25).abs() < 1e-12);
        assert!((r.paths[0].inner + 0.25).abs() < 1e-15);
        assert!(r.pass);
    }

    #[test]
    fn empty_path_list_passes() {
        let (p, f) = setup();
        let r = verify_influence_curve(&f, |_| Ok(0.0), &[], &p, 1e-12).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_gap, 0.0);
    }

    #[test]
    fn perturbed_ic_fails() {
        let s = SampleSpace::indexed(3).unwrap();
        let p = Distribution::new(s.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        let f = StateFunction::new(s.clone(), vec![1.0, 0.0, 2.0]).unwrap();
        let ic = center(&f, &p).unwrap();
        let q = Distribution::new(s.clone(), vec![0.4, 0.4, 0.2]).unwrap();
        let bump = center(&StateFunction::new(s, vec![0.0, 1.0, 0.0]).unwrap(), &p).unwrap();
        let bad = ic.axpy(0.3, &bump).unwrap();
        let theta = |d: &Distribution| expectation(&f, d);
        let paths = [Path::mixture(&p, &q).unwrap()];
        assert!(verify_influence_curve(&ic, theta, &paths, &p, 1e-9).unwrap().pass);
        assert!(!verify_influence_curve(&bad, theta, &paths, &p, 1e-9).unwrap().pass);
    }

    #[test]
    fn saturated_eic_of_mean_is_centered_function() {
        let s = SampleSpace::indexed(4).unwrap();
        let p = Distribution::new(s.clone(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let f = StateFunction::new(s, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let chart = multinomial_chart(&p).unwrap();
        let r = eic_from_chart(&chart, |d| expectation(&f, d), &p).unwrap();
        assert_eq!(r.pruned, 0);
        assert!(r.eic.max_abs_diff(&center(&f, &p).unwrap()).unwrap() < 1e-8);
    }

    #[test]
    fn one_parameter_chart_eic() {
        // theta is the only coordinate: EIC = (d theta/dt) S / <S, S>
        let s = SampleSpace::indexed(3).unwrap();
        let space = s.clone();
        let builder: super::super::path::Builder = Arc::new(move |x: &[f64]| {
            let w = [1.0, x[0].exp(), (2.0 * x[0]).exp()];
            let t: f64 = w.iter().sum();
            Distribution::new(space.clone(), w.iter().map(|v| v / t).collect())
        });
        let chart = Chart::new(vec!["theta".into()], vec![0.3], vec![true], builder).unwrap();
        let p = chart.base_distribution().unwrap();
        let theta = |d: &Distribution| Ok((d.probs()[1] / d.probs()[0]).ln());
        let r = eic_from_chart(&chart, theta, &p).unwrap();
        let sc = score_of_path(&chart.coordinate_path(0)).unwrap();
        let ss = inner_product(&sc, &sc, &p).unwrap();
        let expected = sc.scale(1.0 / ss);
        assert!((r.gradient[0] - 1.0).abs() < 1e-9);
        assert!(r.eic.max_abs_diff(&expected).unwrap() < 1e-8);
    }

    #[test]
    fn overparameterized_chart_is_pruned() {
        let s = SampleSpace::indexed(3).unwrap();
        let space = s.clone();
        // softmax with all three logits free: one redundant direction
        let builder: super::super::path::Builder = Arc::new(move |x: &[f64]| {
            let w: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let t: f64 = w.iter().sum();
            Distribution::new(space.clone(), w.iter().map(|v| v / t).collect())
        });
        let chart = Chart::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, 0.4, -0.2],
            vec![false; 3],
            builder,
        )
        .unwrap();
        let p = chart.base_distribution().unwrap();
        let f = StateFunction::new(s, vec![2.0, 0.0, 1.0]).unwrap();
        let r = eic_from_chart(&chart, |d| expectation(&f, d), &p).unwrap();
        assert_eq!(r.pruned, 1);
        assert!(r.eic.max_abs_diff(&center(&f, &p).unwrap()).unwrap() < 1e-8);
    }
}
