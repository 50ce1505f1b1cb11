mod common;

use std::sync::Arc;

use proptest::prelude::*;

use drgeom::manifold::{center, density_ratio, expectation, inner_product, mixture, norm, Distribution, SampleSpace, StateFunction};
use drgeom::models::{build_ate, build_odds_ratio, AteTables, Model, OddsRatioTables, Scheme, Which};
use drgeom::montecarlo::{run_experiment, solve_theta_weighted, ExperimentConfig, Scenario};
use drgeom::robustness::{
    check_estimating_function, convexity_check, dr_bruteforce, flatness_suite, iff_check, necessity_check, theta_grid,
    FlatnessConfig,
};
use drgeom::tangent::{convex_tangent_basis, score_of_path, subspace_residual, verify_influence_curve, Path, Subspace};
use drgeom::transport::{e_transport, m_transport};

fn space(k: usize) -> Arc<SampleSpace> {
    SampleSpace::indexed(k).unwrap()
}

fn dist(s: &Arc<SampleSpace>, w: &[f64]) -> Distribution {
    Distribution::from_weights(s.clone(), w).unwrap()
}

fn func(s: &Arc<SampleSpace>, v: &[f64]) -> StateFunction {
    StateFunction::new(s.clone(), v.to_vec()).unwrap()
}

/// `k` states with weights bounded away from zero, plus `n` functions.
fn setting(n: usize) -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..=12).prop_flat_map(move |k| {
        (
            Just(k),
            prop::collection::vec(prop::collection::vec(0.05f64..1.0, k), 3),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, k), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centering_and_density_ratio((k, w, f) in setting(2)) {
        let s = space(k);
        let p = dist(&s, &w[0]);
        let q = dist(&s, &w[1]);
        let c = center(&func(&s, &f[0]), &p).unwrap();
        prop_assert!(expectation(&c, &p).unwrap().abs() <= 1e-14);
        prop_assert!((expectation(&density_ratio(&p, &q).unwrap(), &p).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn inner_product_symmetric_positive((k, w, f) in setting(2)) {
        let s = space(k);
        let p = dist(&s, &w[0]);
        let (a, b) = (func(&s, &f[0]), func(&s, &f[1]));
        let ab = inner_product(&a, &b, &p).unwrap();
        prop_assert_eq!(ab, inner_product(&b, &a, &p).unwrap());
        if a.max_abs() > 0.0 {
            prop_assert!(inner_product(&a, &a, &p).unwrap() > 0.0);
        }
    }

    #[test]
    fn mixtures_are_distributions((k, w, _f) in setting(0), t in 0.0f64..=1.0) {
        let s = space(k);
        let m = mixture(&dist(&s, &w[0]), &dist(&s, &w[1]), t).unwrap();
        prop_assert!(m.probs().iter().all(|&x| x > 0.0));
        prop_assert!((m.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn projection_idempotent_and_pythagorean((k, w, f) in setting(3)) {
        let s = space(k);
        let p = dist(&s, &w[0]);
        let sub = Subspace::span(&p, [func(&s, &f[1]), func(&s, &f[2])]).unwrap();
        let g = center(&func(&s, &f[0]), &p).unwrap();
        let once = sub.project(&g).unwrap();
        let twice = sub.project(&once).unwrap();
        prop_assert!(once.max_abs_diff(&twice).unwrap() <= 1e-12);
        let resid = g.sub(&once).unwrap();
        let lhs = norm(&g, &p).unwrap().powi(2);
        let rhs = norm(&once, &p).unwrap().powi(2) + norm(&resid, &p).unwrap().powi(2);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs));
    }

    #[test]
    fn mean_functional_riesz((k, w, f) in setting(1), seed in any::<u64>()) {
        let s = space(k);
        let p = dist(&s, &w[0]);
        let g = func(&s, &f[0]);
        let ic = center(&g, &p).unwrap();
        let mut r = drgeom::numeric::rng(seed);
        let paths: Vec<Path> = (0..100)
            .map(|_| {
                let q = drgeom::transport::random_distribution(&s, &mut r).unwrap();
                Path::mixture(&p, &q).unwrap()
            })
            .collect();
        let theta = |q: &Distribution| expectation(&g, q);
        let rep = verify_influence_curve(&ic, theta, &paths, &p, 1e-8).unwrap();
        prop_assert!(rep.pass, "{}", rep.max_gap);
    }

    #[test]
    fn convex_basis_matches_mixture_scores((k, w, _f) in setting(0)) {
        let s = space(k);
        let p = dist(&s, &w[0]);
        let members = [p.clone(), dist(&s, &w[1]), dist(&s, &w[2])];
        let convex = convex_tangent_basis(&members, &p).unwrap();
        let scores = [1, 2].map(|i| score_of_path(&Path::mixture(&p, &members[i]).unwrap()).unwrap());
        let paths = Subspace::span(&p, scores).unwrap();
        prop_assert!(subspace_residual(&convex, &paths).unwrap() <= 1e-10);
        prop_assert!(subspace_residual(&paths, &convex).unwrap() <= 1e-10);
    }

    #[test]
    fn transports_linear_and_path_independent((k, w, f) in setting(2), a in -2.0f64..2.0) {
        let s = space(k);
        let (p, q, r) = (dist(&s, &w[0]), dist(&s, &w[1]), dist(&s, &w[2]));
        let d1 = center(&func(&s, &f[0]), &p).unwrap();
        let d2 = center(&func(&s, &f[1]), &p).unwrap();
        let combo = d1.axpy(a, &d2).unwrap();
        for t in [e_transport, m_transport] {
            let lhs = t(&combo, &p, &q).unwrap();
            let rhs = t(&d1, &p, &q).unwrap().axpy(a, &t(&d2, &p, &q).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + lhs.max_abs()));
            let direct = t(&d1, &p, &q).unwrap();
            let via = t(&t(&d1, &p, &r).unwrap(), &r, &q).unwrap();
            prop_assert!(direct.max_abs_diff(&via).unwrap() <= 1e-12 * (1.0 + direct.max_abs()));
        }
    }

    #[test]
    fn m_transport_of_mixture_scores((k, w, _f) in setting(0)) {
        let s = space(k);
        let (p, q, pp) = (dist(&s, &w[0]), dist(&s, &w[1]), dist(&s, &w[2]));
        let score = density_ratio(&p, &q).unwrap().shift(-1.0);
        let moved = m_transport(&score, &p, &pp).unwrap();
        let expected = density_ratio(&pp, &q).unwrap().sub(&density_ratio(&pp, &p).unwrap()).unwrap();
        prop_assert!(moved.max_abs_diff(&expected).unwrap() <= 1e-12 * (1.0 + expected.max_abs()));
    }

    #[test]
    fn orthogonal_pairs_stay_orthogonal((k, w, f) in setting(2)) {
        let s = space(k);
        let (p, q) = (dist(&s, &w[0]), dist(&s, &w[1]));
        let d1 = center(&func(&s, &f[0]), &p).unwrap();
        let raw = center(&func(&s, &f[1]), &p).unwrap();
        let n1 = inner_product(&d1, &d1, &p).unwrap();
        prop_assume!(n1 > 1e-6);
        let d2 = raw.axpy(-inner_product(&raw, &d1, &p).unwrap() / n1, &d1).unwrap();
        let after = inner_product(&e_transport(&d1, &p, &q).unwrap(), &m_transport(&d2, &p, &q).unwrap(), &q).unwrap();
        prop_assert!(after.abs() <= 1e-12 * (1.0 + norm(&d1, &p).unwrap() * norm(&d2, &p).unwrap()));
    }
}

/// ATE tables with entries kept away from the admissible boundary.
fn ate_tables() -> impl Strategy<Value = AteTables> {
    (2usize..=3).prop_flat_map(|n| {
        (
            prop::collection::vec(0.2f64..1.0, n),
            prop::collection::vec(0.15f64..0.85, n),
            prop::collection::vec(0.25f64..0.75, n),
            prop::collection::vec(0.25f64..0.75, n),
        )
            .prop_map(|(w, e, m0, m1)| {
                let s: f64 = w.iter().sum();
                AteTables {
                    p_l: w.iter().map(|x| x / s).collect(),
                    propensity: e,
                    outcome: [m0, m1],
                }
            })
    })
}

fn or_tables() -> impl Strategy<Value = OddsRatioTables> {
    (
        -1.5f64..1.5,
        prop::collection::vec(0.15f64..0.85, 2),
        prop::collection::vec(0.15f64..0.85, 2),
        0.2f64..0.8,
    )
        .prop_map(|(theta, by, ba, l)| OddsRatioTables {
            theta,
            baseline_y: by,
            baseline_a: ba,
            p_l: vec![l, 1.0 - l],
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ate_sections_convex_and_members_valid(t in ate_tables(), arm in 0usize..2, seed in any::<u64>()) {
        let m = build_ate(None, t, arm).unwrap();
        for which in [Which::One, Which::Two] {
            let sec = m.sample_section(m.truth(), which, 12, seed).unwrap();
            for q in sec.members() {
                prop_assert!(sec.deviation(q).unwrap() <= 1e-12);
            }
            prop_assert!(convexity_check(&sec, 10, 1e-12).unwrap().pass);
        }
    }

    #[test]
    fn known_functions_are_estimating_functions(t in ate_tables(), arm in 0usize..2) {
        let m = build_ate(None, t, arm).unwrap();
        let theta = m.theta().unwrap();
        let grid = theta_grid(theta, 0.2, 9);
        for d in m.estimating_functions() {
            let r = check_estimating_function(&d, &m.parameterization(), m.truth(), &grid, 1e-12).unwrap();
            prop_assert!(r.pass, "{}", d.name);
        }
        // AIPW: E[D(theta')] = theta - theta'
        let aipw = m.aipw();
        let param = m.parameterization();
        let (_, g1, g2) = param.evaluate(m.truth()).unwrap();
        for &t in &grid {
            prop_assert!((aipw.mean(m.truth(), t, &g1, &g2).unwrap() - (theta - t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn odds_ratio_round_trip(t in or_tables()) {
        let m = build_odds_ratio(None, t.clone()).unwrap();
        let param = m.parameterization();
        let (theta, g1, g2) = param.evaluate(m.truth()).unwrap();
        prop_assert!((theta - t.theta).abs() <= 1e-12);
        prop_assert!(g1.distance(&drgeom::models::NuisanceValue(t.baseline_y.clone())) <= 1e-12);
        prop_assert!(g2.distance(&drgeom::models::NuisanceValue(t.baseline_a.clone())) <= 1e-12);
        let can = m.clone().with_scheme(Scheme::Canonical);
        for which in [Which::One, Which::Two] {
            for model in [&m, &can] {
                let sec = model.sample_section(model.truth(), which, 8, 5).unwrap();
                for q in sec.members() {
                    prop_assert!(sec.deviation(q).unwrap() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn population_root_in_singly_correct_scenarios(t in ate_tables(), arm in 0usize..2) {
        let m = build_ate(None, t, arm).unwrap();
        let theta = m.theta().unwrap();
        let d = m.aipw();
        for s in [Scenario::BothTrue, Scenario::Gamma1Wrong, Scenario::Gamma2Wrong] {
            let (g1, g2) = s.nuisances(&m).unwrap();
            let root = solve_theta_weighted(m.space(), m.truth().probs(), &d, &g1, &g2, (theta - 1.0, theta + 1.0)).unwrap();
            prop_assert!((root - theta).abs() <= 1e-10);
        }
    }
}

/// Verdict agreement and the implication chain over the zoo and every known
/// estimating function.
#[test]
fn verdicts_agree_across_zoo() {
    let ate = common::ate();
    let plm = common::plm();
    let alt = common::odds_ratio();
    let can = common::odds_ratio().with_scheme(Scheme::Canonical);
    let zoo: [&dyn Model; 4] = [&ate, &plm, &alt, &can];
    let cfg = FlatnessConfig {
        members: 20,
        grid_size: 100,
        pairs: 20,
        ..Default::default()
    };
    for m in zoo {
        let p = m.truth();
        let param = m.parameterization();
        let m1 = m.sample_section(p, Which::One, 20, 1).unwrap();
        let m2 = m.sample_section(p, Which::Two, 20, 2).unwrap();
        let g1 = m.nuisance_grid(Which::One, 100, 3);
        let g2 = m.nuisance_grid(Which::Two, 100, 4);
        for d in m.estimating_functions() {
            let dr = dr_bruteforce(m.name(), &d, &param, p, &g1, &g2, 1e-8).unwrap();
            let iff = iff_check(&d, &param, &[&m1, &m2], 1e-8).unwrap();
            assert_eq!(dr.pass, iff.doubly_robust, "{} / {} / {}", m.name(), param.name, d.name);
            if dr.pass {
                let at = d.at(&param, p).unwrap();
                assert!(necessity_check(&at, &m1, 1e-8).unwrap().pass);
                assert!(necessity_check(&at, &m2, 1e-8).unwrap().pass);
                for s in &iff.sections {
                    assert!(s.max_path_derivative <= 1e-8);
                }
            }
        }
        let r = flatness_suite(m, &cfg).unwrap();
        assert!(r.chain.consistent, "{} / {}: {:?}", m.name(), param.name, r.chain);
    }
}

#[test]
fn se_follows_square_root_law() {
    let m = common::ate();
    for seed in 0..4 {
        let se = |reps: usize| {
            let cfg = ExperimentConfig {
                n: vec![1000],
                reps,
                seed,
                scenarios: vec![Scenario::BothTrue],
                ..Default::default()
            };
            run_experiment(&m, &m.aipw(), &cfg).unwrap().rows[0].se
        };
        let ratio = se(400) / se(100);
        assert!((ratio / 0.5 - 1.0).abs() <= 0.2, "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn experiment_tables_are_reproducible() {
    let m = common::ate();
    let cfg = ExperimentConfig {
        n: vec![500, 2000],
        reps: 50,
        seed: 11,
        ..Default::default()
    };
    let a = serde_json::to_string(&run_experiment(&m, &m.aipw(), &cfg).unwrap()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| serde_json::to_string(&run_experiment(&m, &m.aipw(), &cfg).unwrap()).unwrap());
    assert_eq!(a, b);
}
