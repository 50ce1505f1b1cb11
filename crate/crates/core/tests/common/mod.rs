#![allow(dead_code)]

use drgeom::models::{build_ate, build_odds_ratio, build_plm, AteModel, AteTables, OddsRatioModel, OddsRatioTables, PlmModel, PlmSpec};

pub fn ate() -> AteModel {
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

pub fn plm() -> PlmModel {
    build_plm(None, PlmSpec::example()).unwrap()
}

pub fn odds_ratio() -> OddsRatioModel {
    build_odds_ratio(
        None,
        OddsRatioTables {
            theta: 2f64.ln(),
            baseline_y: vec![0.3, 0.6],
            baseline_a: vec![0.4, 0.7],
            p_l: vec![0.4, 0.6],
        },
    )
    .unwrap()
}

pub fn spec_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}
