//! JSON model-spec files:
//!
//! ```json
//! {"model": "ate", "arm": 1,
//!  "params": {"p_l": {"0": 0.5, "1": 0.5}, "propensity": {"0": 0.3, "1": 0.7},
//!             "outcome": {"0": {"0": 0.1, "1": 0.4}, "1": {"0": 0.2, "1": 0.6}}}}
//! ```
//!
//! Tables are keyed by the level labels of `L`, in the order of `p_l`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

use super::{build_ate, build_odds_ratio, build_plm, AteTables, ModelInstance, OddsRatioTables, Parameterization, PlmSpec, Scheme};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: String,
    pub params: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameterization: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<usize>,
}

impl ModelSpec {
    /// Parse errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ModelSpec(m) => Error::ModelSpec(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn build(&self) -> Result<ModelInstance> {
        let p = Params(&self.params);
        match self.model.as_str() {
            "ate" => {
                let (levels, p_l) = p.levels()?;
                let outcome = p.object("outcome")?;
                let arm_table = |a: &str| -> Result<Vec<f64>> {
                    let t = outcome
                        .get(a)
                        .ok_or_else(|| missing(&format!("params.outcome.{a}")))?
                        .as_object()
                        .ok_or_else(|| kind(&format!("params.outcome.{a}"), "an object"))?;
                    table(t, &format!("params.outcome.{a}"), &levels)
                };
                let tables = AteTables {
                    p_l,
                    propensity: p.table("propensity", &levels)?,
                    outcome: [arm_table("0")?, arm_table("1")?],
                };
                let arm = self.arm.unwrap_or(1);
                let m = build_ate(Some(levels.clone()), tables, arm).map_err(|e| locate(e, &levels))?;
                Ok(Arc::new(m))
            }
            "plm" => {
                let (levels, p_l) = p.levels()?;
                let a_values = match self.params.get("a_values") {
                    None => [0.0, 1.0],
                    Some(v) => {
                        let xs = numbers(v, "params.a_values")?;
                        <[f64; 2]>::try_from(xs).map_err(|_| kind("params.a_values", "a pair of numbers"))?
                    }
                };
                let d = match self.params.get("d") {
                    None => None,
                    Some(v) => {
                        let obj = v.as_object().ok_or_else(|| kind("params.d", "an object"))?;
                        let mut rows = Vec::with_capacity(levels.len());
                        for lab in &levels {
                            let f = format!("params.d.{lab}");
                            let xs = numbers(obj.get(lab).ok_or_else(|| missing(&f))?, &f)?;
                            rows.push(<[f64; 2]>::try_from(xs).map_err(|_| kind(&f, "a pair of numbers"))?);
                        }
                        Some(rows)
                    }
                };
                let spec = PlmSpec {
                    theta: p.number("theta")?,
                    omega: p.table("omega", &levels)?,
                    p_l,
                    a_values,
                    propensity: p.table("propensity", &levels)?,
                    eps_values: numbers(p.get("eps_values")?, "params.eps_values")?,
                    eps_probs: numbers(p.get("eps_probs")?, "params.eps_probs")?,
                    d,
                };
                let m = build_plm(Some(levels.clone()), spec).map_err(|e| locate(e, &levels))?;
                Ok(Arc::new(m))
            }
            "odds_ratio" => {
                let (levels, p_l) = p.levels()?;
                let tables = OddsRatioTables {
                    theta: p.number("theta")?,
                    baseline_y: p.table("baseline_y", &levels)?,
                    baseline_a: p.table("baseline_a", &levels)?,
                    p_l,
                };
                let m = build_odds_ratio(Some(levels.clone()), tables).map_err(|e| locate(e, &levels))?;
                Ok(Arc::new(m.with_scheme(self.parameterization.unwrap_or(Scheme::Alternative))))
            }
            other => Err(Error::ModelSpec(format!(
                "field `model`: unknown model {other:?} (expected \"ate\", \"plm\" or \"odds_ratio\")"
            ))),
        }
    }
}

/// Reads, parses and builds a model-spec file.
pub fn load_model_spec(path: impl AsRef<Path>) -> Result<(ModelInstance, Parameterization)> {
    let m = ModelSpec::load(path)?.build()?;
    let param = m.parameterization();
    Ok((m, param))
}

struct Params<'a>(&'a Map<String, Value>);

impl Params<'_> {
    fn get(&self, name: &str) -> Result<&Value> {
        self.0.get(name).ok_or_else(|| missing(&format!("params.{name}")))
    }

    fn number(&self, name: &str) -> Result<f64> {
        self.get(name)?
            .as_f64()
            .ok_or_else(|| kind(&format!("params.{name}"), "a number"))
    }

    fn object(&self, name: &str) -> Result<&Map<String, Value>> {
        self.get(name)?
            .as_object()
            .ok_or_else(|| kind(&format!("params.{name}"), "an object keyed by level"))
    }

    fn table(&self, name: &str, levels: &[String]) -> Result<Vec<f64>> {
        table(self.object(name)?, &format!("params.{name}"), levels)
    }

    /// Level labels in file order, and the `p_l` table.
    fn levels(&self) -> Result<(Vec<String>, Vec<f64>)> {
        let obj = self.object("p_l")?;
        if obj.is_empty() {
            return Err(Error::ModelSpec("field `params.p_l`: no levels".into()));
        }
        let levels: Vec<String> = obj.keys().cloned().collect();
        let p_l = table(obj, "params.p_l", &levels)?;
        Ok((levels, p_l))
    }
}

fn table(obj: &Map<String, Value>, field: &str, levels: &[String]) -> Result<Vec<f64>> {
    if let Some(extra) = obj.keys().find(|k| !levels.contains(k)) {
        return Err(Error::ModelSpec(format!("field `{field}`: unknown level {extra:?}")));
    }
    levels
        .iter()
        .map(|lab| {
            let f = format!("{field}.{lab}");
            obj.get(lab)
                .ok_or_else(|| missing(&f))?
                .as_f64()
                .ok_or_else(|| kind(&f, "a number"))
        })
        .collect()
}

fn numbers(v: &Value, field: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| kind(field, "an array of numbers"))?
        .iter()
        .enumerate()
        .map(|(i, x)| x.as_f64().ok_or_else(|| kind(&format!("{field}[{i}]"), "a number")))
        .collect()
}

fn missing(field: &str) -> Error {
    Error::ModelSpec(format!("missing field `{field}`"))
}

fn kind(field: &str, expected: &str) -> Error {
    Error::ModelSpec(format!("field `{field}`: expected {expected}"))
}

/// Rewrites `name[i]` parameter paths from the builders into
/// `params.name.<level>`.
fn locate(e: Error, levels: &[String]) -> Error {
    let Error::InvalidParameter { field, reason } = e else {
        return e;
    };
    let (name, rest) = field.split_once('[').unwrap_or((field.as_str(), ""));
    let idx: Vec<usize> = rest
        .split(['[', ']'])
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect();
    let field = match (name, idx.as_slice()) {
        ("outcome", [a, l]) if *l < levels.len() => format!("params.outcome.{a}.{}", levels[*l]),
        (n, [i]) if !n.starts_with("eps") && *i < levels.len() => format!("params.{n}.{}", levels[*i]),
        _ => format!("params.{field}"),
    };
    Error::InvalidParameter { field, reason }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ATE: &str = r#"{"model": "ate", "arm": 1,
        "params": {"p_l": {"0": 0.5, "1": 0.5}, "propensity": {"0": 0.3, "1": 0.7},
                   "outcome": {"0": {"0": 0.1, "1": 0.4}, "1": {"0": 0.2, "1": 0.6}}}}"#;

    #[test]
    fn valid_ate_spec_builds() {
        let m = ModelSpec::from_json(ATE).unwrap().build().unwrap();
        assert!((m.theta().unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(m.describe()["arm"], 1);
    }

    #[test]
    fn missing_model_field_is_named() {
        let err = ModelSpec::from_json(r#"{"params": {}}"#).unwrap_err().to_string();
        assert!(err.contains("missing field `model`"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn propensity_of_one_is_a_semantic_error() {
        let text = ATE.replace("\"0\": 0.3", "\"0\": 1.0");
        let err = ModelSpec::from_json(&text).unwrap().build().unwrap_err();
        match err {
            Error::InvalidParameter { field, .. } => assert_eq!(field, "params.propensity.0"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_table_entry_is_named() {
        let text = ATE.replace(r#""propensity": {"0": 0.3, "1": 0.7}"#, r#""propensity": {"0": 0.3}"#);
        let err = ModelSpec::from_json(&text).unwrap().build().unwrap_err().to_string();
        assert!(err.contains("params.propensity.1"), "{err}");
    }

    #[test]
    fn plm_and_odds_ratio_specs() {
        let plm = r#"{"model": "plm", "params": {"theta": 2, "omega": {"0": 0, "1": 1},
            "p_l": {"0": 0.5, "1": 0.5}, "propensity": {"0": 0.4, "1": 0.6},
            "eps_values": [-1, 1], "eps_probs": [0.5, 0.5]}}"#;
        let m = ModelSpec::from_json(plm).unwrap().build().unwrap();
        assert!((m.theta().unwrap() - 2.0).abs() < 1e-15);
        let or = r#"{"model": "odds_ratio", "parameterization": "canonical",
            "params": {"theta": 0.6931471805599453, "baseline_y": {"0": 0.3, "1": 0.6},
            "baseline_a": {"0": 0.4, "1": 0.7}, "p_l": {"0": 0.4, "1": 0.6}}}"#;
        let m = ModelSpec::from_json(or).unwrap().build().unwrap();
        assert_eq!(m.describe()["parameterization"], "canonical");
        let bad = or.replace("canonical", "other");
        assert!(ModelSpec::from_json(&bad).is_err());
    }
}
