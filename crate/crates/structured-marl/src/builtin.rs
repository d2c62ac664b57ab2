//! Named experiment setups and JSON overrides on top of them.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coupling::CouplingGraphs;
use crate::env::{EnvModel, Thermal, ThermalParams, Warehouse, WarehouseParams};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::mastac::TrainConfig;

pub const BUILTIN_NAMES: [&str; 3] = ["warehouse9", "warehouse40", "thermal40"];

/// Physical parameters of either environment family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvParams {
    Warehouse(WarehouseParams),
    Thermal(ThermalParams),
}

/// Graphs, environment parameters and training hyperparameters of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    pub graphs: CouplingGraphs,
    pub params: EnvParams,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn build_env(&self) -> Result<Box<dyn EnvModel>> {
        Ok(match &self.params {
            EnvParams::Warehouse(p) => Box::new(Warehouse::new(&self.name, self.graphs.clone(), p.clone())?),
            EnvParams::Thermal(p) => Box::new(Thermal::new(&self.name, self.graphs.clone(), p.clone())?),
        })
    }
}

pub fn builtin_config(name: &str) -> Result<Experiment> {
    let (graphs, params, train) = match name {
        "warehouse9" => {
            let amps = (1..=9).map(|i| if [2, 3, 5, 7].contains(&i) { 1.0 } else { -1.0 }).collect();
            (
                fixtures::warehouse9(),
                EnvParams::Warehouse(WarehouseParams::with_amplitudes(amps, 8)),
                TrainConfig::base(3500, 8, 0.95, 1e-4, 1e-3),
            )
        }
        "warehouse40" => {
            let amps = (1..=40).map(|i| if i % 2 == 1 { 1.0 } else { -1.0 }).collect();
            (
                fixtures::warehouse40(),
                EnvParams::Warehouse(WarehouseParams::with_amplitudes(amps, 8)),
                TrainConfig::base(6000, 8, 0.95, 5e-4, 5e-3),
            )
        }
        "thermal40" => {
            let mut train = TrainConfig::base(5000, 40, 0.9, 1e-4, 1e-3);
            train.actor_hidden = Vec::new();
            (fixtures::thermal40(), EnvParams::Thermal(ThermalParams::standard(40, 40)), train)
        }
        other => return Err(Error::UnknownConfig(other.to_string())),
    };
    Ok(Experiment { name: name.to_string(), graphs, params, train })
}

/// Recursively overwrite the fields of `base` present in `patch`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// A configuration file: `{"builtin": name, "graphs": {...}, "params": {...}, "train": {...}}`.
/// Every section except `builtin` is optional and overrides field by field.
pub fn experiment_from_json(text: &str) -> Result<Experiment> {
    let patch: Value = serde_json::from_str(text)?;
    let name = patch
        .get("builtin")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("missing string field `builtin`".into()))?;
    let mut base = serde_json::to_value(builtin_config(name)?)?;
    let mut rest = patch.clone();
    if let Value::Object(map) = &mut rest {
        map.remove("builtin");
        if let Some(extra) = map.keys().find(|k| !["name", "graphs", "params", "train"].contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown section `{extra}`")));
        }
        if map.contains_key("graphs") {
            if let Value::Object(b) = &mut base {
                b.remove("graphs");
            }
        }
    }
    merge(&mut base, &rest);
    let exp: Experiment = serde_json::from_value(base)?;
    exp.train.validate()?;
    if exp.graphs.n_agents != fixtures::by_name(name).map(|g| g.n_agents).unwrap_or(exp.graphs.n_agents) {
        return Err(Error::Config("graph override changes the number of agents".into()));
    }
    exp.build_env()?;
    Ok(exp)
}

/// A builtin name or the path of a JSON configuration file.
pub fn resolve_experiment(name_or_path: &str) -> Result<Experiment> {
    if BUILTIN_NAMES.contains(&name_or_path) {
        return builtin_config(name_or_path);
    }
    let text = std::fs::read_to_string(name_or_path).map_err(|e| Error::Io(format!("{name_or_path}: {e}")))?;
    experiment_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_hyperparameters() {
        let w9 = builtin_config("warehouse9").unwrap();
        assert_eq!((w9.graphs.n_agents, w9.train.episode_length, w9.train.gamma), (9, 8, 0.95));
        let t = builtin_config("thermal40").unwrap();
        assert_eq!((t.graphs.n_agents, t.train.episode_length, t.train.gamma), (40, 40, 0.9));
        let w40 = builtin_config("warehouse40").unwrap();
        assert_eq!((w40.train.epochs, w40.train.actor_lr, w40.train.critic_lr), (6000, 5e-4, 5e-3));
        assert!(builtin_config("warehouse10").is_err());
    }

    #[test]
    fn overrides_apply_field_by_field() {
        let exp = experiment_from_json(r#"{"builtin":"warehouse9","train":{"epochs":10,"variant":"undecq"},"params":{"phase":0.5}}"#).unwrap();
        assert_eq!(exp.train.epochs, 10);
        assert_eq!(exp.train.batch_size, 256);
        match exp.params {
            EnvParams::Warehouse(p) => {
                assert_eq!(p.phase, 0.5);
                assert_eq!(p.m0, vec![1.0; 9]);
            }
            _ => panic!("expected warehouse"),
        }
        assert!(experiment_from_json(r#"{"builtin":"warehouse9","train":{"tau":2.0}}"#).is_err());
        assert!(experiment_from_json(r#"{"builtin":"warehouse9","bogus":{}}"#).is_err());
        assert!(experiment_from_json(r#"{"train":{}}"#).is_err());
    }
}
