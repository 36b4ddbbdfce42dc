//! Trial configuration: one JSON document plus `BIASTRIAL_<PATH>`
//! environment overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use biastrial_core::phantom::PhantomConfig;
use biastrial_core::simba_gen::{DatasetConfig, ScenarioKind};
use biastrial_nn::{CnnConfig, SaliencyConfig, TrainConfig, UnlearnConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "BIASTRIAL_";

/// Shared pretraining for group models on the desk trial. Five epochs over
/// 100 subjects is too few optimiser steps to leave the chance plateau, and
/// the group fine-tunings then settle on their class priors.
pub const DESK_PRETRAIN_EPOCHS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Reweigh,
    Unlearn,
    GroupModels,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::Reweigh, Method::Unlearn, Method::GroupModels];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Reweigh => "reweigh",
            Method::Unlearn => "unlearn",
            Method::GroupModels => "group_models",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub scenarios: Vec<ScenarioKind>,
    pub model: CnnConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub unlearn: UnlearnConfig,
    pub pretrain_epochs: usize,
    pub saliency: SaliencyConfig,
    /// Subjects averaged into each group saliency map.
    pub saliency_subjects: usize,
    /// Report disparities relative to the matching No-Bias run.
    pub relative: bool,
    pub out_dir: PathBuf,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            dataset: DatasetConfig::default(),
            scenarios: ScenarioKind::ALL.to_vec(),
            model: CnnConfig::desk(),
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            unlearn: UnlearnConfig::default(),
            pretrain_epochs: DESK_PRETRAIN_EPOCHS,
            saliency: SaliencyConfig::default(),
            saliency_subjects: 10,
            relative: true,
            out_dir: PathBuf::from("trial-out"),
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.scenarios.is_empty() {
            return Err(Error::config("scenario list is empty"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("method list is empty"));
        }
        for (what, dup) in [
            ("seed", has_duplicates(&self.seeds)),
            ("scenario", has_duplicates(&self.scenarios)),
            ("method", has_duplicates(&self.methods)),
        ] {
            if dup {
                return Err(Error::config(format!("duplicate {what} in configuration")));
            }
        }
        if self.relative && !self.scenarios.contains(&ScenarioKind::NoBias) {
            return Err(Error::MissingBaseline("relative metrics need the no-bias scenario in the scenario list".into()));
        }
        if self.saliency_subjects == 0 {
            return Err(Error::config("saliency_subjects must be positive"));
        }
        if self.methods.contains(&Method::GroupModels) && self.pretrain_epochs == 0 {
            return Err(Error::config("group models need at least one pretraining epoch"));
        }
        self.model.validate()?;
        self.model.check_input(self.phantom.dims)?;
        self.train.validate()?;
        self.unlearn.validate()?;
        self.saliency.validate()?;
        Ok(())
    }

    /// Reads a JSON document (absent fields take defaults), applies
    /// environment overrides and validates.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(doc, env)
    }

    pub fn from_value(doc: Value, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        // round-trip through the typed form so every field has a concrete leaf
        let base: TrialConfig = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        let mut value = serde_json::to_value(&base).map_err(|e| Error::config(e.to_string()))?;
        apply_env(&mut value, env)?;
        let cfg: TrialConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every cell the trial will produce, in report order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &method in &self.methods {
                for &seed in &self.seeds {
                    out.push(Cell { scenario, method, seed });
                }
            }
        }
        out
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

/// One (scenario, method, seed) unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: ScenarioKind,
    pub method: Method,
    pub seed: u64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/seed {}", self.scenario.name(), self.method, self.seed)
    }
}

/// Leaf paths of a JSON tree in override form (`TRAIN_LEARNING_RATE`).
/// Arrays are single leaves.
pub fn override_paths(value: &Value) -> BTreeMap<String, Vec<String>> {
    fn walk(v: &Value, path: &mut Vec<String>, out: &mut BTreeMap<String, Vec<Vec<String>>>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    path.push(k.clone());
                    walk(child, path, out);
                    path.pop();
                }
            }
            _ => {
                let key = path.iter().map(|p| p.to_uppercase()).collect::<Vec<_>>().join("_");
                out.entry(key).or_default().push(path.clone());
            }
        }
    }
    let mut raw = BTreeMap::new();
    walk(value, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|(k, mut paths)| {
            // ambiguous keys keep every candidate so the caller can refuse them
            if paths.len() == 1 {
                (k, paths.pop().unwrap())
            } else {
                (k, Vec::new())
            }
        })
        .collect()
}

fn apply_env(value: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let paths = override_paths(value);
    for (name, raw) in env {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
        let path = paths
            .get(key)
            .ok_or_else(|| Error::config(format!("{name} does not name a configuration field")))?;
        if path.is_empty() {
            return Err(Error::config(format!("{name} is ambiguous")));
        }
        let slot = path.iter().try_fold(&mut *value, |v, k| v.get_mut(k)).expect("leaf exists");
        *slot = match slot {
            Value::String(_) => Value::String(raw),
            _ => serde_json::from_str(&raw).map_err(|e| Error::config(format!("{name}={raw}: {e}")))?,
        };
    }
    Ok(())
}

/// `a,b,c` seed lists from the command line.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|_| Error::config(format!("bad seed '{t}'"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_are_the_desk_trial() {
        let cfg = TrialConfig::from_value(Value::Object(Default::default()), env(&[])).unwrap();
        assert_eq!(cfg.cells().len(), 3 * 4 * 3);
        assert_eq!(cfg.model.filters, vec![8, 16, 32]);
        assert_eq!(cfg.dataset.n_disease + cfg.dataset.n_nondisease, 200);
        assert_eq!(cfg.phantom.dims, [32, 32, 32]);
        assert_eq!(cfg.model.bn_momentum, 0.0);
        assert_eq!((cfg.train.learning_rate, cfg.train.max_epochs), (1e-3, 100));
        let partial = TrialConfig::from_value(serde_json::json!({ "train": { "patience": 3 } }), env(&[])).unwrap();
        assert_eq!(partial.train.learning_rate, 1e-3);
        assert_eq!(cfg.pretrain_epochs, DESK_PRETRAIN_EPOCHS);
    }

    #[test]
    fn environment_overrides_scalars_and_lists() {
        let cfg = TrialConfig::from_value(
            serde_json::json!({ "train": { "patience": 3 } }),
            env(&[
                ("BIASTRIAL_TRAIN_LEARNING_RATE", "0.002"),
                ("BIASTRIAL_SEEDS", "[7, 8]"),
                ("BIASTRIAL_OUT_DIR", "/tmp/x"),
                ("PATH", "/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.002);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_overrides_are_configuration_errors() {
        for (k, v) in [("BIASTRIAL_NOPE", "1"), ("BIASTRIAL_TRAIN_PATIENCE", "many"), ("BIASTRIAL_SEEDS", "[]")] {
            let err = TrialConfig::from_value(Value::Object(Default::default()), env(&[(k, v)])).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{k}={v}: {err}");
        }
    }

    #[test]
    fn relative_metrics_need_the_baseline_scenario() {
        let err = TrialConfig::from_value(serde_json::json!({ "scenarios": ["near-bias"] }), env(&[])).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let ok = TrialConfig::from_value(serde_json::json!({ "scenarios": ["near-bias"], "relative": false }), env(&[]));
        assert!(ok.is_ok());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(TrialConfig::from_value(serde_json::json!({ "sedes": [1] }), env(&[])).is_err());
        assert!(TrialConfig::from_value(serde_json::json!({ "methods": ["magic"] }), env(&[])).is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
    }
}
