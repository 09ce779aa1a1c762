//! JSON run configuration, `--set` overrides and schema errors with key
//! paths.

use std::fs;
use std::path::{Path, PathBuf};

use flowcast::data::{NormalizationMode, SynthConfig};
use flowcast::flow::FlowConfig;
use flowcast::ssm::{AdjacencyMode, Hyper, TransitionKind};
use flowcast::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Series CSV.
    pub path: PathBuf,
    /// Edge list CSV; required for graph cells with fixed or mixed adjacency.
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    #[serde(default = "default_horizon")]
    pub p: usize,
    #[serde(default = "default_horizon")]
    pub q: usize,
    #[serde(default)]
    pub normalization: NormalizationMode,
    /// Adds the (sin, cos) time-of-day pair as covariates.
    #[serde(default)]
    pub time_of_day: bool,
    /// Period in rows when the file has no timestamps.
    #[serde(default)]
    pub steps_per_day: Option<usize>,
}

fn default_splits() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

fn default_horizon() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: TransitionKind,
    pub d_x: usize,
    pub layers: usize,
    /// Node-embedding width for adaptive or mixed adjacency.
    pub d_e: usize,
    pub adjacency: AdjacencyMode,
    pub rho: f64,
    pub sigma: f64,
    /// Seed for parameter initialization; the training seed when unset.
    pub init_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: TransitionKind::Gru,
            d_x: 8,
            layers: 1,
            d_e: 0,
            adjacency: AdjacencyMode::Fixed,
            rho: 1.0,
            sigma: 0.1,
            init_seed: None,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self, n_series: usize, d_z: usize) -> Hyper {
        match self.kind {
            TransitionKind::Gru => Hyper::gru(n_series, self.d_x, self.layers, d_z),
            TransitionKind::GraphGru => {
                Hyper::graph_gru(n_series, self.d_x, self.layers, d_z, self.d_e, self.adjacency)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub particles: Vec<usize>,
    /// Seeds `0..n_seeds`, each giving one random SSM and trajectory.
    pub n_seeds: u64,
    pub steps: usize,
    pub process_std: f64,
    pub obs_std: f64,
    pub ess_threshold: f64,
    pub flow: FlowConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![4, 16, 64],
            particles: vec![100, 1000],
            n_seeds: 20,
            steps: 20,
            process_std: 0.5,
            obs_std: 0.2,
            ess_threshold: 0.5,
            flow: FlowConfig::default(),
        }
    }
}

/// Sets `key.path` in a JSON tree, creating objects on the way. The value
/// is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    if key.is_empty() {
        return Err(CliError::Usage("--set key is empty".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Usage(format!(
                "--set {key}: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Deserializes with the failing key path in the error.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // serde reports a missing field at its parent; name the full key
        let msg = match inner.strip_prefix("missing field `").and_then(|s| s.split_once('`')) {
            Some((field, _)) if path == "." => format!("missing required key `{field}`"),
            Some((field, _)) => format!("missing required key `{path}.{field}`"),
            None if path == "." => inner,
            None => format!("invalid value at `{path}`: {inner}"),
        };
        CliError::Usage(format!("config: {msg}"))
    })
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Loads an optional JSON file, applies overrides and deserializes.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut value = match path {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    from_value(value)
}

/// Resolves relative data paths against the directory of the config file.
pub fn resolve_paths(config: &mut RunConfig, base: Option<&Path>) {
    let Some(dir) = base.and_then(Path::parent) else {
        return;
    };
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    };
    fix(&mut config.data.path);
    if let Some(g) = config.data.graph.as_mut() {
        fix(g);
    }
}

pub fn synth_config(path: Option<&Path>, overrides: &[String]) -> Result<SynthConfig, CliError> {
    load(path, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn missing_data_path_is_named() {
        let err = from_value::<RunConfig>(json!({"data": {"p": 3}})).unwrap_err();
        assert!(err.to_string().contains("`data.path`"), "{err}");
        let err = from_value::<RunConfig>(json!({})).unwrap_err();
        assert!(err.to_string().contains("`data`"), "{err}");
    }

    #[test]
    fn wrong_types_report_the_path() {
        let err = from_value::<RunConfig>(json!({"data": {"path": "x.csv"}, "train": {"lr0": "fast"}})).unwrap_err();
        assert!(err.to_string().contains("train.lr0"), "{err}");
        let err = from_value::<RunConfig>(json!({"data": {"path": "x.csv", "pp": 1}})).unwrap_err();
        assert!(err.to_string().contains("pp"), "{err}");
    }

    #[test]
    fn overrides_create_and_replace() {
        let mut v = json!({"data": {"path": "a.csv"}});
        apply_override(&mut v, "data.path=b.csv").unwrap();
        apply_override(&mut v, "train.lr0=0.5").unwrap();
        apply_override(&mut v, "train.lr_milestones=[1,2]").unwrap();
        let cfg: RunConfig = from_value(v).unwrap();
        assert_eq!(cfg.data.path, PathBuf::from("b.csv"));
        assert_eq!(cfg.train.lr0, 0.5);
        assert_eq!(cfg.train.lr_milestones, vec![1, 2]);
        assert_eq!(cfg.data.p, 12);
        let mut v = json!({"data": 3});
        assert!(apply_override(&mut v, "data.path=x").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }
}
