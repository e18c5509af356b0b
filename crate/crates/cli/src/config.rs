//! Layered run configuration: defaults, then an optional JSON file, then
//! named flags, then `--set path=value` overrides.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use diffpool::adaptation::{seconds_to_samples, AdaptConfig, Budget};
use diffpool::datagen::{ClosedRegionParams, MultiSpeakerParams};
use diffpool::network::{InitSpec, LayerConfig};
use diffpool::training::TrainConfig;
use diffpool::ActivationKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ClosedRegion,
    Multispeaker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnn,
    Lp,
    Gauss,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Dnn => "dnn",
            ModelKind::Lp => "lp",
            ModelKind::Gauss => "gauss",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: Task,
    pub seed: u64,
    pub closed_region: ClosedRegionParams,
    pub multispeaker: MultiSpeakerParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Multispeaker,
            seed: 42,
            closed_region: ClosedRegionParams::default(),
            multispeaker: MultiSpeakerParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_layers: usize,
    /// Affine units per hidden layer; pool layers emit `units / pool_size`.
    pub units: usize,
    pub pool_size: usize,
    pub normalize: bool,
    /// Hidden activation of the plain DNN.
    pub activation: ActivationKind,
    pub init: InitSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lp,
            hidden_layers: 2,
            units: 50,
            pool_size: 5,
            normalize: false,
            activation: ActivationKind::Sigmoid,
            init: InitSpec::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn layer_configs(&self, input_dim: usize, classes: usize) -> Vec<LayerConfig> {
        let mut out = Vec::with_capacity(self.hidden_layers + 1);
        let mut d = input_dim;
        for _ in 0..self.hidden_layers {
            let layer = match self.kind {
                ModelKind::Dnn => LayerConfig::Affine {
                    in_dim: d,
                    out_dim: self.units,
                    activation: self.activation,
                },
                ModelKind::Lp => LayerConfig::LpPool {
                    in_dim: d,
                    units: self.units,
                    pool_size: self.pool_size,
                    normalize: self.normalize,
                },
                ModelKind::Gauss => LayerConfig::GaussPool {
                    in_dim: d,
                    units: self.units,
                    pool_size: self.pool_size,
                },
            };
            d = layer.out_dim();
            out.push(layer);
        }
        out.push(LayerConfig::Affine {
            in_dim: d,
            out_dim: classes,
            activation: ActivationKind::Softmax,
        });
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    /// Adaptation budgets in samples; `null` means the whole adapt split.
    pub sweep: Vec<Budget>,
}

impl RunConfig {
    pub fn sweep_or_default(&self) -> Vec<Budget> {
        if self.sweep.is_empty() {
            vec![None]
        } else {
            self.sweep.clone()
        }
    }
}

/// Resolves defaults ← `file` ← `overrides` (in order) into a config.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value =
            serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?;
        merge(&mut value, &patch, "")?;
    }
    for (path, v) in overrides {
        set_path(&mut value, path, v.clone())?;
    }
    serde_json::from_value(value).context("config does not match the expected schema")
}

fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!(ConfigError(format!("unknown config field '{path}'"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Sets a dotted path that must already exist in the resolved config.
pub fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    for key in path.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| ConfigError(format!("unknown config field '{path}'")))?,
            _ => bail!(ConfigError(format!("'{path}' does not name a config field"))),
        };
    }
    *cur = v;
    Ok(())
}

/// Parses `path=value`; the value is read as JSON when possible, otherwise
/// as a bare string.
pub fn parse_override(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected path=value, got '{s}'"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Parses `500`, `3s` (seconds at 100 frames/s) or `all`.
pub fn parse_budget(s: &str) -> std::result::Result<Budget, String> {
    let s = s.trim();
    if s == "all" {
        return Ok(None);
    }
    if let Some(secs) = s.strip_suffix('s') {
        let v: f64 = secs.parse().map_err(|_| format!("bad budget '{s}'"))?;
        return Ok(Some(seconds_to_samples(v)));
    }
    s.parse().map(Some).map_err(|_| format!("bad budget '{s}'"))
}

/// Marks errors that should exit with the usage/config code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Short content hash used to name output directories.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..6])
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
