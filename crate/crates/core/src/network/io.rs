//! Model persistence.
//!
//! One JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "layer_configs": [ ... ],
//!   "params_by_group": { "<group>": { "<layer>": [...] } },
//!   "metadata": { ... }
//! }
//! ```
//!
//! Weight matrices are nested row arrays; every float is written with 17
//! significant digits, which is lossless for `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::config::{validate_stack, LayerConfig, ParamGroup};
use super::model::{Layer, Model, ModelMetadata, PoolParams};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::pooling::{GaussPoolParams, LhucParams, LpPoolParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// `f64` rendered with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw_vec(values: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format_f64(*v));
    }
    s.push(']');
    s
}

fn raw_matrix(m: &Matrix) -> String {
    let mut s = String::from("[");
    for (i, row) in m.row_iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{}", raw_vec(row));
    }
    s.push(']');
    s
}

#[derive(Serialize)]
struct ModelFileOut<'a> {
    format_version: u32,
    layer_configs: Vec<LayerConfig>,
    params_by_group: BTreeMap<&'static str, BTreeMap<String, Box<RawValue>>>,
    metadata: &'a ModelMetadata,
}

#[derive(Deserialize)]
struct ModelFileIn {
    format_version: u32,
    layer_configs: Vec<LayerConfig>,
    params_by_group: BTreeMap<String, BTreeMap<String, serde_json::Value>>,
    metadata: ModelMetadata,
}

pub fn model_to_json(model: &Model) -> Result<String> {
    for id in model.group_ids() {
        if model.group(id).is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("parameter group {id}")));
        }
    }
    let mut params: BTreeMap<&'static str, BTreeMap<String, Box<RawValue>>> = BTreeMap::new();
    for (i, layer) in model.layers().iter().enumerate() {
        for group in layer.groups() {
            let text = match group {
                ParamGroup::Weights => raw_matrix(&layer.weights),
                _ => raw_vec(layer.group(group).expect("listed group exists")),
            };
            let raw = RawValue::from_string(text).map_err(|e| Error::parse(group.name(), e))?;
            params.entry(group.name()).or_default().insert(i.to_string(), raw);
        }
    }
    let doc = ModelFileOut {
        format_version: MODEL_FORMAT_VERSION,
        layer_configs: model.configs(),
        params_by_group: params,
        metadata: &model.metadata,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("model", e))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let doc: ModelFileIn = serde_json::from_str(text).map_err(|e| Error::parse("model file", e))?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::parse(
            "format_version",
            format!("unsupported version {} (expected {MODEL_FORMAT_VERSION})", doc.format_version),
        ));
    }
    validate_stack(&doc.layer_configs).map_err(|e| Error::parse("layer_configs", e))?;
    let known: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
    if let Some(unknown) = doc.params_by_group.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::parse(format!("params_by_group.{unknown}"), "unknown parameter group"));
    }

    let take = |group: ParamGroup, layer: usize, len: usize| -> Result<Vec<f64>> {
        let field = format!("params_by_group.{}.{layer}", group.name());
        let value = doc
            .params_by_group
            .get(group.name())
            .and_then(|m| m.get(&layer.to_string()))
            .ok_or_else(|| Error::parse(&field, "missing"))?;
        let flat: Vec<f64> = match group {
            ParamGroup::Weights => {
                let rows: Vec<Vec<f64>> =
                    serde_json::from_value(value.clone()).map_err(|e| Error::parse(&field, e))?;
                rows.into_iter().flatten().collect()
            }
            _ => serde_json::from_value(value.clone()).map_err(|e| Error::parse(&field, e))?,
        };
        if flat.len() != len {
            return Err(Error::parse(&field, format!("expected {len} values, found {}", flat.len())));
        }
        Ok(flat)
    };

    let last = doc.layer_configs.len() - 1;
    let mut layers = Vec::with_capacity(doc.layer_configs.len());
    for (i, cfg) in doc.layer_configs.iter().enumerate() {
        let (fan_in, width, pools) = (cfg.in_dim(), cfg.affine_width(), cfg.out_dim());
        let weights = Matrix::from_vec(fan_in, width, take(ParamGroup::Weights, i, fan_in * width)?)?;
        // Row-count check: a matrix with the right total but wrong row split.
        if let Some(serde_json::Value::Array(rows)) = doc.params_by_group["weights"].get(&i.to_string()) {
            if rows.len() != fan_in {
                return Err(Error::parse(
                    format!("params_by_group.weights.{i}"),
                    format!("expected {fan_in} rows, found {}", rows.len()),
                ));
            }
        }
        let biases = take(ParamGroup::Biases, i, width)?;
        let pool = match cfg {
            LayerConfig::Affine { .. } => PoolParams::None,
            LayerConfig::LpPool { .. } => PoolParams::Lp(LpPoolParams {
                rho: take(ParamGroup::Rho, i, pools)?,
            }),
            LayerConfig::GaussPool { .. } => PoolParams::Gauss(GaussPoolParams {
                mu: take(ParamGroup::Mu, i, pools)?,
                beta: take(ParamGroup::Beta, i, pools)?,
                eta: take(ParamGroup::Eta, i, pools)?,
            }),
        };
        let lhuc = if i != last {
            Some(LhucParams {
                r: take(ParamGroup::Lhuc, i, pools)?,
            })
        } else {
            None
        };
        layers.push(Layer {
            config: cfg.clone(),
            weights,
            biases,
            pool,
            lhuc,
        });
    }
    Model::from_parts(layers, doc.metadata)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}
