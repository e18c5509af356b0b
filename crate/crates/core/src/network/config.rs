use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ActivationKind;
use crate::pooling::PoolSpec;

/// One layer of the stack. Every variant starts with an affine map from
/// `in_dim` inputs; pooling variants then reduce `units` linear outputs into
/// `units / pool_size` pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Affine {
        in_dim: usize,
        out_dim: usize,
        activation: ActivationKind,
    },
    LpPool {
        in_dim: usize,
        units: usize,
        pool_size: usize,
        #[serde(default)]
        normalize: bool,
    },
    GaussPool {
        in_dim: usize,
        units: usize,
        pool_size: usize,
    },
}

impl LayerConfig {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerConfig::Affine { in_dim, .. }
            | LayerConfig::LpPool { in_dim, .. }
            | LayerConfig::GaussPool { in_dim, .. } => in_dim,
        }
    }

    /// Width of the affine part.
    pub fn affine_width(&self) -> usize {
        match *self {
            LayerConfig::Affine { out_dim, .. } => out_dim,
            LayerConfig::LpPool { units, .. } | LayerConfig::GaussPool { units, .. } => units,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.pool_spec() {
            Some(spec) => spec.num_pools,
            None => self.affine_width(),
        }
    }

    pub fn pool_spec(&self) -> Option<PoolSpec> {
        match *self {
            LayerConfig::Affine { .. } => None,
            LayerConfig::LpPool {
                units,
                pool_size,
                normalize,
                ..
            } => Some(PoolSpec::new(pool_size, units / pool_size.max(1)).normalized(normalize)),
            LayerConfig::GaussPool { units, pool_size, .. } => Some(PoolSpec::new(pool_size, units / pool_size.max(1))),
        }
    }

    pub fn pool_kind(&self) -> Option<PoolKind> {
        match self {
            LayerConfig::Affine { .. } => None,
            LayerConfig::LpPool { .. } => Some(PoolKind::Lp),
            LayerConfig::GaussPool { .. } => Some(PoolKind::Gauss),
        }
    }

    pub fn is_output(&self) -> bool {
        matches!(
            self,
            LayerConfig::Affine {
                activation: ActivationKind::Softmax,
                ..
            }
        )
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.in_dim() == 0 || self.affine_width() == 0 {
            return Err(Error::Config(format!("layer {index}: dimensions must be positive")));
        }
        match *self {
            LayerConfig::LpPool { units, pool_size, .. } | LayerConfig::GaussPool { units, pool_size, .. } => {
                if pool_size == 0 || units % pool_size != 0 {
                    return Err(Error::Config(format!(
                        "layer {index}: pool size {pool_size} does not divide layer width {units}"
                    )));
                }
            }
            LayerConfig::Affine { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Lp,
    Gauss,
}

/// Checks that the stack chains and ends in exactly one softmax layer.
pub fn validate_stack(configs: &[LayerConfig]) -> Result<()> {
    let Some(last) = configs.last() else {
        return Err(Error::Config("model needs at least one layer".into()));
    };
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate(i)?;
        if i + 1 < configs.len() && cfg.is_output() {
            return Err(Error::Config(format!("layer {i}: softmax is only allowed on the final layer")));
        }
    }
    if !last.is_output() {
        return Err(Error::Config("final layer must be affine + softmax".into()));
    }
    for (i, pair) in configs.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::Config(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].out_dim(),
                i + 1,
                pair[1].in_dim()
            )));
        }
    }
    Ok(())
}

/// A named parameter group: the unit of freezing and adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Weights,
    Biases,
    Rho,
    Mu,
    Beta,
    Eta,
    Lhuc,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Weights,
        ParamGroup::Biases,
        ParamGroup::Rho,
        ParamGroup::Mu,
        ParamGroup::Beta,
        ParamGroup::Eta,
        ParamGroup::Lhuc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Weights => "weights",
            ParamGroup::Biases => "biases",
            ParamGroup::Rho => "rho",
            ParamGroup::Mu => "mu",
            ParamGroup::Beta => "beta",
            ParamGroup::Eta => "eta",
            ParamGroup::Lhuc => "lhuc",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s || (s == "bias" && *g == ParamGroup::Biases) || (s == "p" && *g == ParamGroup::Rho))
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{s}'")))
    }
}

/// A parameter group within a specific layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub layer: usize,
    pub group: ParamGroup,
}

impl GroupId {
    pub fn new(layer: usize, group: ParamGroup) -> Self {
        Self { layer, group }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.group)
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, group) = s
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("group id '{s}' is not of the form <layer>.<group>")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Config(format!("bad layer index in group id '{s}'")))?;
        Ok(GroupId::new(layer, group.parse()?))
    }
}

/// Initial values for pooling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub rho: f64,
    pub mu_mean: f64,
    pub mu_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub eta: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            rho: 2.0,
            mu_mean: 0.0,
            mu_std: 1.0,
            beta_mean: 1.0,
            // N(1, 0.5) read as (mean, variance).
            beta_std: 0.5f64.sqrt(),
            eta: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(in_dim: usize, out_dim: usize) -> LayerConfig {
        LayerConfig::Affine {
            in_dim,
            out_dim,
            activation: ActivationKind::Softmax,
        }
    }

    #[test]
    fn pool_width_must_divide() {
        let stack = [
            LayerConfig::LpPool {
                in_dim: 4,
                units: 10,
                pool_size: 3,
                normalize: false,
            },
            out(3, 2),
        ];
        assert!(matches!(validate_stack(&stack), Err(Error::Config(_))));
    }

    #[test]
    fn chain_and_output_rules() {
        let good = [
            LayerConfig::LpPool {
                in_dim: 4,
                units: 10,
                pool_size: 5,
                normalize: false,
            },
            out(2, 3),
        ];
        validate_stack(&good).unwrap();
        assert_eq!(good[0].pool_spec().unwrap().num_pools, 2);

        assert!(validate_stack(&[out(4, 3), out(3, 2)]).is_err());
        let no_softmax = [LayerConfig::Affine {
            in_dim: 2,
            out_dim: 2,
            activation: ActivationKind::Sigmoid,
        }];
        assert!(validate_stack(&no_softmax).is_err());
        let broken_chain = [
            LayerConfig::GaussPool {
                in_dim: 4,
                units: 9,
                pool_size: 3,
            },
            out(4, 2),
        ];
        assert!(validate_stack(&broken_chain).is_err());
    }

    #[test]
    fn group_names_parse() {
        assert_eq!("rho".parse::<ParamGroup>().unwrap(), ParamGroup::Rho);
        assert_eq!("bias".parse::<ParamGroup>().unwrap(), ParamGroup::Biases);
        assert!("gamma".parse::<ParamGroup>().is_err());
        let id: GroupId = "2.lhuc".parse().unwrap();
        assert_eq!(id, GroupId::new(2, ParamGroup::Lhuc));
        assert_eq!(id.to_string(), "2.lhuc");
    }

    #[test]
    fn layer_config_json_shape() {
        let cfg = LayerConfig::GaussPool {
            in_dim: 3,
            units: 6,
            pool_size: 3,
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(s, r#"{"kind":"gauss_pool","in_dim":3,"units":6,"pool_size":3}"#);
    }
}
