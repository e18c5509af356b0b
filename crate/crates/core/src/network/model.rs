use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::config::{validate_stack, GroupId, InitSpec, LayerConfig, ParamGroup, PoolKind};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};
use crate::pooling::{GaussPoolParams, LhucParams, LpPoolParams};

#[derive(Clone, Debug, PartialEq)]
pub enum PoolParams {
    None,
    Lp(LpPoolParams),
    Gauss(GaussPoolParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub config: LayerConfig,
    /// `in_dim × affine_width`; column `j` feeds unit `j`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub pool: PoolParams,
    /// Present on every hidden layer; identity until adapted.
    pub lhuc: Option<LhucParams>,
}

impl Layer {
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Weights, ParamGroup::Biases];
        match self.pool {
            PoolParams::None => {}
            PoolParams::Lp(_) => out.push(ParamGroup::Rho),
            PoolParams::Gauss(_) => out.extend([ParamGroup::Mu, ParamGroup::Beta, ParamGroup::Eta]),
        }
        if self.lhuc.is_some() {
            out.push(ParamGroup::Lhuc);
        }
        out
    }

    pub fn group(&self, group: ParamGroup) -> Option<&[f64]> {
        match (group, &self.pool) {
            (ParamGroup::Weights, _) => Some(self.weights.as_slice()),
            (ParamGroup::Biases, _) => Some(&self.biases),
            (ParamGroup::Rho, PoolParams::Lp(p)) => Some(&p.rho),
            (ParamGroup::Mu, PoolParams::Gauss(p)) => Some(&p.mu),
            (ParamGroup::Beta, PoolParams::Gauss(p)) => Some(&p.beta),
            (ParamGroup::Eta, PoolParams::Gauss(p)) => Some(&p.eta),
            (ParamGroup::Lhuc, _) => self.lhuc.as_ref().map(|l| l.r.as_slice()),
            _ => None,
        }
    }

    fn group_mut(&mut self, group: ParamGroup) -> Option<&mut [f64]> {
        match (group, &mut self.pool) {
            (ParamGroup::Weights, _) => Some(self.weights.as_mut_slice()),
            (ParamGroup::Biases, _) => Some(&mut self.biases),
            (ParamGroup::Rho, PoolParams::Lp(p)) => Some(&mut p.rho),
            (ParamGroup::Mu, PoolParams::Gauss(p)) => Some(&mut p.mu),
            (ParamGroup::Beta, PoolParams::Gauss(p)) => Some(&mut p.beta),
            (ParamGroup::Eta, PoolParams::Gauss(p)) => Some(&mut p.eta),
            (ParamGroup::Lhuc, _) => self.lhuc.as_mut().map(|l| l.r.as_mut_slice()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub init: InitSpec,
    /// Groups excluded from gradient updates, as `<layer>.<group>`.
    #[serde(default)]
    pub frozen: BTreeSet<GroupId>,
    /// Free-form log of training and adaptation stages.
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    layers: Vec<Layer>,
    pub metadata: ModelMetadata,
    /// Bumped on every parameter mutation; traces record it.
    version: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.metadata == other.metadata
    }
}

/// Glorot-style uniform bound `sqrt(6 / (fan_in + fan_out))`.
fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn build_model(configs: &[LayerConfig], rng: &mut Rng, init: &InitSpec) -> Result<Model> {
    validate_stack(configs)?;
    let mut layers = Vec::with_capacity(configs.len());
    let last = configs.len() - 1;
    for (i, cfg) in configs.iter().enumerate() {
        let (fan_in, width) = (cfg.in_dim(), cfg.affine_width());
        let bound = init_bound(fan_in, width);
        let weights = Matrix::from_fn(fan_in, width, |_, _| rng.uniform(-bound, bound));
        let pools = cfg.out_dim();
        let pool = match cfg.pool_kind() {
            None => PoolParams::None,
            Some(PoolKind::Lp) => PoolParams::Lp(LpPoolParams::constant(pools, init.rho)),
            Some(PoolKind::Gauss) => {
                let mu = (0..pools).map(|_| rng.normal(init.mu_mean, init.mu_std)).collect();
                let beta = (0..pools).map(|_| rng.normal(init.beta_mean, init.beta_std)).collect();
                PoolParams::Gauss(GaussPoolParams {
                    mu,
                    beta,
                    eta: vec![init.eta; pools],
                })
            }
        };
        layers.push(Layer {
            config: cfg.clone(),
            weights,
            biases: vec![0.0; width],
            pool,
            lhuc: (i != last).then(|| LhucParams::identity(pools)),
        });
    }
    Ok(Model {
        layers,
        metadata: ModelMetadata {
            seed: rng.seed(),
            init: init.clone(),
            ..Default::default()
        },
        version: 0,
    })
}

impl Model {
    pub(crate) fn from_parts(layers: Vec<Layer>, metadata: ModelMetadata) -> Result<Self> {
        let configs: Vec<LayerConfig> = layers.iter().map(|l| l.config.clone()).collect();
        validate_stack(&configs)?;
        Ok(Self {
            layers,
            metadata,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn configs(&self) -> Vec<LayerConfig> {
        self.layers.iter().map(|l| l.config.clone()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].config.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("validated non-empty").config.out_dim()
    }

    /// Pool type shared by the hidden layers, if any pool layer exists.
    pub fn pool_kind(&self) -> Option<PoolKind> {
        self.layers.iter().find_map(|l| l.config.pool_kind())
    }

    /// Indices of hidden (non-output) layers, bottom first.
    pub fn hidden_layers(&self) -> Vec<usize> {
        (0..self.layers.len() - 1).collect()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Every parameter group in canonical order (layer, then group).
    pub fn group_ids(&self) -> Vec<GroupId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.groups().into_iter().map(move |g| GroupId::new(i, g)))
            .collect()
    }

    pub fn group(&self, id: GroupId) -> Option<&[f64]> {
        self.layers.get(id.layer)?.group(id.group)
    }

    pub fn group_mut(&mut self, id: GroupId) -> Result<&mut [f64]> {
        self.version += 1;
        self.layers
            .get_mut(id.layer)
            .and_then(|l| l.group_mut(id.group))
            .ok_or_else(|| Error::Config(format!("model has no parameter group {id}")))
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Matrix {
        self.version += 1;
        &mut self.layers[layer].weights
    }

    pub fn num_params(&self) -> usize {
        self.group_ids().iter().map(|&id| self.group(id).map_or(0, <[f64]>::len)).sum()
    }

    pub fn is_frozen(&self, id: GroupId) -> bool {
        self.metadata.frozen.contains(&id)
    }

    pub fn freeze(&mut self, id: GroupId) {
        self.metadata.frozen.insert(id);
    }

    pub fn unfreeze_all(&mut self) {
        self.metadata.frozen.clear();
    }

    /// Freezes every group except those in `trainable`.
    pub fn freeze_all_except(&mut self, trainable: &BTreeSet<GroupId>) {
        self.metadata.frozen = self
            .group_ids()
            .into_iter()
            .filter(|id| !trainable.contains(id))
            .collect();
    }

    /// All parameters flattened in canonical group order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.group_ids()
            .into_iter()
            .flat_map(|id| self.group(id).unwrap_or(&[]).to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("set_flat_params", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for id in self.group_ids() {
            let dst = self.group_mut(id)?;
            let n = dst.len();
            dst.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ActivationKind;

    fn lp_stack() -> Vec<LayerConfig> {
        vec![
            LayerConfig::LpPool {
                in_dim: 3,
                units: 10,
                pool_size: 5,
                normalize: false,
            },
            LayerConfig::Affine {
                in_dim: 2,
                out_dim: 4,
                activation: ActivationKind::Softmax,
            },
        ]
    }

    fn gauss_stack() -> Vec<LayerConfig> {
        vec![
            LayerConfig::GaussPool {
                in_dim: 3,
                units: 12,
                pool_size: 3,
            },
            LayerConfig::Affine {
                in_dim: 4,
                out_dim: 2,
                activation: ActivationKind::Softmax,
            },
        ]
    }

    #[test]
    fn lp_model_initialisation() {
        let m = build_model(&lp_stack(), &mut Rng::new(1), &InitSpec::default()).unwrap();
        let rho = m.group(GroupId::new(0, ParamGroup::Rho)).unwrap();
        assert_eq!(rho, &[2.0, 2.0]);
        assert_eq!(m.group(GroupId::new(0, ParamGroup::Lhuc)).unwrap(), &[0.0, 0.0]);
        assert!(m.group(GroupId::new(1, ParamGroup::Lhuc)).is_none());
        assert!(m.layers()[0].biases.iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 13.0).sqrt();
        assert!(m.layers()[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn gauss_init_is_seeded() {
        let a = build_model(&gauss_stack(), &mut Rng::new(17), &InitSpec::default()).unwrap();
        let b = build_model(&gauss_stack(), &mut Rng::new(17), &InitSpec::default()).unwrap();
        let c = build_model(&gauss_stack(), &mut Rng::new(18), &InitSpec::default()).unwrap();
        let mu = GroupId::new(0, ParamGroup::Mu);
        assert_eq!(a.group(mu), b.group(mu));
        assert_ne!(a.group(mu), c.group(mu));
        assert_eq!(a.group(GroupId::new(0, ParamGroup::Eta)).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn bad_pool_width_is_config_error() {
        let mut stack = lp_stack();
        stack[0] = LayerConfig::LpPool {
            in_dim: 3,
            units: 10,
            pool_size: 4,
            normalize: false,
        };
        assert!(matches!(
            build_model(&stack, &mut Rng::new(1), &InitSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn groups_cover_every_parameter_once() {
        let m = build_model(&gauss_stack(), &mut Rng::new(2), &InitSpec::default()).unwrap();
        let ids = m.group_ids();
        let unique: BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
        // 3*12 + 12 weights/biases, 4*3 mu/beta/eta, 4 lhuc, 4*2 + 2 output
        assert_eq!(m.num_params(), 36 + 12 + 12 + 4 + 8 + 2);
        let mut m2 = m.clone();
        let flat = m.flat_params();
        m2.set_flat_params(&flat).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn missing_group_is_an_error() {
        let mut m = build_model(&lp_stack(), &mut Rng::new(1), &InitSpec::default()).unwrap();
        assert!(m.group_mut(GroupId::new(0, ParamGroup::Mu)).is_err());
    }
}
