use super::config::{GroupId, LayerConfig, ParamGroup};
use super::model::{Model, PoolParams};
use crate::error::{Error, Result};
use crate::numeric::{
    activation_backward, activation_forward, affine_backward, affine_forward, cross_entropy, ActivationKind,
    Matrix,
};
use crate::pooling::{
    gauss_backward, gauss_forward, lhuc_apply, lhuc_backward, lp_backward, lp_forward, GaussWorkspace, LpWorkspace,
    LP_EPS,
};

#[derive(Clone, Debug)]
pub enum PoolWorkspace {
    Lp(LpWorkspace),
    Gauss(GaussWorkspace),
}

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Matrix,
    pre: Matrix,
    /// Activation or pool output, before LHUC scaling.
    unscaled: Matrix,
    pool: Option<PoolWorkspace>,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    version: u64,
    layers: Vec<LayerTrace>,
    probs: Matrix,
}

impl ForwardTrace {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn pool_workspace(&self, layer: usize) -> Option<&PoolWorkspace> {
        self.layers.get(layer)?.pool.as_ref()
    }
}

/// Gradients keyed by parameter group, in the model's canonical order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    entries: Vec<(GroupId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: GroupId) -> Option<&[f64]> {
        self.entries.iter().find(|(g, _)| *g == id).map(|(_, v)| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &[f64])> {
        self.entries.iter().map(|(g, v)| (*g, v.as_slice()))
    }

    pub fn entries_mut(&mut self) -> &mut [(GroupId, Vec<f64>)] {
        &mut self.entries
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.entries.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// First group holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<GroupId> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(g, _)| *g)
    }
}

impl Model {
    /// Class posteriors for a batch of row vectors, plus the cache backward needs.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("forward", format!("{} input features", self.input_dim()), x.cols()));
        }
        let mut traces = Vec::with_capacity(self.layers().len());
        let mut h = x.clone();
        for layer in self.layers() {
            let pre = affine_forward(&h, &layer.weights, &layer.biases)?;
            let (unscaled, pool) = match (&layer.config, &layer.pool) {
                (LayerConfig::Affine { activation, .. }, _) => (activation_forward(&pre, *activation), None),
                (LayerConfig::LpPool { .. }, PoolParams::Lp(params)) => {
                    let spec = layer.config.pool_spec().expect("pool layer");
                    let (out, ws) = lp_forward(&pre, spec, params, LP_EPS)?;
                    (out, Some(PoolWorkspace::Lp(ws)))
                }
                (LayerConfig::GaussPool { .. }, PoolParams::Gauss(params)) => {
                    let spec = layer.config.pool_spec().expect("pool layer");
                    let (out, ws) = gauss_forward(&pre, spec, params)?;
                    (out, Some(PoolWorkspace::Gauss(ws)))
                }
                _ => return Err(Error::Contract("layer config and pool parameters disagree".into())),
            };
            let out = match &layer.lhuc {
                Some(l) => lhuc_apply(&unscaled, l)?,
                None => unscaled.clone(),
            };
            traces.push(LayerTrace {
                input: h,
                pre,
                unscaled,
                pool,
            });
            h = out;
        }
        let trace = ForwardTrace {
            version: self.version(),
            layers: traces,
            probs: h.clone(),
        };
        Ok((h, trace))
    }

    /// Class posteriors only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of mean cross-entropy against `targets`. Frozen groups
    /// receive zeros.
    pub fn backward(&self, trace: &ForwardTrace, targets: &[usize]) -> Result<Gradients> {
        if trace.version != self.version() || trace.layers.len() != self.layers().len() {
            return Err(Error::Contract(format!(
                "forward trace was taken at model version {} but the model is at version {}",
                trace.version,
                self.version()
            )));
        }
        let (loss, grad_logits) = cross_entropy(&trace.probs, targets)?;
        let mut entries: Vec<(GroupId, Vec<f64>)> = Vec::new();
        let mut upstream = grad_logits;

        for (i, (layer, lt)) in self.layers().iter().zip(&trace.layers).enumerate().rev() {
            let mut layer_grads: Vec<(ParamGroup, Vec<f64>)> = Vec::new();
            let grad_unscaled = match &layer.lhuc {
                Some(l) => {
                    let (g, gr) = lhuc_backward(&lt.unscaled, l, &upstream)?;
                    layer_grads.push((ParamGroup::Lhuc, gr));
                    g
                }
                None => upstream,
            };
            let grad_pre = match (&layer.config, &lt.pool) {
                // Softmax is fused with the loss: `upstream` already holds ∂L/∂logits.
                (
                    LayerConfig::Affine {
                        activation: ActivationKind::Softmax,
                        ..
                    },
                    _,
                ) => grad_unscaled,
                (LayerConfig::Affine { activation, .. }, _) => {
                    activation_backward(&lt.pre, &lt.unscaled, &grad_unscaled, *activation)
                }
                (_, Some(PoolWorkspace::Lp(ws))) => {
                    let g = lp_backward(ws, &grad_unscaled)?;
                    layer_grads.push((ParamGroup::Rho, g.rho));
                    g.input
                }
                (_, Some(PoolWorkspace::Gauss(ws))) => {
                    let g = gauss_backward(ws, &grad_unscaled)?;
                    layer_grads.push((ParamGroup::Mu, g.mu));
                    layer_grads.push((ParamGroup::Beta, g.beta));
                    layer_grads.push((ParamGroup::Eta, g.eta));
                    g.input
                }
                _ => return Err(Error::Contract("trace is missing a pool workspace".into())),
            };
            let affine = affine_backward(&lt.input, &layer.weights, &grad_pre)?;
            layer_grads.push((ParamGroup::Weights, affine.weights.into_vec()));
            layer_grads.push((ParamGroup::Biases, affine.bias));
            upstream = affine.input;

            // Emit in canonical group order.
            for group in layer.groups() {
                let id = GroupId::new(i, group);
                let mut g = layer_grads
                    .iter()
                    .find(|(gr, _)| *gr == group)
                    .map(|(_, v)| v.clone())
                    .expect("every group has a gradient");
                if self.is_frozen(id) {
                    g.iter_mut().for_each(|x| *x = 0.0);
                }
                entries.push((id, g));
            }
        }
        // Collected top-down by layer; restore canonical (bottom-up) order.
        entries.sort_by_key(|(id, _)| {
            let order = self.layers()[id.layer].groups().iter().position(|g| *g == id.group);
            (id.layer, order)
        });
        Ok(Gradients { loss, entries })
    }

    /// Mean cross-entropy of the model on `(x, targets)`.
    pub fn loss(&self, x: &Matrix, targets: &[usize]) -> Result<f64> {
        let probs = self.predict(x)?;
        Ok(cross_entropy(&probs, targets)?.0)
    }

    /// Forward + backward in one call.
    pub fn loss_and_gradients(&self, x: &Matrix, targets: &[usize]) -> Result<Gradients> {
        let (_, trace) = self.forward(x)?;
        self.backward(&trace, targets)
    }
}
