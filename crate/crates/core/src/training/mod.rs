//! Minibatch SGD with a max-norm constraint, the newbob schedule, and
//! frame-error evaluation.

mod newbob;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use newbob::{newbob_schedule, relative_improvement, LrAction, NewbobConfig};

use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::network::{Gradients, GroupId, Model, ParamGroup};
use crate::numeric::{Rng, PROB_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub newbob: NewbobConfig,
    /// Upper bound on the L2 norm of every affine weight column.
    pub max_norm_limit: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.008,
            batch_size: 32,
            max_epochs: 30,
            newbob: NewbobConfig::default(),
            max_norm_limit: 1.0,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nb = &self.newbob;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return Err(Error::Config("initial_lr must be finite and non-negative".into()));
        }
        if !(nb.ramp_threshold >= 0.0 && nb.stop_threshold >= 0.0) {
            return Err(Error::Config("newbob thresholds must be non-negative".into()));
        }
        if !(nb.halving_factor > 0.0 && nb.halving_factor <= 1.0) {
            return Err(Error::Config("halving_factor must lie in (0, 1]".into()));
        }
        if !(self.max_norm_limit > 0.0) {
            return Err(Error::Config("max_norm_limit must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Rescales every column of `layer`'s weights whose L2 norm exceeds `limit`
/// down to exactly `limit`.
pub fn apply_max_norm(model: &mut Model, layer: usize, limit: f64) {
    let w = &model.layers()[layer].weights;
    let over: Vec<(usize, f64)> = (0..w.cols())
        .map(|c| (c, w.col_norm(c)))
        .filter(|&(_, n)| n > limit)
        .collect();
    if over.is_empty() {
        return;
    }
    let w = model.weights_mut(layer);
    for (c, norm) in over {
        w.scale_col(c, limit / norm);
    }
}

/// SGD with optional heavy-ball momentum. Velocities are kept per group.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<(GroupId, Vec<f64>)>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `θ ← θ − lr·step` for every unfrozen group, then max-norm on the
    /// affine weights when `max_norm_limit` is given. Fails without touching
    /// the model or the velocities if any gradient or updated value is
    /// non-finite.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64, max_norm_limit: Option<f64>) -> Result<()> {
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of group {id}")));
        }
        if !grads.loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut staged: Vec<(GroupId, Vec<f64>, Option<Vec<f64>>)> = Vec::new();
        for (id, g) in grads.iter() {
            if model.is_frozen(id) || (self.momentum == 0.0 && g.iter().all(|&x| x == 0.0)) {
                continue;
            }
            let velocity = (self.momentum != 0.0).then(|| {
                let prev = self.velocity.iter().find(|(v, _)| *v == id).map(|(_, v)| v.as_slice());
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| self.momentum * prev.map_or(0.0, |p| p[i]) + gi)
                    .collect::<Vec<f64>>()
            });
            let update = velocity.as_deref().unwrap_or(g);
            let params = model
                .group(id)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown group {id}")))?;
            if params.len() != update.len() {
                return Err(Error::dim("sgd_step", params.len(), update.len()));
            }
            let next: Vec<f64> = params.iter().zip(update).map(|(p, u)| p - lr * u).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("update of group {id}")));
            }
            staged.push((id, next, velocity));
        }
        for (id, next, velocity) in staged {
            model.group_mut(id)?.copy_from_slice(&next);
            if let Some(v) = velocity {
                match self.velocity.iter_mut().find(|(g, _)| *g == id) {
                    Some(slot) => slot.1 = v,
                    None => self.velocity.push((id, v)),
                }
            }
        }
        if let Some(limit) = max_norm_limit {
            for layer in 0..model.layers().len() {
                if !model.is_frozen(GroupId::new(layer, ParamGroup::Weights)) {
                    apply_max_norm(model, layer, limit);
                }
            }
        }
        Ok(())
    }
}

/// One plain SGD update; see [`Sgd::step`].
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, max_norm_limit: Option<f64>) -> Result<()> {
    Sgd::new(0.0).step(model, grads, lr, max_norm_limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub frame_error: f64,
    pub mean_loss: f64,
}

const EVAL_CHUNK: usize = 2048;

/// Argmax frame error and mean cross-entropy over `set`.
pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<Evaluation> {
    check_set(model, set, "evaluate")?;
    let (mut wrong, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let probs = model.predict(&set.features.select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = probs.row(r);
            let target = set.labels[i];
            if argmax(row) != target {
                wrong += 1;
            }
            loss -= row[target].max(PROB_FLOOR).ln();
        }
    }
    let n = set.len() as f64;
    Ok(Evaluation {
        frame_error: wrong as f64 / n,
        mean_loss: loss / n,
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_set(model: &Model, set: &LabeledSet, op: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Config(format!("{op}: dataset is empty")));
    }
    if set.features.cols() != model.input_dim() {
        return Err(Error::dim(op, model.input_dim(), set.features.cols()));
    }
    let classes = model.num_classes();
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            what: "label",
            index: bad,
            bound: classes,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub valid_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Newbob,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation error of the model before any update.
    pub initial_valid_error: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the initial model.
    pub best_epoch: usize,
    pub best_valid_error: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,valid_error\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.lr, e.train_loss, e.valid_error);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains with shuffled minibatches, stepping the learning rate by newbob on
/// the validation frame error, and returns the best-validation model (earlier
/// epoch wins ties; the untrained model counts as epoch 0).
pub fn train(model: &Model, train_set: &LabeledSet, valid_set: &LabeledSet, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    check_set(model, train_set, "train")?;
    check_set(model, valid_set, "train")?;

    let mut model = model.clone();
    let mut rng = Rng::derived(cfg.seed, 0x5348_5546);
    let mut opt = Sgd::new(cfg.momentum);
    let mut lr = cfg.initial_lr;

    let initial = evaluate(&model, valid_set)?.frame_error;
    let mut errors = vec![initial];
    let mut best = (0usize, initial, model.clone());
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let order = rng.permutation(train_set.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let grads = model.loss_and_gradients(&x, &y)?;
            opt.step(&mut model, &grads, lr, Some(cfg.max_norm_limit))
                .map_err(|e| annotate(e, epoch))?;
            loss_sum += grads.loss;
            batches += 1;
        }
        let valid_error = evaluate(&model, valid_set)?.frame_error;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            valid_error,
        });
        if valid_error < best.1 {
            best = (epoch, valid_error, model.clone());
        }
        errors.push(valid_error);
        match newbob_schedule(&errors, &cfg.newbob) {
            LrAction::Keep => {}
            LrAction::Halve => lr *= cfg.newbob.halving_factor,
            LrAction::Stop => {
                stop_reason = StopReason::Newbob;
                break;
            }
        }
    }

    let (best_epoch, best_valid_error, mut best_model) = best;
    best_model.metadata.history.push(format!(
        "train: seed={} epochs={} best_epoch={best_epoch} valid_error={best_valid_error:e}",
        cfg.seed,
        epochs.len()
    ));
    Ok((
        best_model,
        TrainReport {
            initial_valid_error: initial,
            epochs,
            best_epoch,
            best_valid_error,
            stop_reason,
        },
    ))
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} in epoch {epoch}")),
        other => other,
    }
}
