//! Test-time adaptation of pooling parameters (and optional LHUC amplitudes)
//! per held-out speaker, with first-pass self-labels or oracle labels.

mod summary;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use summary::{histogram, histograms_csv, layer_param_values, summarise, summarise_pair, Histogram, ParamSummary};

use crate::datagen::{LabeledSet, SpeakerDataset, Split};
use crate::error::{Error, Result};
use crate::network::{GroupId, Model, ParamGroup, PoolKind};
use crate::numeric::{mix_seed, Matrix, Rng};
use crate::training::{argmax, evaluate, Sgd};

/// Frames per second of speech the sample budgets stand in for.
pub const FRAMES_PER_SECOND: usize = 100;

pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * FRAMES_PER_SECOND as f64).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    /// Argmax labels from the unadapted model's own first pass.
    #[serde(rename = "self")]
    SelfFirstPass,
    #[serde(rename = "oracle")]
    Oracle,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::SelfFirstPass => "self",
            LabelSource::Oracle => "oracle",
        })
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(LabelSource::SelfFirstPass),
            "oracle" => Ok(LabelSource::Oracle),
            other => Err(Error::Config(format!("unknown label source '{other}' (expected self or oracle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub param_subset: BTreeSet<ParamGroup>,
    pub label_source: LabelSource,
    pub lr: f64,
    pub iterations: usize,
    /// Hidden layers to adapt; `None` adapts all of them.
    pub layers: Option<Vec<usize>>,
    pub batch_size: usize,
    /// Independent subsamples per sweep point.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            param_subset: BTreeSet::from([ParamGroup::Rho]),
            label_source: LabelSource::SelfFirstPass,
            lr: 0.8,
            iterations: 3,
            layers: None,
            batch_size: 256,
            repeats: 3,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// Groups the configuration trains on `model`; fails if the subset does
    /// not fit the model's pool type or names a non-hidden layer.
    pub fn trainable_groups(&self, model: &Model) -> Result<BTreeSet<GroupId>> {
        if self.param_subset.is_empty() {
            return Err(Error::Config("adaptation subset is empty".into()));
        }
        if self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::Config("batch_size and repeats must be at least 1".into()));
        }
        if !self.lr.is_finite() {
            return Err(Error::Config("adaptation lr must be finite".into()));
        }
        let kind = model.pool_kind();
        for &g in &self.param_subset {
            let ok = match g {
                ParamGroup::Rho => kind == Some(PoolKind::Lp),
                ParamGroup::Mu | ParamGroup::Beta | ParamGroup::Eta => kind == Some(PoolKind::Gauss),
                ParamGroup::Biases | ParamGroup::Lhuc => true,
                ParamGroup::Weights => false,
            };
            if !ok {
                let pool = kind.map_or("dnn".to_string(), |k| format!("{k:?}").to_lowercase());
                return Err(Error::Config(format!("group '{g}' cannot be adapted on a {pool} model")));
            }
        }
        let hidden = model.hidden_layers();
        let layers = match &self.layers {
            None => hidden.clone(),
            Some(ls) => {
                if let Some(bad) = ls.iter().find(|l| !hidden.contains(l)) {
                    return Err(Error::Config(format!("layer {bad} is not a hidden layer")));
                }
                ls.clone()
            }
        };
        let out: BTreeSet<GroupId> = layers
            .iter()
            .flat_map(|&l| self.param_subset.iter().map(move |&g| GroupId::new(l, g)))
            .filter(|&id| model.group(id).is_some())
            .collect();
        if out.is_empty() {
            return Err(Error::Config("adaptation subset selects no parameters".into()));
        }
        Ok(out)
    }

    /// The bottom `k` hidden layers.
    pub fn bottom_layers(k: usize) -> Option<Vec<usize>> {
        Some((0..k).collect())
    }
}

/// Argmax class per row of `features` under `model`.
pub fn first_pass_labels(model: &Model, features: &Matrix) -> Result<Vec<usize>> {
    let probs = model.predict(features)?;
    Ok(probs.row_iter().map(argmax).collect())
}

/// Adapts a copy of `model` to one speaker. Only groups selected by `cfg`
/// can differ from the input; frozen flags of the input are restored.
pub fn adapt_speaker(model: &Model, set: &LabeledSet, cfg: &AdaptConfig) -> Result<Model> {
    adapt_speaker_with(model, set, cfg, |_, _| Ok(()))
}

/// As [`adapt_speaker`], calling `after_iter(i, &model)` after every pass
/// (`i` counts from 1).
pub fn adapt_speaker_with(
    model: &Model,
    set: &LabeledSet,
    cfg: &AdaptConfig,
    mut after_iter: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Model> {
    let trainable = cfg.trainable_groups(model)?;
    if set.is_empty() {
        return Ok(model.clone());
    }
    let targets = match cfg.label_source {
        LabelSource::SelfFirstPass => first_pass_labels(model, &set.features)?,
        LabelSource::Oracle => set.labels.clone(),
    };
    let mut adapted = model.clone();
    adapted.freeze_all_except(&trainable);
    let mut rng = Rng::derived(cfg.seed, 0x4144_4150);
    let mut opt = Sgd::new(0.0);
    for iter in 1..=cfg.iterations {
        let order = rng.permutation(set.len());
        for batch in order.chunks(cfg.batch_size) {
            let x = set.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let grads = adapted.loss_and_gradients(&x, &y)?;
            opt.step(&mut adapted, &grads, cfg.lr, None)?;
        }
        after_iter(iter, &adapted)?;
    }
    adapted.metadata.frozen = model.metadata.frozen.clone();
    let subset: Vec<String> = trainable.iter().map(ToString::to_string).collect();
    adapted.metadata.history.push(format!(
        "adapt: groups={} labels={} lr={} iterations={} samples={}",
        subset.join(","),
        cfg.label_source,
        cfg.lr,
        cfg.iterations,
        set.len()
    ));
    Ok(adapted)
}

/// Number of adaptation samples per sweep point; `None` uses all of them.
pub type Budget = Option<usize>;

pub fn budget_label(b: Budget) -> String {
    b.map_or_else(|| "all".to_string(), |n| n.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRun {
    pub budget: Budget,
    pub repeat: usize,
    pub n_adapt_samples: usize,
    /// Test error after each pass; entry 0 is the unadapted model.
    pub iteration_errors: Vec<f64>,
}

impl AdaptRun {
    pub fn error_after(&self) -> f64 {
        *self.iteration_errors.last().expect("entry 0 always present")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerResult {
    pub speaker: u32,
    pub n_test_samples: usize,
    pub error_before: f64,
    pub runs: Vec<AdaptRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: Budget,
    pub mean_error_before: f64,
    pub mean_error_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config: AdaptConfig,
    pub speakers: Vec<SpeakerResult>,
    pub summary: Vec<BudgetSummary>,
    /// Per-layer parameter distributions of the SI model against the models
    /// adapted with the largest budget (first repeat), pooled over speakers.
    pub params: Vec<ParamSummary>,
}

impl AdaptReport {
    pub fn mean_error_before(&self) -> f64 {
        mean(self.speakers.iter().map(|s| s.error_before))
    }

    /// Mean over speakers and repeats of the error after the last pass at
    /// `budget`.
    pub fn mean_error_after(&self, budget: Budget) -> Option<f64> {
        self.summary.iter().find(|s| s.budget == budget).map(|s| s.mean_error_after)
    }

    /// Mean test error after pass `iter` (0 = unadapted) at `budget`.
    pub fn mean_error_at_iteration(&self, budget: Budget, iter: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .speakers
            .iter()
            .flat_map(|s| s.runs.iter())
            .filter(|r| r.budget == budget)
            .map(|r| r.iteration_errors.get(iter).copied())
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| mean(vals.into_iter()))
    }

    /// Tidy CSV: one row per (speaker, budget, repeat, iteration).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("speaker,sweep_point,seed,iteration,error\n");
        for sp in &self.speakers {
            for run in &sp.runs {
                for (it, e) in run.iteration_errors.iter().enumerate() {
                    s.push_str(&format!("{},{},{},{it},{e:e}\n", sp.speaker, budget_label(run.budget), run.repeat));
                }
            }
        }
        s
    }

    /// CSV with columns layer, param, bin_low, bin_high, count_before, count_after.
    pub fn histograms_csv(&self) -> String {
        summary::histograms_csv(&self.params)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Adapted models kept from an experiment: largest budget, first repeat.
pub type AdaptedModels = Vec<(u32, Model)>;

/// Adapts the SI model to every test speaker at every budget, `cfg.repeats`
/// times on independent subsamples, scoring each pass on the speaker's test
/// split.
pub fn run_adaptation_experiment(
    si_model: &Model,
    dataset: &SpeakerDataset,
    cfg: &AdaptConfig,
    sweep: &[Budget],
) -> Result<(AdaptReport, AdaptedModels)> {
    cfg.trainable_groups(si_model)?;
    if sweep.is_empty() {
        return Err(Error::Config("adaptation sweep is empty".into()));
    }
    let largest = sweep.iter().copied().max_by_key(|b| b.unwrap_or(usize::MAX)).expect("non-empty");
    let mut speakers = Vec::new();
    let mut adapted_models = Vec::new();

    for speaker in dataset.test_speakers() {
        let adapt_all = dataset.select(Some(speaker), Split::Adapt);
        let test = dataset.select(Some(speaker), Split::Test);
        if test.is_empty() {
            return Err(Error::Config(format!("speaker {speaker} has no test samples")));
        }
        let error_before = evaluate(si_model, &test)?.frame_error;
        let mut runs = Vec::new();
        for (point, &budget) in sweep.iter().enumerate() {
            for repeat in 0..cfg.repeats {
                let stream = mix_seed(u64::from(speaker), ((point as u64) << 32) | repeat as u64);
                let mut rng = Rng::derived(cfg.seed, stream);
                let n = budget.map_or(adapt_all.len(), |b| b.min(adapt_all.len()));
                let mut idx = rng.permutation(adapt_all.len());
                idx.truncate(n);
                let subset = adapt_all.subset(&idx);
                let run_cfg = AdaptConfig {
                    seed: rng.seed() ^ 0x9E37_79B9_7F4A_7C15,
                    ..cfg.clone()
                };
                let mut iteration_errors = vec![error_before];
                let adapted = adapt_speaker_with(si_model, &subset, &run_cfg, |_, m| {
                    iteration_errors.push(evaluate(m, &test)?.frame_error);
                    Ok(())
                })?;
                if iteration_errors.len() == 1 {
                    // Empty adapt set: the model is unchanged for every pass.
                    iteration_errors.extend(std::iter::repeat_n(error_before, cfg.iterations));
                }
                if budget == largest && repeat == 0 {
                    adapted_models.push((speaker, adapted));
                }
                runs.push(AdaptRun {
                    budget,
                    repeat,
                    n_adapt_samples: n,
                    iteration_errors,
                });
            }
        }
        speakers.push(SpeakerResult {
            speaker,
            n_test_samples: test.len(),
            error_before,
            runs,
        });
    }
    if speakers.is_empty() {
        return Err(Error::Config("dataset has no test speakers".into()));
    }

    let summary = sweep
        .iter()
        .map(|&budget| BudgetSummary {
            budget,
            mean_error_before: mean(speakers.iter().map(|s| s.error_before)),
            mean_error_after: mean(
                speakers
                    .iter()
                    .flat_map(|s| s.runs.iter())
                    .filter(|r| r.budget == budget)
                    .map(AdaptRun::error_after),
            ),
        })
        .collect();
    let after: Vec<&Model> = adapted_models.iter().map(|(_, m)| m).collect();
    let params = summary::summarise(si_model, &after);
    Ok((
        AdaptReport {
            config: cfg.clone(),
            speakers,
            summary,
            params,
        },
        adapted_models,
    ))
}
