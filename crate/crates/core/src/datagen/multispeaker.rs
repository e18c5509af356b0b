use serde::{Deserialize, Serialize};

use super::{Manifest, SpeakerDataset, Split};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// Per-speaker feature distortion `x ↦ diag(exp(m·g)) x + m·offset·o`, with
/// `g, o ~ N(0, I)` drawn per speaker and `m` the speaker's magnitude. Training
/// speakers use `magnitude · train_spread`, test speakers the full magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub magnitude: f64,
    pub train_spread: f64,
    pub offset: f64,
    /// Per-speaker jitter of the class means, relative to `m`.
    pub class_jitter: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            magnitude: 0.5,
            train_spread: 0.3,
            offset: 0.5,
            class_jitter: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            magnitude: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiSpeakerParams {
    pub n_train_speakers: usize,
    pub n_test_speakers: usize,
    pub n_per_speaker: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Standard deviation of the class means around the origin.
    pub class_spread: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Fraction of each training speaker's rows tagged `train` (rest `valid`).
    pub train_fraction: f64,
    /// Fraction of each test speaker's rows tagged `adapt` (rest `test`).
    pub adapt_fraction: f64,
    pub shift: ShiftSpec,
}

impl Default for MultiSpeakerParams {
    fn default() -> Self {
        Self {
            n_train_speakers: 10,
            n_test_speakers: 6,
            n_per_speaker: 1000,
            dim: 8,
            n_classes: 6,
            class_spread: 1.0,
            noise: 0.6,
            train_fraction: 0.8,
            adapt_fraction: 0.5,
            shift: ShiftSpec::default(),
        }
    }
}

impl MultiSpeakerParams {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("multispeaker: {msg}")));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.n_train_speakers == 0 || self.n_test_speakers == 0 {
            return bad("need at least one training and one test speaker");
        }
        if self.n_per_speaker < 2 {
            return bad("n_per_speaker must be at least 2");
        }
        for (name, f) in [("train_fraction", self.train_fraction), ("adapt_fraction", self.adapt_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(&format!("{name} must lie strictly between 0 and 1"));
            }
        }
        let s = &self.shift;
        if ![s.magnitude, s.train_spread, s.offset, s.class_jitter, self.noise, self.class_spread]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return bad("spreads and shift parameters must be finite and non-negative");
        }
        Ok(())
    }
}

const CLASS_STREAM: u64 = 1;
const SPEAKER_STREAM: u64 = 1_000;

/// Shared class-conditional Gaussians observed through per-speaker affine
/// distortions. Training speakers come first (ids `0..n_train_speakers`),
/// each split into `train`/`valid`; test speakers follow, split into
/// `adapt`/`test`. Labels are balanced exactly within every speaker.
pub fn gen_multispeaker(params: &MultiSpeakerParams, seed: u64) -> Result<SpeakerDataset> {
    params.validate()?;
    let (d, c) = (params.dim, params.n_classes);
    let mut class_rng = Rng::derived(seed, CLASS_STREAM);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| class_rng.normal(0.0, params.class_spread)).collect())
        .collect();

    let n_speakers = params.n_train_speakers + params.n_test_speakers;
    let n = n_speakers * params.n_per_speaker;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut speaker_ids = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);

    for speaker in 0..n_speakers {
        let is_train = speaker < params.n_train_speakers;
        let mut rng = Rng::derived(seed, SPEAKER_STREAM + speaker as u64);
        let s = &params.shift;
        let m = if is_train { s.magnitude * s.train_spread } else { s.magnitude };
        let scale: Vec<f64> = (0..d).map(|_| (m * rng.normal(0.0, 1.0)).exp()).collect();
        let offset: Vec<f64> = (0..d).map(|_| m * s.offset * rng.normal(0.0, 1.0)).collect();
        let jitter: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| m * s.class_jitter * rng.normal(0.0, 1.0)).collect())
            .collect();

        let mut speaker_labels: Vec<usize> = (0..params.n_per_speaker).map(|i| i % c).collect();
        rng.shuffle(&mut speaker_labels);
        let (first, second, fraction) = if is_train {
            (Split::Train, Split::Valid, params.train_fraction)
        } else {
            (Split::Adapt, Split::Test, params.adapt_fraction)
        };
        let n_first = ((params.n_per_speaker as f64 * fraction).round() as usize).clamp(1, params.n_per_speaker - 1);

        for (i, &label) in speaker_labels.iter().enumerate() {
            for j in 0..d {
                let clean = means[label][j] + jitter[label][j] + rng.normal(0.0, params.noise);
                features.push(scale[j] * clean + offset[j]);
            }
            labels.push(label);
            speaker_ids.push(speaker as u32);
            splits.push(if i < n_first { first } else { second });
        }
    }

    Ok(SpeakerDataset {
        features: Matrix::from_vec(n, d, features)?,
        labels,
        speaker_ids,
        splits,
        manifest: Manifest {
            format_version: super::io::DATASET_FORMAT_VERSION,
            dim: d,
            n_classes: c,
            generator: "multispeaker".into(),
            seed,
            params: serde_json::to_value(params).expect("plain struct"),
            n_rows: n,
        },
    })
}
