//! Synthetic datasets and their on-disk format.

mod closed_region;
mod io;
mod multispeaker;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use closed_region::{gen_closed_region, ClosedRegionParams, ELLIPSE_AXES, ELLIPSE_CENTRE};
pub use io::{dataset_checksum, load_dataset, save_dataset, DATA_FILE, MANIFEST_FILE};
pub use multispeaker::{gen_multispeaker, MultiSpeakerParams, ShiftSpec};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Training speakers, used for gradient updates.
    Train,
    /// Training speakers, held out for the learning-rate schedule.
    Valid,
    /// Test speakers, available for adaptation.
    Adapt,
    /// Test speakers, held out for scoring.
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Adapt => "adapt",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "adapt" => Ok(Split::Adapt),
            "test" => Ok(Split::Test),
            other => Err(Error::parse("split", format!("unknown split '{other}'"))),
        }
    }
}

/// Features with class labels; the unit consumed by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim("LabeledSet::new", format!("{} labels", features.rows()), labels.len()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub n_classes: usize,
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub speaker_ids: Vec<u32>,
    pub splits: Vec<Split>,
    pub manifest: Manifest,
}

impl SpeakerDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.features.rows() != n || self.speaker_ids.len() != n || self.splits.len() != n {
            return Err(Error::parse("dataset", "column lengths disagree"));
        }
        if self.features.cols() != self.manifest.dim {
            return Err(Error::parse(
                "dim",
                format!("manifest says {} features, data has {}", self.manifest.dim, self.features.cols()),
            ));
        }
        if n != self.manifest.n_rows {
            return Err(Error::parse(
                "n_rows",
                format!("manifest says {} rows, data has {n}", self.manifest.n_rows),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.manifest.n_classes) {
            return Err(Error::parse("label", format!("{bad} is not below n_classes {}", self.manifest.n_classes)));
        }
        Ok(())
    }

    fn indices(&self, speaker: Option<u32>, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split && speaker.is_none_or(|s| self.speaker_ids[i] == s))
            .collect()
    }

    /// Rows of `split`, optionally restricted to one speaker, in file order.
    pub fn select(&self, speaker: Option<u32>, split: Split) -> LabeledSet {
        let idx = self.indices(speaker, split);
        LabeledSet {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Speakers having at least one row in `split`, ascending.
    pub fn speakers_in(&self, split: Split) -> Vec<u32> {
        let set: BTreeSet<u32> = (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .map(|i| self.speaker_ids[i])
            .collect();
        set.into_iter().collect()
    }

    /// Speakers with adaptation or test rows.
    pub fn test_speakers(&self) -> Vec<u32> {
        let mut s: BTreeSet<u32> = self.speakers_in(Split::Adapt).into_iter().collect();
        s.extend(self.speakers_in(Split::Test));
        s.into_iter().collect()
    }
}
