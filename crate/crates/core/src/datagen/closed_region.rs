use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Manifest, SpeakerDataset, Split};
use crate::numeric::{Matrix, Rng};

pub const ELLIPSE_CENTRE: [f64; 2] = [0.2, -0.1];
pub const ELLIPSE_AXES: [f64; 2] = [1.0, 0.6];

/// Class 0 fills the ellipse out to this normalised radius.
const INNER_RADIUS: f64 = 0.9;
/// Class 1 fills the elliptical annulus between these normalised radii.
const ANNULUS: (f64, f64) = (1.15, 1.9);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedRegionParams {
    pub n_per_class: usize,
    pub noise: f64,
}

impl Default for ClosedRegionParams {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            noise: 0.0,
        }
    }
}

/// Two-class 2-D task whose decision boundary is a closed ellipse: class 0
/// inside, class 1 in a surrounding annulus. Each of the train, valid and
/// test splits holds exactly `n_per_class` samples of each class; isotropic
/// Gaussian noise of standard deviation `noise` is added to every point.
pub fn gen_closed_region(n_per_class: usize, noise: f64, seed: u64) -> SpeakerDataset {
    let mut rng = Rng::new(seed);
    let splits = [Split::Train, Split::Valid, Split::Test];
    let n = splits.len() * 2 * n_per_class;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut split_tags = Vec::with_capacity(n);

    for &split in &splits {
        for class in 0..2 {
            for _ in 0..n_per_class {
                // Uniform over area: radius ∝ sqrt(U).
                let s = match class {
                    0 => INNER_RADIUS * rng.uniform(0.0, 1.0).sqrt(),
                    _ => {
                        let (lo, hi) = ANNULUS;
                        (lo * lo + rng.uniform(0.0, 1.0) * (hi * hi - lo * lo)).sqrt()
                    }
                };
                let theta = rng.uniform(0.0, 2.0 * PI);
                let mut x = ELLIPSE_CENTRE[0] + ELLIPSE_AXES[0] * s * theta.cos();
                let mut y = ELLIPSE_CENTRE[1] + ELLIPSE_AXES[1] * s * theta.sin();
                if noise > 0.0 {
                    x += rng.normal(0.0, noise);
                    y += rng.normal(0.0, noise);
                }
                features.extend([x, y]);
                labels.push(class);
                split_tags.push(split);
            }
        }
    }

    let params = ClosedRegionParams { n_per_class, noise };
    SpeakerDataset {
        features: Matrix::from_vec(n, 2, features).expect("sized above"),
        labels,
        speaker_ids: vec![0; n],
        splits: split_tags,
        manifest: Manifest {
            format_version: super::io::DATASET_FORMAT_VERSION,
            dim: 2,
            n_classes: 2,
            generator: "closed-region".into(),
            seed,
            params: serde_json::to_value(params).expect("plain struct"),
            n_rows: n,
        },
    }
}
