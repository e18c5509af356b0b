use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, PoolParams};
use crate::pooling::effective_order;

const BINS: usize = 20;

/// Pooling parameters of one layer by display name: `p` (effective Lp order)
/// or `mu` and `beta` (Gauss). Empty for non-pooling layers.
pub fn layer_param_values(model: &Model, layer: usize) -> Vec<(&'static str, Vec<f64>)> {
    match &model.layers()[layer].pool {
        PoolParams::None => vec![],
        PoolParams::Lp(p) => vec![("p", p.rho.iter().map(|&r| effective_order(r)).collect())],
        PoolParams::Gauss(g) => vec![("mu", g.mu.clone()), ("beta", g.beta.clone())],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram of `values` over `[lo, hi]`; values outside the
/// range land in the nearest end bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let idx = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        counts[(idx.max(0.0) as usize).min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub layer: usize,
    pub param: String,
    pub mean_before: f64,
    pub std_before: f64,
    pub mean_after: Option<f64>,
    pub std_after: Option<f64>,
    pub edges: Vec<f64>,
    pub count_before: Vec<usize>,
    pub count_after: Vec<usize>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-layer distributions of `before` against the pooled values of
/// `after`. The `before` counts are scaled by `after.len()` so both columns
/// have the same total; with no `after` models they sum to the pool count.
pub fn summarise(before: &Model, after: &[&Model]) -> Vec<ParamSummary> {
    let mut out = Vec::new();
    for layer in 0..before.layers().len() {
        for (k, (name, values)) in layer_param_values(before, layer).into_iter().enumerate() {
            let pooled: Vec<f64> = after
                .iter()
                .flat_map(|m| layer_param_values(m, layer).swap_remove(k).1)
                .collect();
            let all = values.iter().chain(&pooled);
            let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
            let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
            let hb = histogram(&values, lo, hi, BINS);
            let reps = after.len().max(1);
            let (mean_before, std_before) = mean_std(&values);
            let (mean_after, std_after) = if pooled.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&pooled);
                (Some(m), Some(s))
            };
            out.push(ParamSummary {
                layer,
                param: name.to_string(),
                mean_before,
                std_before,
                mean_after,
                std_after,
                count_before: hb.counts.iter().map(|c| c * reps).collect(),
                count_after: if pooled.is_empty() {
                    vec![0; BINS]
                } else {
                    histogram(&pooled, lo, hi, BINS).counts
                },
                edges: hb.edges,
            });
        }
    }
    out
}

/// [`summarise`] for a single before/after pair, which must share an
/// architecture.
pub fn summarise_pair(before: &Model, after: Option<&Model>) -> Result<Vec<ParamSummary>> {
    if let Some(a) = after {
        if a.configs() != before.configs() {
            return Err(Error::Config("models have different architectures".into()));
        }
    }
    Ok(summarise(before, &after.into_iter().collect::<Vec<_>>()))
}

/// CSV with columns layer, param, bin_low, bin_high, count_before, count_after.
pub fn histograms_csv(params: &[ParamSummary]) -> String {
    let mut s = String::from("layer,param,bin_low,bin_high,count_before,count_after\n");
    for p in params {
        for b in 0..p.count_before.len() {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},{}",
                p.layer,
                p.param,
                p.edges[b],
                p.edges[b + 1],
                p.count_before[b],
                p.count_after[b]
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, InitSpec, LayerConfig};
    use crate::numeric::{ActivationKind, Rng};

    #[test]
    fn histogram_edges_and_clamping() {
        let h = histogram(&[0.0, 0.5, 1.0, 2.0, -1.0], 0.0, 1.0, 2);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![2, 3]);
    }

    #[test]
    fn untrained_lp_model_mass_at_two() {
        let configs = [
            LayerConfig::LpPool {
                in_dim: 3,
                units: 10,
                pool_size: 5,
                normalize: false,
            },
            LayerConfig::Affine {
                in_dim: 2,
                out_dim: 2,
                activation: ActivationKind::Softmax,
            },
        ];
        let m = build_model(&configs, &mut Rng::new(0), &InitSpec::default()).unwrap();
        let s = summarise_pair(&m, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].count_before.iter().sum::<usize>(), 2);
        let bin = s[0].count_before.iter().position(|&c| c == 2).unwrap();
        assert!(s[0].edges[bin] <= 2.0 && 2.0 <= s[0].edges[bin + 1]);
        assert_eq!(s[0].std_before, 0.0);
    }
}
