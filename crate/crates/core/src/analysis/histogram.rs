use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Model;

use super::cka::block_features;

pub const DEFAULT_RANGE: [f64; 2] = [-10.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    pub range: [f64; 2],
    pub layers: Vec<LayerHistogram>,
}

/// `bins + 1` uniform edges over `[lo, hi]`.
pub fn bin_edges(bins: usize, range: [f64; 2]) -> Vec<f64> {
    let [lo, hi] = range;
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect()
}

/// Uniform histogram of `values`; values outside `range` are dropped and
/// `hi` itself falls in the last bin.
pub fn histogram(values: impl IntoIterator<Item = f64>, bins: usize, range: [f64; 2]) -> Result<(Vec<f64>, Vec<u64>)> {
    let [lo, hi] = range;
    if bins == 0 || !(lo < hi) {
        return Err(Error::contract(format!("histogram needs bins ≥ 1 and lo < hi, got {bins} over {range:?}")));
    }
    let mut counts = vec![0u64; bins];
    for v in values {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let bin = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[bin.min(bins - 1)] += 1;
    }
    Ok((bin_edges(bins, range), counts))
}

/// Histograms of post-block activations for the chosen layers.
pub fn activation_histograms<T: Scalar>(
    model: &Model<T>,
    probe: &Tensor<T>,
    layers: &[usize],
    bins: usize,
    range: [f64; 2],
) -> Result<HistogramSet> {
    histogram(std::iter::empty(), bins, range)?;
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.depth()) {
        return Err(Error::Index(format!("layer {bad} of a {}-layer model", model.depth())));
    }
    let features = block_features(model, probe)?;
    let layers = layers
        .iter()
        .map(|&layer| {
            let values = features[layer].data().iter().map(|v| v.as_f64());
            let (edges, counts) = histogram(values, bins, range)?;
            Ok(LayerHistogram { layer, edges, counts })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramSet { range, layers })
}

/// `count` layer indices spread evenly over `depth` layers.
pub fn uniform_layers(depth: usize, count: usize) -> Vec<usize> {
    if depth == 0 || count == 0 {
        return Vec::new();
    }
    if count >= depth {
        return (0..depth).collect();
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| if count == 1 { depth - 1 } else { i * (depth - 1) / (count - 1) })
        .collect();
    out.dedup();
    out
}
