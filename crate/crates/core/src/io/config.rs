//! Experiment configuration: one JSON document, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{AdjustConfig, AdjustKind, MappingKind};
use crate::training::TrainConfig;
use crate::vit::ViTConfig;

use super::dataset::DatasetSpec;

pub const DEFAULT_RANK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    pub strategy: MappingKind,
    /// Depth multiplier; the target depth is `round(scale·L)`.
    pub scale: f64,
    pub share: bool,
    /// Inclusive 0-based range of pretrained layers that may be duplicated.
    pub subset: Option<[usize; 2]>,
    /// `None` expands without adjustment modules.
    pub adjust: Option<AdjustKind>,
    pub rank: usize,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            strategy: MappingKind::Cyclic,
            scale: 2.0,
            share: true,
            subset: None,
            adjust: Some(AdjustKind::ParallelAdapter),
            rank: DEFAULT_RANK,
            seed: 0,
        }
    }
}

impl ExpansionConfig {
    pub fn target_depth(&self, base_depth: usize) -> Result<usize> {
        target_depth(self.scale, base_depth)
    }

    pub fn adjust_config(&self) -> Option<AdjustConfig> {
        self.adjust.map(|kind| AdjustConfig { kind, rank: self.rank })
    }

    pub fn subset_set(&self) -> Option<BTreeSet<usize>> {
        self.subset.map(|[a, b]| (a..=b).collect())
    }
}

/// `round(scale·base_depth)`; scales below 1 are rejected.
pub fn target_depth(scale: f64, base_depth: usize) -> Result<usize> {
    if !(scale.is_finite() && scale >= 1.0) {
        return Err(Error::Config(format!("scale factor {scale} must be at least 1")));
    }
    Ok((scale * base_depth as f64).round() as usize)
}

/// Parses `a..b` (inclusive) into a layer set.
pub fn parse_subset(s: &str) -> Result<BTreeSet<usize>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("subset {s:?} is not of the form a..b")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("subset bound {v:?} is not a layer index")))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a > b {
        return Err(Error::Config(format!("empty subset {a}..{b}")));
    }
    Ok((a..=b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub grad_norms: bool,
    pub cka: bool,
    pub histograms: bool,
    /// Probe samples drawn from the probe split.
    pub probe_samples: usize,
    pub bins: usize,
    pub range: [f64; 2],
    /// Number of evenly spaced layers to histogram.
    pub histogram_layers: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            grad_norms: true,
            cka: true,
            histograms: true,
            probe_samples: 64,
            bins: 40,
            range: crate::analysis::DEFAULT_RANGE,
            histogram_layers: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    pub expansion: ExpansionConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisConfig,
    pub dataset: DatasetSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.dataset.image_size != self.model.image_size || self.dataset.channels != self.model.channels {
            return Err(Error::Config("dataset image shape does not match the model".into()));
        }
        if self.dataset.classes != self.model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model head has {}",
                self.dataset.classes, self.model.classes
            )));
        }
        target_depth(self.expansion.scale, self.model.depth)?;
        if self.expansion.rank == 0 {
            return Err(Error::Config("adjustment rank must be at least 1".into()));
        }
        if self.analysis.bins == 0 || !(self.analysis.range[0] < self.analysis.range[1]) {
            return Err(Error::Config("histograms need bins ≥ 1 and lo < hi".into()));
        }
        Ok(())
    }
}
