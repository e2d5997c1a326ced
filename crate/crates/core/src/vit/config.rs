use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of an isotropic, class-token vision transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub drop_path_rate: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 4,
            dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 4,
            drop_path_rate: 0.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 || self.classes == 0 {
            return fail("channels, dim, heads and classes must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return fail(format!("mlp ratio {} gives no hidden units", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return fail(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Drop-path probability of each block, rising linearly from 0 to `rate`.
pub fn drop_path_schedule(rate: f64, depth: usize) -> Vec<f64> {
    match depth {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..depth)
            .map(|i| rate * i as f64 / (depth - 1) as f64)
            .collect(),
    }
}
