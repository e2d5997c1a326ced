//! Isotropic vision transformer with a class token.

mod config;
mod drop_path;
mod model;

pub use config::{drop_path_schedule, ViTConfig};
pub use drop_path::drop_path;
pub use model::{init_model, patchify, Block, ForwardTrace, Linear, Model, Norm, LAYER_NORM_EPS};

pub(crate) use model::{init_block, BlockInit};

#[cfg(test)]
mod tests;
