//! Depth-wise expansion of pretrained vision transformers.
//!
//! A small ViT is trained from scratch, then grown deeper by mapping new
//! layers onto pretrained ones. Mapped layers either alias their source's
//! attention and MLP storage or copy it, keep their own layer norms, and
//! may carry per-instance LoRA or parallel-adapter modules on the MLP.
//! Everything runs on a tape-based reverse-mode autodiff engine over
//! dense CPU tensors.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod expansion;
pub mod io;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
