//! Depth expansion of pretrained models: layer mappings, weight-shared
//! aliasing, adjustment modules and parameter accounting.

pub mod accounting;
pub mod adjust;
mod expand;
mod mapping;

pub use accounting::{count_parameters, count_parameters_in, parameter_fraction, parameter_fraction_exact, ParamScope};
pub use adjust::{adapter_forward, lora_forward, AdjustConfig, AdjustKind, AdjustmentModule};
pub use expand::{expand_model, ExpandOptions, ExpandedModel, ExpansionInfo};
pub use mapping::{build_mapping, LayerMapping, MappingKind};
