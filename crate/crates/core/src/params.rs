//! Named parameter storage.
//!
//! Layers never own their weights. They hold [`ParamId`] handles into a
//! [`ParamStore`], so two layer instances that hold the same id alias one
//! storage and, on the tape, one gradient accumulator.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a parameter does inside the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PatchWeight,
    PatchBias,
    PosEmbed,
    ClsToken,
    QkvWeight,
    QkvBias,
    ProjWeight,
    ProjBias,
    Fc1Weight,
    Fc1Bias,
    Fc2Weight,
    Fc2Bias,
    NormGamma,
    NormBeta,
    HeadWeight,
    HeadBias,
    AdjustA,
    AdjustB,
}

impl Role {
    /// Attention and MLP weights of a transformer block.
    pub fn is_block_backbone(self) -> bool {
        matches!(
            self,
            Role::QkvWeight
                | Role::QkvBias
                | Role::ProjWeight
                | Role::ProjBias
                | Role::Fc1Weight
                | Role::Fc1Bias
                | Role::Fc2Weight
                | Role::Fc2Bias
        )
    }

    pub fn is_embedding(self) -> bool {
        matches!(
            self,
            Role::PatchWeight | Role::PatchBias | Role::PosEmbed | Role::ClsToken
        )
    }

    pub fn is_norm(self) -> bool {
        matches!(self, Role::NormGamma | Role::NormBeta)
    }

    pub fn is_head(self) -> bool {
        matches!(self, Role::HeadWeight | Role::HeadBias)
    }

    pub fn is_adjustment(self) -> bool {
        matches!(self, Role::AdjustA | Role::AdjustB)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Format(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, role, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalars held, each storage counted once.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
