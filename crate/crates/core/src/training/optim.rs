use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(lr_final);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update of the listed parameters.
///
/// Weight decay is decoupled and applied first (`p ← p − lr·wd·p`), then
/// the bias-corrected Adam step.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, &Tensor<T>)],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        if store.tensor(*id).shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                store.get(*id).name,
                store.tensor(*id).shape()
            )));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
    let (c1, c2) = (
        T::from_f64(1.0 - h.beta1.powi(t)),
        T::from_f64(1.0 - h.beta2.powi(t)),
    );
    let decay = T::from_f64(lr * h.weight_decay);
    let (lr, eps) = (T::from_f64(lr), T::from_f64(h.eps));
    for (id, g) in grads {
        let n = g.len();
        let m = state.moments.entry(*id).or_insert_with(|| Moments {
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
        });
        let p = store.tensor_mut(*id).data_mut();
        for i in 0..n {
            let gi = g.data()[i];
            p[i] = p[i] - decay * p[i];
            m.first[i] = b1 * m.first[i] + (T::one() - b1) * gi;
            m.second[i] = b2 * m.second[i] + (T::one() - b2) * gi * gi;
            let mh = m.first[i] / c1;
            let vh = m.second[i] / c2;
            p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
