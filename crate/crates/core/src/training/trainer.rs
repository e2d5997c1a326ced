use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::dataset::Dataset;
use crate::params::ParamId;
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Model;

use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};

/// Which parameters fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Adjustment factors, every layer norm and the classification head.
    AdjustmentOnly,
    AllParameters,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adjustment-only" | "adjustment_only" => Ok(Policy::AdjustmentOnly),
            "all" | "all_parameters" | "all-parameters" => Ok(Policy::AllParameters),
            other => Err(Error::Config(format!("unknown training policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub policy: Policy,
    pub drop_path_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_init: 2e-4,
            lr_final: 2e-6,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            policy: Policy::AdjustmentOnly,
            drop_path_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_final >= 0.0 && self.lr_init >= self.lr_final) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_init ≥ lr_final ≥ 0, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!("drop path rate {} outside [0, 1)", self.drop_path_rate)));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One JSON-lines record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    /// Wall time; the only field not reproducible across runs.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

impl TrainReport {
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// Same records with wall time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainReport {
        let mut out = self.clone();
        for r in &mut out.epochs {
            r.seconds = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Parameters optimized under `policy`.
pub fn select_trainable<T: Scalar>(model: &Model<T>, policy: Policy) -> BTreeSet<ParamId> {
    model
        .store
        .iter()
        .filter(|(_, p)| match policy {
            Policy::AllParameters => true,
            Policy::AdjustmentOnly => p.role.is_adjustment() || p.role.is_norm() || p.role.is_head(),
        })
        .map(|(id, _)| id)
        .collect()
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.last_dim();
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == label
        })
        .count()
}

/// Inference-mode loss and top-1 accuracy.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let all: BTreeSet<ParamId> = model.store.ids().collect();
    let mut rng = rng::stream(0, streams::DROP_PATH);
    let (mut loss, mut hits) = (0.0, 0usize);
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let mut tape = Tape::with_frozen(all.clone());
        let logits = model.forward(&mut tape, &images, false, &mut rng)?;
        let l = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(l).data()[0].as_f64() * chunk.len() as f64;
        hits += argmax_hits(tape.value(logits), &labels);
    }
    Ok(EvalMetrics {
        loss: loss / data.len() as f64,
        accuracy: hits as f64 / data.len() as f64,
    })
}

/// Fine-tunes `model` in place with AdamW and a per-step cosine schedule.
///
/// Shuffling and drop-path draws come from separate streams of
/// `config.seed`, so runs are bit-reproducible. Parameters outside the
/// policy's trainable set enter the tape as constants and are never
/// written.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    eval_set: Option<&Dataset<T>>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::Index(format!(
            "label {bad} with {} classes",
            model.config.classes
        )));
    }
    model.set_drop_path_rate(config.drop_path_rate)?;
    let trainable = select_trainable(model, config.policy);
    let frozen: BTreeSet<ParamId> = model.store.ids().filter(|id| !trainable.contains(id)).collect();

    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1) as u64;
    let mut shuffle_rng = rng::stream(config.seed, streams::SHUFFLE);
    let mut drop_rng = rng::stream(config.seed, streams::DROP_PATH);
    let mut state = OptimizerState::new(config.adamw());
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut lr = config.lr_init;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = train_set.batch(chunk)?;
            let mut tape = Tape::with_frozen(frozen.clone());
            let logits = model.forward(&mut tape, &images, true, &mut drop_rng)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
            hits += argmax_hits(tape.value(logits), &labels);
            let grads = tape.backward(loss)?;
            let updates: Vec<(ParamId, &Tensor<T>)> = trainable
                .iter()
                .filter_map(|&id| grads.param(id).map(|g| (id, g)))
                .collect();
            lr = cosine_lr(state.step, total_steps, config.lr_init, config.lr_final)?;
            adamw_step(&mut model.store, &updates, &mut state, lr)?;
        }
        let eval = eval_set
            .map(|d| evaluate(model, d, config.batch_size.max(64)))
            .transpose()?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: hits as f64 / n as f64,
            eval_loss: eval.map(|e| e.loss),
            eval_acc: eval.map(|e| e.accuracy),
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {} loss {:.4} acc {:.3}",
            epoch + 1,
            loss_sum / n as f64,
            hits as f64 / n as f64
        );
    }
    Ok(TrainReport {
        epochs: records,
        steps: state.step,
    })
}
