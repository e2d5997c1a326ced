use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::expansion::adjust::{adjusted_linear, AdjustmentModule};
use crate::params::{ParamId, ParamStore, Role};
use crate::rng::{self, SeededRng};
use crate::tensor::{Scalar, Tensor};

use super::config::{drop_path_schedule, ViTConfig};
use super::drop_path::drop_path;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Weight `[in, out]` and bias `[out]`; computes `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// One pre-norm transformer layer instance.
///
/// `source` names the pretrained layer this instance was derived from, or
/// `None` for freshly initialized layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc1_adjust: Option<AdjustmentModule>,
    pub fc2_adjust: Option<AdjustmentModule>,
    pub drop_path_prob: f64,
    pub source: Option<usize>,
}

impl Block {
    /// Attention and MLP parameter handles, in a fixed role order.
    pub fn backbone_params(&self) -> [ParamId; 8] {
        [
            self.qkv.weight,
            self.qkv.bias,
            self.proj.weight,
            self.proj.bias,
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }

    pub fn norm_params(&self) -> [ParamId; 4] {
        [self.ln1.gamma, self.ln1.beta, self.ln2.gamma, self.ln2.beta]
    }

    pub fn adjust_params(&self) -> Vec<ParamId> {
        [self.fc1_adjust, self.fc2_adjust]
            .iter()
            .flatten()
            .flat_map(|a| [a.a, a.b])
            .collect()
    }

    /// Every parameter this instance reads, aliases included.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.backbone_params().to_vec();
        out.extend(self.norm_params());
        out.extend(self.adjust_params());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ViTConfig,
    pub store: ParamStore<T>,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub cls_token: ParamId,
    pub blocks: Vec<Block>,
    pub head_norm: Norm,
    pub head: Linear,
}

/// Outputs of a forward pass that also keeps per-block activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Residual stream after each block, `[batch, tokens, dim]`.
    pub block_outputs: Vec<Var>,
}

/// Splits `[batch, channels, S, S]` images into flattened non-overlapping
/// patches `[batch·patches, channels·p·p]`, patches in row-major grid order
/// and each patch flattened channel, row, column.
pub fn patchify<T: Scalar>(images: &Tensor<T>, config: &ViTConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let size = config.image_size;
    if s.len() != 4 || s[1] != config.channels || s[2] != size || s[3] != size {
        return Err(Error::dim(format!(
            "images {s:?} do not match [batch, {}, {size}, {size}]",
            config.channels
        )));
    }
    let (batch, ch, p) = (s[0], config.channels, config.patch_size);
    let grid = config.patches_per_side();
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..ch {
                    for i in 0..p {
                        let row = ((b * ch + c) * size + gy * p + i) * size + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * grid * grid, config.patch_dim()], out)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, lin: &Linear) -> Result<Var> {
    adjusted_linear(tape, store, x, lin, None)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, n: &Norm) -> Result<Var> {
    let g = tape.param(store, n.gamma);
    let b = tape.param(store, n.beta);
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

impl<T: Scalar> Model<T> {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Patch projection, class token and positional embedding: `[batch, tokens, dim]`.
    pub fn embed(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let patches = patchify(images, cfg)?;
        let batch = images.shape()[0];
        let x = tape.constant(patches);
        let tokens = linear(tape, &self.store, x, &self.patch_embed)?;
        let tokens = tape.reshape(tokens, vec![batch, cfg.num_patches(), cfg.dim])?;
        let cls = tape.param(&self.store, self.cls_token);
        let seq = tape.prepend_token(tokens, cls)?;
        let pos = tape.param(&self.store, self.pos_embed);
        tape.add_broadcast(seq, pos)
    }

    /// `x + MSA(LN(x))` then `x + MLP(LN(x))`, each branch passed through
    /// drop path when training.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        block: &Block,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.dim {
            return Err(Error::dim(format!("block input {shape:?} has wrong width")));
        }
        let (batch, tokens, dim) = (shape[0], shape[1], shape[2]);
        let (heads, head_dim) = (cfg.heads, cfg.head_dim());
        let rows = batch * tokens;
        let store = &self.store;

        let h = norm(tape, store, x, &block.ln1)?;
        let h = tape.reshape(h, vec![rows, dim])?;
        let qkv = linear(tape, store, h, &block.qkv)?;
        let qkv = tape.reshape(qkv, vec![batch, tokens, 3, heads, head_dim])?;
        let qkv = tape.permute(qkv, vec![2, 0, 3, 1, 4])?;
        let groups = batch * heads;
        let qkv = tape.reshape(qkv, vec![3 * groups, tokens, head_dim])?;
        let q = tape.slice_rows(qkv, 0, groups)?;
        let k = tape.slice_rows(qkv, groups, groups)?;
        let v = tape.slice_rows(qkv, 2 * groups, groups)?;
        let scores = tape.batch_matmul(q, false, k, true)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / (head_dim as f64).sqrt()));
        let attn = tape.softmax(scores);
        let ctx = tape.batch_matmul(attn, false, v, false)?;
        let ctx = tape.reshape(ctx, vec![batch, heads, tokens, head_dim])?;
        let ctx = tape.permute(ctx, vec![0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![rows, dim])?;
        let out = linear(tape, store, ctx, &block.proj)?;
        let out = tape.reshape(out, vec![batch, tokens, dim])?;
        let out = drop_path(tape, out, block.drop_path_prob, training, rng)?;
        let x = tape.add(x, out)?;

        let h = norm(tape, store, x, &block.ln2)?;
        let h = tape.reshape(h, vec![rows, dim])?;
        let h = adjusted_linear(tape, store, h, &block.fc1, block.fc1_adjust.as_ref())?;
        let h = tape.gelu(h);
        let h = adjusted_linear(tape, store, h, &block.fc2, block.fc2_adjust.as_ref())?;
        let h = tape.reshape(h, vec![batch, tokens, dim])?;
        let h = drop_path(tape, h, block.drop_path_prob, training, rng)?;
        tape.add(x, h)
    }

    /// Logits from the class token after the final norm.
    pub fn head_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let cls = tape.select_token(x, 0)?;
        let cls = norm(tape, &self.store, cls, &self.head_norm)?;
        linear(tape, &self.store, cls, &self.head)
    }

    pub fn forward_trace(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<ForwardTrace> {
        let mut x = self.embed(tape, images)?;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = self.block_forward(tape, x, block, training, rng)?;
            block_outputs.push(x);
        }
        let logits = self.head_forward(tape, x)?;
        Ok(ForwardTrace {
            logits,
            block_outputs,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        Ok(self.forward_trace(tape, images, training, rng)?.logits)
    }

    /// Inference-mode logits `[batch, classes]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut rng = rng::stream(0, rng::streams::DROP_PATH);
        let logits = self.forward(&mut tape, images, false, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Reassigns per-block drop-path probabilities linearly up to `rate`.
    pub fn set_drop_path_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("drop path rate {rate} outside [0, 1)")));
        }
        self.config.drop_path_rate = rate;
        let schedule = drop_path_schedule(rate, self.blocks.len());
        for (block, p) in self.blocks.iter_mut().zip(schedule) {
            block.drop_path_prob = p;
        }
        Ok(())
    }

    /// Parameter handles outside the blocks.
    pub fn global_params(&self) -> Vec<ParamId> {
        vec![
            self.patch_embed.weight,
            self.patch_embed.bias,
            self.pos_embed,
            self.cls_token,
            self.head_norm.gamma,
            self.head_norm.beta,
            self.head.weight,
            self.head.bias,
        ]
    }

    /// Every parameter reference in forward order, repeated once per use.
    pub fn param_uses(&self) -> Vec<ParamId> {
        let mut uses = self.global_params();
        for block in &self.blocks {
            uses.extend(block.params());
        }
        uses
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            patch_embed: self.patch_embed,
            pos_embed: self.pos_embed,
            cls_token: self.cls_token,
            blocks: self.blocks.clone(),
            head_norm: self.head_norm,
            head: self.head,
        }
    }
}

pub(crate) struct BlockInit<'a> {
    pub prefix: &'a str,
    pub dim: usize,
    pub hidden: usize,
}

/// Fresh block parameters: truncated-normal weights, zero biases, unit norms.
pub(crate) fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    spec: BlockInit<'_>,
    rng: &mut SeededRng,
) -> Result<Block> {
    let BlockInit { prefix, dim, hidden } = spec;
    let ln1 = init_norm(store, &format!("{prefix}.ln1"), dim)?;
    let qkv = init_linear(store, &format!("{prefix}.qkv"), dim, 3 * dim, Role::QkvWeight, Role::QkvBias, rng)?;
    let proj = init_linear(store, &format!("{prefix}.proj"), dim, dim, Role::ProjWeight, Role::ProjBias, rng)?;
    let ln2 = init_norm(store, &format!("{prefix}.ln2"), dim)?;
    let fc1 = init_linear(store, &format!("{prefix}.fc1"), dim, hidden, Role::Fc1Weight, Role::Fc1Bias, rng)?;
    let fc2 = init_linear(store, &format!("{prefix}.fc2"), hidden, dim, Role::Fc2Weight, Role::Fc2Bias, rng)?;
    Ok(Block {
        ln1,
        qkv,
        proj,
        ln2,
        fc1,
        fc2,
        fc1_adjust: None,
        fc2_adjust: None,
        drop_path_prob: 0.0,
        source: None,
    })
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: store.insert(format!("{prefix}.gamma"), Role::NormGamma, Tensor::ones(vec![dim]))?,
        beta: store.insert(format!("{prefix}.beta"), Role::NormBeta, Tensor::zeros(vec![dim]))?,
    })
}

pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    weight_role: Role,
    bias_role: Role,
    rng: &mut SeededRng,
) -> Result<Linear> {
    let w = rng::truncated_normal_tensor(rng, vec![fan_in, fan_out], INIT_STD);
    Ok(Linear {
        weight: store.insert(format!("{prefix}.weight"), weight_role, w)?,
        bias: store.insert(format!("{prefix}.bias"), bias_role, Tensor::zeros(vec![fan_out]))?,
    })
}

/// Randomly initialized model; identical seeds give identical models.
pub fn init_model<T: Scalar>(config: &ViTConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::streams::INIT);
    let mut store = ParamStore::new();
    let d = config.dim;
    let patch_embed = init_linear(
        &mut store,
        "patch_embed",
        config.patch_dim(),
        d,
        Role::PatchWeight,
        Role::PatchBias,
        &mut rng,
    )?;
    let pos = rng::truncated_normal_tensor(&mut rng, vec![config.tokens(), d], INIT_STD);
    let pos_embed = store.insert("pos_embed", Role::PosEmbed, pos)?;
    let cls = rng::truncated_normal_tensor(&mut rng, vec![1, d], INIT_STD);
    let cls_token = store.insert("cls_token", Role::ClsToken, cls)?;
    let schedule = drop_path_schedule(config.drop_path_rate, config.depth);
    let mut blocks = Vec::with_capacity(config.depth);
    for (i, p) in schedule.into_iter().enumerate() {
        let prefix = format!("blocks.{i}");
        let spec = BlockInit {
            prefix: &prefix,
            dim: d,
            hidden: config.hidden_dim(),
        };
        let mut block = init_block(&mut store, spec, &mut rng)?;
        block.drop_path_prob = p;
        block.source = Some(i);
        blocks.push(block);
    }
    let head_norm = init_norm(&mut store, "head_norm", d)?;
    let head = init_linear(
        &mut store,
        "head",
        d,
        config.classes,
        Role::HeadWeight,
        Role::HeadBias,
        &mut rng,
    )?;
    Ok(Model {
        config: config.clone(),
        store,
        patch_embed,
        pos_embed,
        cls_token,
        blocks,
        head_norm,
        head,
    })
}
