use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::Scalar;
use crate::vit::{drop_path_schedule, init_block, Block, BlockInit, Linear, Model, Norm};

use super::adjust::{AdjustConfig, AdjustmentModule};
use super::mapping::LayerMapping;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpandOptions {
    /// Alias mapped layers to their source storage instead of copying.
    pub share: bool,
    pub adjust: Option<AdjustConfig>,
    /// Pretrained layers allowed to be duplicated; `None` means all.
    pub subset: Option<BTreeSet<usize>>,
    pub seed: u64,
}

/// How an expanded model was derived from its pretrained parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionInfo {
    /// Effective layer order after subset restriction.
    pub mapping: LayerMapping,
    pub share: bool,
    pub adjust: Option<AdjustConfig>,
    pub subset: Option<Vec<usize>>,
    pub seed: u64,
    /// Pretrained layers averaged into each SWA-initialized position.
    #[serde(default)]
    pub swa_pairs: Vec<Option<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedModel<T> {
    pub model: Model<T>,
    pub info: ExpansionInfo,
}

impl<T: Scalar> ExpandedModel<T> {
    /// Layer instances grouped by the distinct backbone storage they read.
    pub fn shared_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(ParamId, Vec<usize>)> = Vec::new();
        for (i, b) in self.model.blocks.iter().enumerate() {
            match groups.iter_mut().find(|(id, _)| *id == b.qkv.weight) {
                Some((_, members)) => members.push(i),
                None => groups.push((b.qkv.weight, vec![i])),
            }
        }
        groups.into_iter().map(|(_, m)| m).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ExpandedModel<U> {
        ExpandedModel {
            model: self.model.cast(),
            info: self.info.clone(),
        }
    }
}

struct Builder<'a, T> {
    src: &'a ParamStore<T>,
    dst: ParamStore<T>,
    shared: HashMap<ParamId, ParamId>,
}

impl<T: Scalar> Builder<'_, T> {
    fn copy(&mut self, id: ParamId, name: String) -> Result<ParamId> {
        let p = self.src.get(id);
        self.dst.insert(name, p.role, p.tensor.clone())
    }

    fn share_or_copy(&mut self, id: ParamId, shared_name: String, own_name: String, share: bool) -> Result<ParamId> {
        if !share {
            return self.copy(id, own_name);
        }
        if let Some(&new) = self.shared.get(&id) {
            return Ok(new);
        }
        let new = self.copy(id, shared_name)?;
        self.shared.insert(id, new);
        Ok(new)
    }

    fn linear(&mut self, lin: &Linear, shared: &str, own: &str, share: bool) -> Result<Linear> {
        Ok(Linear {
            weight: self.share_or_copy(lin.weight, format!("{shared}.weight"), format!("{own}.weight"), share)?,
            bias: self.share_or_copy(lin.bias, format!("{shared}.bias"), format!("{own}.bias"), share)?,
        })
    }

    fn norm(&mut self, n: &Norm, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gamma: self.copy(n.gamma, format!("{prefix}.gamma"))?,
            beta: self.copy(n.beta, format!("{prefix}.beta"))?,
        })
    }

    fn mapped_block(&mut self, src: &Block, source: usize, position: usize, share: bool) -> Result<Block> {
        let shared = format!("blocks.{source}");
        let own = format!("layers.{position}");
        Ok(Block {
            ln1: self.norm(&src.ln1, &format!("{own}.ln1"))?,
            qkv: self.linear(&src.qkv, &format!("{shared}.qkv"), &format!("{own}.qkv"), share)?,
            proj: self.linear(&src.proj, &format!("{shared}.proj"), &format!("{own}.proj"), share)?,
            ln2: self.norm(&src.ln2, &format!("{own}.ln2"))?,
            fc1: self.linear(&src.fc1, &format!("{shared}.fc1"), &format!("{own}.fc1"), share)?,
            fc2: self.linear(&src.fc2, &format!("{shared}.fc2"), &format!("{own}.fc2"), share)?,
            fc1_adjust: None,
            fc2_adjust: None,
            drop_path_prob: 0.0,
            source: Some(source),
        })
    }

    /// Elementwise mean of two pretrained blocks, stored under `layers.{position}`.
    fn averaged_block(&mut self, a: &Block, b: &Block, position: usize) -> Result<Block> {
        let mut ids = Vec::new();
        let names = [
            "ln1.gamma", "ln1.beta", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias",
            "ln2.gamma", "ln2.beta", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias",
        ];
        let pa = block_fields(a);
        let pb = block_fields(b);
        let half = T::from_f64(0.5);
        for ((&ia, &ib), name) in pa.iter().zip(&pb).zip(names) {
            let (ta, tb) = (self.src.get(ia), self.src.tensor(ib));
            let mut mean = ta.tensor.clone();
            for (m, &v) in mean.data_mut().iter_mut().zip(tb.data()) {
                *m = (*m + v) * half;
            }
            ids.push(self.dst.insert(format!("layers.{position}.{name}"), ta.role, mean)?);
        }
        Ok(Block {
            ln1: Norm { gamma: ids[0], beta: ids[1] },
            qkv: Linear { weight: ids[2], bias: ids[3] },
            proj: Linear { weight: ids[4], bias: ids[5] },
            ln2: Norm { gamma: ids[6], beta: ids[7] },
            fc1: Linear { weight: ids[8], bias: ids[9] },
            fc2: Linear { weight: ids[10], bias: ids[11] },
            fc1_adjust: None,
            fc2_adjust: None,
            drop_path_prob: 0.0,
            source: None,
        })
    }
}

fn block_fields(b: &Block) -> [ParamId; 12] {
    [
        b.ln1.gamma, b.ln1.beta, b.qkv.weight, b.qkv.bias, b.proj.weight, b.proj.bias,
        b.ln2.gamma, b.ln2.beta, b.fc1.weight, b.fc1.bias, b.fc2.weight, b.fc2.bias,
    ]
}

/// Grows `pretrained` to the layer order given by `mapping`.
///
/// With `share`, every instance mapped to one source reads the same
/// attention and MLP storage. Layer norms are always per-instance copies
/// and adjustment modules (zero output at construction) are attached to
/// the MLP linears of every instance when configured. Embeddings and the
/// head are copied. Random and SWA layers are never shared. Adjustment
/// modules already present on the pretrained model are not carried over.
pub fn expand_model<T: Scalar>(
    pretrained: &Model<T>,
    mapping: &LayerMapping,
    options: &ExpandOptions,
) -> Result<ExpandedModel<T>> {
    let depth = pretrained.depth();
    if mapping.base_depth != depth {
        return Err(Error::contract(format!(
            "mapping expects {} pretrained layers, model has {depth}",
            mapping.base_depth
        )));
    }
    if mapping.table.iter().flatten().any(|&s| s >= depth) {
        return Err(Error::contract("mapping references a layer beyond the pretrained depth"));
    }
    let mapping = match &options.subset {
        Some(subset) => mapping.restrict(subset)?,
        None => mapping.clone(),
    };
    let share = options.share && !mapping.kind.is_fresh();
    let cfg = &pretrained.config;

    let mut b = Builder {
        src: &pretrained.store,
        dst: ParamStore::new(),
        shared: HashMap::new(),
    };
    let patch_embed = Linear {
        weight: b.copy(pretrained.patch_embed.weight, "patch_embed.weight".into())?,
        bias: b.copy(pretrained.patch_embed.bias, "patch_embed.bias".into())?,
    };
    let pos_embed = b.copy(pretrained.pos_embed, "pos_embed".into())?;
    let cls_token = b.copy(pretrained.cls_token, "cls_token".into())?;

    let mut init_rng = rng::stream(options.seed, streams::INIT);
    let mut pick_rng = rng::stream(options.seed, streams::LAYER_SAMPLING);
    let mut adjust_rng = rng::stream(options.seed, streams::ADJUST);
    let mut blocks = Vec::with_capacity(mapping.table.len());
    let mut swa_pairs = Vec::with_capacity(mapping.table.len());
    for (pos, entry) in mapping.table.iter().enumerate() {
        let mut block = match *entry {
            Some(s) => {
                swa_pairs.push(None);
                b.mapped_block(&pretrained.blocks[s], s, pos, share)?
            }
            None if mapping.kind == super::MappingKind::Swa => {
                if depth < 2 {
                    return Err(Error::contract("SWA initialization needs at least two pretrained layers"));
                }
                let picked = sample(&mut pick_rng, depth, 2);
                let (i, j) = (picked.index(0), picked.index(1));
                swa_pairs.push(Some((i, j)));
                b.averaged_block(&pretrained.blocks[i], &pretrained.blocks[j], pos)?
            }
            None => {
                swa_pairs.push(None);
                let prefix = format!("layers.{pos}");
                let spec = BlockInit {
                    prefix: &prefix,
                    dim: cfg.dim,
                    hidden: cfg.hidden_dim(),
                };
                init_block(&mut b.dst, spec, &mut init_rng)?
            }
        };
        if let Some(adj) = options.adjust {
            let (d, h) = (cfg.dim, cfg.hidden_dim());
            block.fc1_adjust = Some(AdjustmentModule::create(
                &mut b.dst,
                &format!("layers.{pos}.fc1.adjust"),
                adj,
                d,
                h,
                &mut adjust_rng,
            )?);
            block.fc2_adjust = Some(AdjustmentModule::create(
                &mut b.dst,
                &format!("layers.{pos}.fc2.adjust"),
                adj,
                h,
                d,
                &mut adjust_rng,
            )?);
        }
        blocks.push(block);
    }
    let head_norm = b.norm(&pretrained.head_norm, "head_norm")?;
    let head = Linear {
        weight: b.copy(pretrained.head.weight, "head.weight".into())?,
        bias: b.copy(pretrained.head.bias, "head.bias".into())?,
    };

    for (block, p) in blocks.iter_mut().zip(drop_path_schedule(cfg.drop_path_rate, mapping.table.len())) {
        block.drop_path_prob = p;
    }
    let mut config = cfg.clone();
    config.depth = blocks.len();
    let info = ExpansionInfo {
        mapping,
        share,
        adjust: options.adjust,
        subset: options.subset.as_ref().map(|s| s.iter().copied().collect()),
        seed: options.seed,
        swa_pairs,
    };
    Ok(ExpandedModel {
        model: Model {
            config,
            store: b.dst,
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            head_norm,
            head,
        },
        info,
    })
}
