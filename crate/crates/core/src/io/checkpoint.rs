//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCNT" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! tensor_count u64
//! per tensor: name_len u32 | name | dtype u8 | ndim u32 | dims u64… | values
//! ```
//!
//! Each parameter storage is written once. Layer instances refer to
//! storages by index in the metadata, so aliasing survives a round trip.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expansion::{ExpandedModel, ExpansionInfo};
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{Block, Linear, Model, Norm, ViTConfig};

use super::write_atomic;

pub const MAGIC: &[u8; 4] = b"SCNT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ViTConfig,
    /// Storage table in tensor order; handles below index into it.
    params: Vec<ParamEntry>,
    patch_embed: Linear,
    pos_embed: ParamId,
    cls_token: ParamId,
    blocks: Vec<Block>,
    head_norm: Norm,
    head: Linear,
    /// Layer instances reading the same backbone storage.
    shared_groups: Vec<Vec<usize>>,
    expansion: Option<ExpansionInfo>,
}

/// What a checkpoint file held.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel<T> {
    Base(Model<T>),
    Expanded(ExpandedModel<T>),
}

impl<T: Scalar> LoadedModel<T> {
    pub fn model(&self) -> &Model<T> {
        match self {
            LoadedModel::Base(m) => m,
            LoadedModel::Expanded(e) => &e.model,
        }
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        match self {
            LoadedModel::Base(m) => m,
            LoadedModel::Expanded(e) => &mut e.model,
        }
    }

    pub fn into_model(self) -> Model<T> {
        match self {
            LoadedModel::Base(m) => m,
            LoadedModel::Expanded(e) => e.model,
        }
    }

    pub fn expansion(&self) -> Option<&ExpansionInfo> {
        match self {
            LoadedModel::Base(_) => None,
            LoadedModel::Expanded(e) => Some(&e.info),
        }
    }
}

fn shared_groups<T: Scalar>(model: &Model<T>) -> Vec<Vec<usize>> {
    let mut groups: Vec<(ParamId, Vec<usize>)> = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == b.qkv.weight) {
            Some((_, members)) => members.push(i),
            None => groups.push((b.qkv.weight, vec![i])),
        }
    }
    groups.into_iter().filter(|(_, m)| m.len() > 1).map(|(_, m)| m).collect()
}

/// Serializes a model to checkpoint bytes; values are stored as f32.
pub fn encode<T: Scalar>(model: &Model<T>, expansion: Option<&ExpansionInfo>) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: model.config.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                role: p.role,
            })
            .collect(),
        patch_embed: model.patch_embed,
        pos_embed: model.pos_embed,
        cls_token: model.cls_token,
        blocks: model.blocks.clone(),
        head_norm: model.head_norm,
        head: model.head,
        shared_groups: shared_groups(model),
        expansion: expansion.cloned(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(json.len() + 4 * model.store.element_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, expansion: Option<&ExpansionInfo>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, expansion)?)
}

pub fn save_expanded<T: Scalar>(model: &ExpandedModel<T>, path: &Path) -> Result<()> {
    save_checkpoint(&model.model, Some(&model.info), path)
}

pub fn save_loaded<T: Scalar>(model: &LoadedModel<T>, path: &Path) -> Result<()> {
    save_checkpoint(model.model(), model.expansion(), path)
}

struct Reader<'a> {
    cursor: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.cursor.get_ref().len() as u64 - self.cursor.position();
        if n as u64 > remaining {
            return Err(Error::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "checkpoint is truncated"),
            ));
        }
        let mut buf = vec![0; n];
        self.cursor.read_exact(&mut buf).map_err(|e| Error::io(self.path, e))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }
}

fn check_handle(id: ParamId, count: usize, what: &str) -> Result<()> {
    if id.0 >= count {
        return Err(Error::Format(format!("{what} refers to missing tensor {}", id.0)));
    }
    Ok(())
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<LoadedModel<T>> {
    let mut r = Reader {
        cursor: Cursor::new(bytes),
        path,
    };
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    r.array::<4>()?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.len("metadata")?;
    let meta: Metadata = serde_json::from_slice(&r.bytes(meta_len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    meta.config.validate()?;

    let count = r.len("tensor count")?;
    if count != meta.params.len() {
        return Err(Error::Format(format!(
            "metadata lists {} tensors, file holds {count}",
            meta.params.len()
        )));
    }
    let mut store = ParamStore::new();
    for entry in &meta.params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != entry.name {
            return Err(Error::Format(format!("tensor {name:?} where metadata expects {:?}", entry.name)));
        }
        let dtype = r.array::<1>()?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name:?} has unsupported dtype tag {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
        let raw = r.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        store.insert(name, entry.role, tensor)?;
    }
    if r.cursor.position() != bytes.len() as u64 {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }

    let model = Model {
        config: meta.config,
        store,
        patch_embed: meta.patch_embed,
        pos_embed: meta.pos_embed,
        cls_token: meta.cls_token,
        blocks: meta.blocks,
        head_norm: meta.head_norm,
        head: meta.head,
    };
    if model.blocks.len() != model.config.depth {
        return Err(Error::Format(format!(
            "{} blocks for configured depth {}",
            model.blocks.len(),
            model.config.depth
        )));
    }
    let uses = model.param_uses();
    for &id in &uses {
        check_handle(id, count, "layer table")?;
    }
    let used: BTreeSet<ParamId> = uses.into_iter().collect();
    if used.len() != count {
        return Err(Error::Format("checkpoint holds tensors no layer refers to".into()));
    }
    if shared_groups(&model) != meta.shared_groups {
        return Err(Error::Format("shared-layer groups disagree with the layer table".into()));
    }
    Ok(match meta.expansion {
        None => LoadedModel::Base(model),
        Some(info) => LoadedModel::Expanded(ExpandedModel { model, info }),
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// SHA-256 of a tensor's little-endian bytes, hex encoded.
pub fn tensor_checksum<T: Scalar>(tensor: &Tensor<T>) -> String {
    hex::encode(Sha256::digest(tensor.to_le_bytes()))
}

/// One checksum over every distinct attention, MLP and embedding storage.
pub fn backbone_checksum<T: Scalar>(model: &Model<T>) -> String {
    let mut hasher = Sha256::new();
    for (_, p) in model.store.iter() {
        if p.role.is_block_backbone() || p.role.is_embedding() {
            hasher.update(p.name.as_bytes());
            hasher.update(p.tensor.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
