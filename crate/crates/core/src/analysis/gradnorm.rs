use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Model;

/// Gradient l2 norm per independent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormProfile {
    /// `source:<i>` for layers derived from pretrained layer `i`,
    /// `fresh:<position>` for unmapped layers.
    pub layers: Vec<String>,
    pub norms: Vec<f64>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Group {
    Source(usize),
    Fresh(usize),
}

/// One backward pass of the cross-entropy loss, then for each pretrained
/// source layer the norm of its concatenated attention and MLP gradients.
///
/// Instances mapped to the same source are summed role by role over the
/// distinct storages they read. A shared source therefore reports its
/// accumulated gradient, and an unshared copy reports the sum of its
/// instances' gradients.
pub fn grad_norm_profile<T: Scalar>(model: &Model<T>, images: &Tensor<T>, labels: &[usize]) -> Result<GradNormProfile> {
    if labels.is_empty() {
        return Err(Error::contract("gradient profile needs a non-empty batch"));
    }
    let mut tape = Tape::new();
    let mut rng = rng::stream(0, streams::DROP_PATH);
    let logits = model.forward(&mut tape, images, false, &mut rng)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;

    let mut groups: Vec<(Group, Vec<usize>)> = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let key = block.source.map_or(Group::Fresh(i), Group::Source);
        match groups.iter_mut().find(|(g, _)| *g == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.sort_by_key(|(g, _)| *g);

    let mut layers = Vec::with_capacity(groups.len());
    let mut norms = Vec::with_capacity(groups.len());
    for (group, members) in groups {
        let mut total = 0.0;
        for role in 0..8 {
            let mut ids: Vec<ParamId> = members.iter().map(|&i| model.blocks[i].backbone_params()[role]).collect();
            ids.sort();
            ids.dedup();
            let len = model.store.tensor(ids[0]).len();
            let mut summed = vec![0.0f64; len];
            for id in ids {
                if let Some(g) = grads.param(id) {
                    for (s, v) in summed.iter_mut().zip(g.data()) {
                        *s += v.as_f64();
                    }
                }
            }
            total += summed.iter().map(|v| v * v).sum::<f64>();
        }
        layers.push(match group {
            Group::Source(s) => format!("source:{s}"),
            Group::Fresh(p) => format!("fresh:{p}"),
        });
        norms.push(total.sqrt());
    }
    Ok(GradNormProfile {
        layers,
        norms,
        batch_size: labels.len(),
    })
}
