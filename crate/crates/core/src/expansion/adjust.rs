//! Per-instance adjustment modules on linear layers.
//!
//! Both kinds add a rank-`r` branch next to a (possibly shared) host weight:
//! LoRA computes `x·W + (x·Aᵀ)·Bᵀ`, the parallel adapter
//! `x·W + relu(x·Aᵀ)·Bᵀ`. `A` is `[r, in]`, `B` is `[out, r]` and starts at
//! zero, so a freshly attached module leaves the host output unchanged.
//! The low-rank product is never folded into `W`; under sharing it could
//! not be.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Role};
use crate::rng::{self, SeededRng};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Linear;

const ADJUST_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustKind {
    Lora,
    #[serde(alias = "adapter")]
    ParallelAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustConfig {
    pub kind: AdjustKind,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustmentModule {
    pub kind: AdjustKind,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl AdjustmentModule {
    /// Registers `A` (truncated normal) and `B` (zeros) for a host mapping
    /// `fan_in → fan_out`.
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: AdjustConfig,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let r = config.rank;
        if r == 0 || r > fan_in.min(fan_out) {
            return Err(Error::contract(format!(
                "adjustment rank {r} must lie in [1, {}]",
                fan_in.min(fan_out)
            )));
        }
        let a = rng::truncated_normal_tensor(rng, vec![r, fan_in], ADJUST_INIT_STD);
        let a = store.insert(format!("{prefix}.a"), Role::AdjustA, a)?;
        let b = store.insert(format!("{prefix}.b"), Role::AdjustB, Tensor::zeros(vec![fan_out, r]))?;
        Ok(Self {
            kind: config.kind,
            a,
            b,
            rank: r,
        })
    }
}

fn check_shapes<T: Scalar>(tape: &Tape<T>, x: Var, weight: Var, a: Var, b: Var) -> Result<()> {
    let (sw, sa, sb) = (tape.shape(weight), tape.shape(a), tape.shape(b));
    let k = tape.value(x).last_dim();
    let ok = sw.len() == 2
        && sa.len() == 2
        && sb.len() == 2
        && sw[0] == k
        && sa[1] == k
        && sb[0] == sw[1]
        && sb[1] == sa[0];
    if ok {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "adjusted linear with input width {k}, weight {sw:?}, A {sa:?}, B {sb:?}"
        )))
    }
}

fn flatten<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(x).to_vec();
    let k = *shape.last().expect("tensors have at least one axis");
    let rows = tape.value(x).len() / k;
    Ok((tape.reshape(x, vec![rows, k])?, shape))
}

fn finish<T: Scalar>(
    tape: &mut Tape<T>,
    y: Var,
    bias: Option<Var>,
    mut shape: Vec<usize>,
) -> Result<Var> {
    let y = match bias {
        Some(b) => tape.add_broadcast(y, b)?,
        None => y,
    };
    let out = tape.shape(y)[1];
    *shape.last_mut().expect("non-empty shape") = out;
    tape.reshape(y, shape)
}

fn branch<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    nonlinear: bool,
) -> Result<Var> {
    check_shapes(tape, x, weight, a, b)?;
    let (x2, shape) = flatten(tape, x)?;
    let base = tape.matmul(x2, weight)?;
    let down = tape.matmul_t(x2, false, a, true)?;
    let down = if nonlinear { tape.relu(down) } else { down };
    let up = tape.matmul_t(down, false, b, true)?;
    let y = tape.add(base, up)?;
    finish(tape, y, bias, shape)
}

/// `x·W + (x·Aᵀ)·Bᵀ + bias`, evaluated in factored form.
pub fn lora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
) -> Result<Var> {
    branch(tape, x, weight, bias, a, b, false)
}

/// `x·W + relu(x·Aᵀ)·Bᵀ + bias`.
pub fn adapter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
) -> Result<Var> {
    branch(tape, x, weight, bias, a, b, true)
}

/// Host linear on `[rows, in]` input, with an optional adjustment branch.
pub(crate) fn adjusted_linear<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    host: &Linear,
    adjust: Option<&AdjustmentModule>,
) -> Result<Var> {
    let w = tape.param(store, host.weight);
    let bias = tape.param(store, host.bias);
    match adjust {
        None => {
            let (x2, shape) = flatten(tape, x)?;
            let y = tape.matmul(x2, w)?;
            finish(tape, y, Some(bias), shape)
        }
        Some(adj) => {
            let a = tape.param(store, adj.a);
            let b = tape.param(store, adj.b);
            match adj.kind {
                AdjustKind::Lora => lora_forward(tape, x, w, Some(bias), a, b),
                AdjustKind::ParallelAdapter => adapter_forward(tape, x, w, Some(bias), a, b),
            }
        }
    }
}
