//! Parameter counting for plain and weight-shared models.

use std::collections::BTreeSet;

use crate::params::{ParamId, Role};
use crate::tensor::Scalar;
use crate::vit::Model;

/// Which parameters a count covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    All,
    /// Weight matrices of the MLP linears that carry adjustment modules,
    /// plus the adjustment factors themselves. Biases, norms, attention
    /// and embeddings are excluded.
    AdjustedLinears,
    /// Weight matrices of the MLP linears alone.
    MlpWeights,
}

impl ParamScope {
    fn admits(self, role: Role) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::AdjustedLinears => matches!(
                role,
                Role::Fc1Weight | Role::Fc2Weight | Role::AdjustA | Role::AdjustB
            ),
            ParamScope::MlpWeights => matches!(role, Role::Fc1Weight | Role::Fc2Weight),
        }
    }
}

/// Scalars in `model`. With `unique`, aliased storage counts once;
/// otherwise every layer instance counts what it reads.
pub fn count_parameters<T: Scalar>(model: &Model<T>, unique: bool) -> usize {
    count_parameters_in(model, unique, ParamScope::All)
}

pub fn count_parameters_in<T: Scalar>(model: &Model<T>, unique: bool, scope: ParamScope) -> usize {
    let uses = model.param_uses();
    let size = |id: &ParamId| {
        let p = model.store.get(*id);
        if scope.admits(p.role) {
            p.tensor.len()
        } else {
            0
        }
    };
    if unique {
        uses.iter().collect::<BTreeSet<_>>().into_iter().map(size).sum()
    } else {
        uses.iter().map(size).sum()
    }
}

/// `(L·n·d² + 4·L·n·r·d) / (2·L·n·d²)` as an exact numerator/denominator
/// pair.
///
/// Ratio of unique block-linear parameters in a 2× shared expansion with
/// rank-`r` adjustments on each of `n` square `d×d` linears per layer, to
/// an unshared 2× expansion without adjustments.
pub fn parameter_fraction_exact(depth: u64, linears: u64, dim: u64, rank: u64) -> (u128, u128) {
    let (l, n, d, r) = (depth as u128, linears as u128, dim as u128, rank as u128);
    (l * n * d * d + 4 * l * n * r * d, 2 * l * n * d * d)
}

/// [`parameter_fraction_exact`] as a real; equals `(d + 4r) / (2d)`.
///
/// Counts block linear weights only: biases, norms and embeddings are
/// outside the formula.
pub fn parameter_fraction(depth: u64, linears: u64, dim: u64, rank: u64) -> f64 {
    let (num, den) = parameter_fraction_exact(depth, linears, dim, rank);
    num as f64 / den as f64
}
