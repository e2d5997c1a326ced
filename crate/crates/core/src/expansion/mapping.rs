//! Layer mapping from expanded depth to pretrained source layers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Identity,
    Stack,
    Interpolate,
    Cyclic,
    #[serde(alias = "random")]
    RandomInit,
    Swa,
}

impl MappingKind {
    /// Kinds whose new layers have no single source and are never shared.
    pub fn is_fresh(self) -> bool {
        matches!(self, MappingKind::RandomInit | MappingKind::Swa)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "stack" => Self::Stack,
            "interpolate" => Self::Interpolate,
            "cyclic" => Self::Cyclic,
            "random" | "random_init" => Self::RandomInit,
            "swa" => Self::Swa,
            other => return Err(Error::Config(format!("unknown mapping strategy {other:?}"))),
        })
    }
}

/// Physical layer order of an expanded model.
///
/// Entry `i` is the pretrained layer that position `i` is derived from, or
/// `None` for a freshly initialized layer. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pub kind: MappingKind,
    pub base_depth: usize,
    pub table: Vec<Option<usize>>,
}

/// Builds the mapping for growing `base_depth` layers to `target_depth`.
///
/// Stack and cyclic keep the originals in place and append `l' mod L`
/// after them; interpolation places `⌊l'·L/L'⌋` so duplicates sit beside
/// their sources. Random and SWA append unmapped layers.
pub fn build_mapping(kind: MappingKind, base_depth: usize, target_depth: usize) -> Result<LayerMapping> {
    if base_depth == 0 {
        return Err(Error::contract("cannot expand a model without layers"));
    }
    if target_depth < base_depth {
        return Err(Error::contract(format!(
            "target depth {target_depth} is below pretrained depth {base_depth}"
        )));
    }
    let (l, lt) = (base_depth, target_depth);
    let table = match kind {
        MappingKind::Identity => {
            if lt != l {
                return Err(Error::contract("identity mapping keeps the depth unchanged"));
            }
            (0..l).map(Some).collect()
        }
        MappingKind::Stack | MappingKind::Cyclic => (0..lt).map(|i| Some(i % l)).collect(),
        MappingKind::Interpolate => (0..lt).map(|i| Some(i * l / lt)).collect(),
        MappingKind::RandomInit | MappingKind::Swa => {
            (0..lt).map(|i| if i < l { Some(i) } else { None }).collect()
        }
    };
    Ok(LayerMapping {
        kind,
        base_depth,
        table,
    })
}

impl LayerMapping {
    pub fn target_depth(&self) -> usize {
        self.table.len()
    }

    /// Positions holding the first occurrence of each pretrained layer.
    pub fn originals(&self) -> Vec<bool> {
        let mut seen = BTreeSet::new();
        self.table
            .iter()
            .map(|s| matches!(s, Some(s) if seen.insert(*s)))
            .collect()
    }

    /// Drops duplicated layers whose nominal source is outside `subset`.
    ///
    /// Originals always stay. Fresh layers (random/SWA) are matched against
    /// the cyclic source their position would have had.
    pub fn restrict(&self, subset: &BTreeSet<usize>) -> Result<LayerMapping> {
        if let Some(&bad) = subset.iter().find(|&&s| s >= self.base_depth) {
            return Err(Error::contract(format!(
                "shared-layer subset index {bad} outside pretrained depth {}",
                self.base_depth
            )));
        }
        let originals = self.originals();
        let table = self
            .table
            .iter()
            .enumerate()
            .filter(|&(i, s)| {
                originals[i] || subset.contains(&s.unwrap_or(i % self.base_depth))
            })
            .map(|(_, &s)| s)
            .collect();
        Ok(LayerMapping {
            kind: self.kind,
            base_depth: self.base_depth,
            table,
        })
    }

    /// JSON array of 0-based indices, `-1` marking unmapped layers.
    pub fn to_json(&self) -> String {
        let v: Vec<i64> = self.table.iter().map(|s| s.map_or(-1, |s| s as i64)).collect();
        serde_json::to_string(&v).expect("integer arrays always serialize")
    }

    pub fn table_from_json(json: &str) -> Result<Vec<Option<usize>>> {
        let v: Vec<i64> = serde_json::from_str(json)?;
        v.into_iter()
            .map(|i| match i {
                -1 => Ok(None),
                i if i >= 0 => Ok(Some(i as usize)),
                i => Err(Error::Format(format!("invalid mapping entry {i}"))),
            })
            .collect()
    }

    /// Occurrences of each pretrained layer in the table.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.base_depth];
        for s in self.table.iter().flatten() {
            counts[*s] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain(m: &LayerMapping) -> Vec<usize> {
        m.table.iter().map(|s| s.unwrap()).collect()
    }

    #[test]
    fn documented_tables() {
        assert_eq!(plain(&build_mapping(MappingKind::Cyclic, 3, 6).unwrap()), [0, 1, 2, 0, 1, 2]);
        assert_eq!(plain(&build_mapping(MappingKind::Stack, 3, 6).unwrap()), [0, 1, 2, 0, 1, 2]);
        assert_eq!(plain(&build_mapping(MappingKind::Interpolate, 3, 6).unwrap()), [0, 0, 1, 1, 2, 2]);
        assert_eq!(plain(&build_mapping(MappingKind::Identity, 4, 4).unwrap()), [0, 1, 2, 3]);
        assert_eq!(plain(&build_mapping(MappingKind::Cyclic, 3, 5).unwrap()), [0, 1, 2, 0, 1]);
    }

    #[test]
    fn shrinking_is_rejected() {
        assert!(matches!(build_mapping(MappingKind::Cyclic, 4, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_kinds_leave_new_layers_unmapped() {
        let m = build_mapping(MappingKind::RandomInit, 2, 4).unwrap();
        assert_eq!(m.table, [Some(0), Some(1), None, None]);
        assert_eq!(m.to_json(), "[0,1,-1,-1]");
        assert_eq!(LayerMapping::table_from_json("[0,1,-1,-1]").unwrap(), m.table);
    }

    #[test]
    fn subset_keeps_originals_and_chosen_duplicates() {
        let subset: BTreeSet<usize> = [2, 3].into();
        let cyc = build_mapping(MappingKind::Cyclic, 4, 8).unwrap().restrict(&subset).unwrap();
        assert_eq!(plain(&cyc), [0, 1, 2, 3, 2, 3]);
        let int = build_mapping(MappingKind::Interpolate, 4, 8).unwrap().restrict(&subset).unwrap();
        assert_eq!(plain(&int), [0, 1, 2, 2, 3, 3]);
        let bad: BTreeSet<usize> = [4].into();
        assert!(build_mapping(MappingKind::Cyclic, 4, 8).unwrap().restrict(&bad).is_err());
    }

    proptest! {
        #[test]
        fn integer_scales_are_surjective(l in 1usize..10, k in 1usize..5) {
            for kind in [MappingKind::Stack, MappingKind::Cyclic, MappingKind::Interpolate] {
                let m = build_mapping(kind, l, k * l).unwrap();
                prop_assert!(m.multiplicity().iter().all(|&c| c == k));
                // originals keep their own index
                for (i, &orig) in m.originals().iter().enumerate() {
                    if orig && kind != MappingKind::Interpolate {
                        prop_assert_eq!(m.table[i], Some(i));
                    }
                }
            }
        }

        #[test]
        fn interpolation_is_monotone(l in 1usize..10, extra in 0usize..20) {
            let m = build_mapping(MappingKind::Interpolate, l, l + extra).unwrap();
            let t = plain(&m);
            prop_assert!(t.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
            prop_assert!(m.multiplicity().iter().all(|&c| c >= 1));
        }
    }
}
