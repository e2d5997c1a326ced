//! Browser bindings for three small explorations: how a layer mapping
//! lays out an expanded model, what a shared expansion costs in
//! parameters, and how similar expanded layers are to their sources.
//!
//! Every export returns a JSON string. The `*_json` functions hold the
//! logic so native tests can call them without a JS host.

use std::collections::BTreeSet;

use serde_json::json;
use vitexpand::analysis::{cka_matrix, Report};
use vitexpand::expansion::{
    build_mapping, count_parameters_in, expand_model, parameter_fraction, AdjustConfig, AdjustKind, ExpandOptions,
    MappingKind, ParamScope,
};
use vitexpand::io::config::{parse_subset, target_depth};
use vitexpand::rng::{self, streams};
use vitexpand::vit::{init_model, ViTConfig};
use wasm_bindgen::prelude::*;

/// Largest width the budget view instantiates; wider models use the
/// closed form only.
pub const MAX_COUNTED_DIM: usize = 128;

type Outcome = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn subset_of(subset: &str) -> Result<Option<BTreeSet<usize>>, String> {
    let s = subset.trim();
    if s.is_empty() {
        return Ok(None);
    }
    parse_subset(s).map(Some).map_err(err)
}

fn adjust_of(kind: &str, rank: usize) -> Result<Option<AdjustConfig>, String> {
    let kind = match kind {
        "none" | "" => return Ok(None),
        "lora" => AdjustKind::Lora,
        "adapter" => AdjustKind::ParallelAdapter,
        other => return Err(format!("unknown adjustment {other:?}")),
    };
    Ok(Some(AdjustConfig { kind, rank }))
}

/// Mapping table for growing `base_depth` layers by `scale`.
///
/// `subset` is an inclusive range such as `"1..2"`, or empty for all.
pub fn mapping_json(strategy: &str, base_depth: usize, scale: f64, subset: &str) -> Outcome {
    let kind = MappingKind::parse(strategy).map_err(err)?;
    let target = target_depth(scale, base_depth).map_err(err)?;
    let mut mapping = build_mapping(kind, base_depth, target).map_err(err)?;
    if let Some(s) = subset_of(subset)? {
        mapping = mapping.restrict(&s).map_err(err)?;
    }
    let originals = mapping.originals();
    let layers: Vec<_> = mapping
        .table
        .iter()
        .zip(&originals)
        .map(|(src, &original)| {
            json!({
                "source": src,
                "original": original,
                "shareable": src.is_some() && !kind.is_fresh(),
            })
        })
        .collect();
    Ok(json!({
        "strategy": strategy,
        "base_depth": base_depth,
        "depth": mapping.target_depth(),
        "layers": layers,
    })
    .to_string())
}

/// Unique versus total parameters of a 2× cyclic expansion.
///
/// The closed form covers square block linears. For widths up to
/// [`MAX_COUNTED_DIM`] a model with `mlp_ratio` 1 is built and counted.
pub fn budget_json(depth: usize, dim: usize, rank: usize, adjust: &str) -> Outcome {
    if depth == 0 || dim == 0 {
        return Err("depth and width must be positive".into());
    }
    let closed = parameter_fraction(depth as u64, 2, dim as u64, rank as u64);
    let mut out = json!({
        "depth": depth,
        "dim": dim,
        "rank": rank,
        "closed_form": closed,
    });
    if dim <= MAX_COUNTED_DIM {
        let heads = if dim % 4 == 0 { 4 } else { 1 };
        let cfg = ViTConfig {
            depth,
            dim,
            heads,
            mlp_ratio: 1.0,
            ..ViTConfig::default()
        };
        let base = init_model::<f32>(&cfg, 0).map_err(err)?;
        let mapping = build_mapping(MappingKind::Cyclic, depth, 2 * depth).map_err(err)?;
        let count = |share: bool, adjust: Option<AdjustConfig>| -> Result<(usize, usize), String> {
            let options = ExpandOptions {
                share,
                adjust,
                ..ExpandOptions::default()
            };
            let e = expand_model(&base, &mapping, &options).map_err(err)?;
            Ok((
                count_parameters_in(&e.model, true, ParamScope::All),
                count_parameters_in(&e.model, true, ParamScope::AdjustedLinears),
            ))
        };
        let adjust = adjust_of(adjust, rank)?;
        let (shared_all, shared_linear) = count(true, adjust)?;
        let (plain_all, plain_linear) = count(false, None)?;
        out["counted"] = json!({
            "shared_unique": shared_all,
            "unshared_unique": plain_all,
            "linear_fraction": shared_linear as f64 / plain_linear as f64,
            "overall_fraction": shared_all as f64 / plain_all as f64,
        });
    }
    Ok(out.to_string())
}

/// CKA between every block of an expanded random model and every block of
/// its parent, plus the same matrix as an SVG heatmap.
pub fn cka_json(strategy: &str, scale: f64, adjust: &str, seed: u64) -> Outcome {
    let cfg = ViTConfig {
        depth: 3,
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        ..ViTConfig::default()
    };
    let kind = MappingKind::parse(strategy).map_err(err)?;
    let base = init_model::<f64>(&cfg, seed).map_err(err)?;
    let target = target_depth(scale, cfg.depth).map_err(err)?;
    let mapping = build_mapping(kind, cfg.depth, target).map_err(err)?;
    let options = ExpandOptions {
        share: !kind.is_fresh(),
        adjust: adjust_of(adjust, 4)?,
        seed,
        ..ExpandOptions::default()
    };
    let expanded = expand_model(&base, &mapping, &options).map_err(err)?;
    let mut r = rng::stream(seed, streams::NOISE);
    let shape = vec![16, cfg.channels, cfg.image_size, cfg.image_size];
    let probe = rng::truncated_normal_tensor::<f64>(&mut r, shape, 1.0);
    let matrix = cka_matrix(&expanded.model, &base, &probe).map_err(err)?;
    Ok(json!({
        "values": matrix.values,
        "sources": mapping.table,
        "svg": matrix.svg(),
    })
    .to_string())
}

fn js(result: Outcome) -> Result<String, JsValue> {
    result.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn mapping(strategy: &str, base_depth: usize, scale: f64, subset: &str) -> Result<String, JsValue> {
    js(mapping_json(strategy, base_depth, scale, subset))
}

#[wasm_bindgen]
pub fn budget(depth: usize, dim: usize, rank: usize, adjust: &str) -> Result<String, JsValue> {
    js(budget_json(depth, dim, rank, adjust))
}

#[wasm_bindgen]
pub fn cka(strategy: &str, scale: f64, adjust: &str, seed: u64) -> Result<String, JsValue> {
    js(cka_json(strategy, scale, adjust, seed))
}
