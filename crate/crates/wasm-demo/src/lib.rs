//! Browser demo: BCS encoding of a typed matrix, mask projection of a random
//! layer, and latency-based block-size selection. Every operation returns a
//! JSON string so the page stays framework-free.

use blockprune::bcs::{storage_cost, BcsMatrix, StorageFormat};
use blockprune::latency::{LatencyGrid, LatencyRecord, LatencySetting, LatencyTable, LayerType};
use blockprune::mapper::select_block_size;
use blockprune::pruning::{project_mask, BlockSize, LayerGeometry, PruningScheme, Regularity, Target};
use blockprune::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Parses one matrix row per line; entries split on whitespace or commas.
pub fn parse_matrix(text: &str) -> Result<(Vec<f32>, usize, usize), String> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let row: Vec<f32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f32>().map_err(|_| format!("line {}: `{t}` is not a number", i + 1)))
            .collect::<Result<_, _>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(format!("line {} has {} entries, expected {}", i + 1, row.len(), cols.unwrap_or(0)));
        }
        data.extend(row);
        rows += 1;
    }
    match cols {
        Some(c) if c > 0 => Ok((data, rows, c)),
        _ => Err("matrix is empty".into()),
    }
}

/// BCS arrays and storage cost of a typed matrix.
pub fn encode_matrix(text: &str) -> Out {
    let (m, rows, cols) = parse_matrix(text)?;
    let b = BcsMatrix::encode(&m, rows, cols).map_err(err)?;
    let cost = |f| storage_cost(&m, rows, cols, f).map_err(err);
    Ok(json!({
        "rows": rows,
        "cols": cols,
        "weights": b.weights,
        "row_offset": b.row_offset,
        "compact_column": b.compact_column,
        "column_stride": b.column_stride,
        "occurrence": b.occurrence,
        "groups": b.groups(),
        "bytes": { "dense": cost(StorageFormat::Dense)?, "csr": cost(StorageFormat::Csr)?, "bcs": cost(StorageFormat::Bcs)? },
    })
    .to_string())
}

/// Projects a random layer onto a scheme. `kind` is `fc` (`rows × cols`
/// weights) or `conv3x3` (`rows` filters, `cols` input channels). The
/// returned mask is the GEMM view, row-major.
pub fn prune_layer(kind: &str, rows: usize, cols: usize, regularity: &str, block: &str, rate: f64, seed: u64) -> Out {
    let geom = match kind {
        "fc" => LayerGeometry::fc(rows, cols),
        "conv3x3" => LayerGeometry::conv(rows, cols, 3, 3),
        _ => return Err(format!("unknown layer kind `{kind}`")),
    };
    if rows == 0 || cols == 0 || rows * cols > 1 << 16 {
        return Err("layer must have between 1 and 65536 rows x cols".into());
    }
    let reg: Regularity = regularity.parse().map_err(err)?;
    let mut scheme = PruningScheme::new(reg);
    if !block.trim().is_empty() {
        scheme.block = Some(block.trim().parse().map_err(err)?);
    }
    let shape: Vec<usize> = if kind == "fc" { vec![rows, cols] } else { vec![rows, cols, 3, 3] };
    let w: Tensor = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let g = project_mask(&w, &geom, &scheme, Target::Rate(rate)).map_err(err)?;
    let gemm_cols = w.len() / rows;
    let masked: Vec<f32> = w.data().iter().zip(g.mask.bits()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    let b = BcsMatrix::encode(&masked, rows, gemm_cols).map_err(err)?;
    Ok(json!({
        "rows": rows,
        "cols": gemm_cols,
        "mask": g.mask.bits().iter().map(|&k| u8::from(k)).collect::<Vec<_>>(),
        "kept": g.mask.kept(),
        "rate": g.rate(),
        "groups_kept": g.group_kept.iter().filter(|&&k| k).count(),
        "groups": g.group_kept.len(),
        "bcs_groups": b.groups(),
    })
    .to_string())
}

/// Picks a block size from user-given normalized latencies. Each line is
/// `RxC value` or `whole value`; values are latency per MAC in any unit.
pub fn select_block(text: &str, beta: f64) -> Out {
    let mut entries: Vec<(BlockSize, f64)> = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let mut parts = line.split_whitespace();
        let (Some(b), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected `RxC value`", i + 1));
        };
        let block: BlockSize = b.parse().map_err(err)?;
        let v: f64 = v.parse().map_err(|_| format!("line {}: `{v}` is not a number", i + 1))?;
        if !(v > 0.0) {
            return Err(format!("line {}: latency must be positive", i + 1));
        }
        entries.push((block, v));
    }
    if !entries.iter().any(|(b, _)| *b == BlockSize::Whole) {
        return Err("a `whole` entry (structured pruning) is required".into());
    }
    let table = single_point_table(&entries);
    let choice = select_block_size(&table, LayerType::Conv3x3, 64.0, 16.0, 4.0, beta).map_err(err)?;
    let structured = choice.structured;
    let candidates: Vec<Value> = entries
        .iter()
        .map(|(b, v)| json!({ "block": b.to_string(), "normalized": v, "within": *v <= (1.0 + beta) * structured }))
        .collect();
    Ok(json!({
        "block": choice.block.to_string(),
        "qualified": choice.qualified,
        "margin": choice.margin(),
        "candidates": candidates,
    })
    .to_string())
}

/// Latency table with one 3×3 conv shape and rate, holding `entries`.
fn single_point_table(entries: &[(BlockSize, f64)]) -> LatencyTable {
    let setting = |block: BlockSize| LatencySetting {
        layer_type: LayerType::Conv3x3,
        channels: 64,
        feature: 16,
        scheme: blockprune::latency::table_regularity(LayerType::Conv3x3, Some(block)),
        block: Some(block),
        rate: 4.0,
    };
    let records = entries
        .iter()
        .map(|&(b, v)| {
            let s = setting(b);
            let us = v * s.dense_macs() as f64;
            LatencyRecord {
                setting: s,
                median_us: us,
                mean_us: us,
                p10_us: us,
                p90_us: us,
                std_us: 0.0,
                runs: 1,
                achieved_rate: 4.0,
            }
        })
        .collect();
    LatencyTable {
        device_tag: "demo".into(),
        tool_version: String::new(),
        seed: 0,
        config_hash: String::new(),
        built_unix: 0,
        runs: 1,
        grid: LatencyGrid {
            layer_types: vec![LayerType::Conv3x3],
            channels: vec![64],
            features: vec![16],
            blocks: entries.iter().map(|e| e.0).collect(),
            rates: vec![4.0],
            dense: false,
            pattern: false,
            seed: 0,
        },
        records,
        missing: Vec::new(),
    }
}

#[wasm_bindgen(js_name = encodeMatrix)]
pub fn encode_matrix_js(text: &str) -> Result<String, JsError> {
    encode_matrix(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pruneLayer)]
pub fn prune_layer_js(
    kind: &str,
    rows: usize,
    cols: usize,
    regularity: &str,
    block: &str,
    rate: f64,
    seed: u32,
) -> Result<String, JsError> {
    prune_layer(kind, rows, cols, regularity, block, rate, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = selectBlock)]
pub fn select_block_js(text: &str, beta: f64) -> Result<String, JsError> {
    select_block(text, beta).map_err(|e| JsError::new(&e))
}
