//! Per-layer summary of a pruned model: scheme, block size, compression,
//! MACs, table-estimated and measured latency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::executor::BenchRecord;
use crate::io::{ModelArchive, Provenance};
use crate::latency::{LatencyTable, LookupQuery};
use crate::mapper::layer_infos;
use crate::pruning::{compression_report, PruningScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub kind: String,
    pub scheme: String,
    pub block_size: Option<String>,
    pub weights: usize,
    pub kept: usize,
    pub compression: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub estimated_us: Option<f64>,
    pub measured_us: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub layers: Vec<LayerReport>,
    pub total_weights: usize,
    pub kept_weights: usize,
    pub compression: f64,
    pub conv_compression: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub estimated_us: Option<f64>,
    pub measured_us: Option<f64>,
    pub model: Provenance,
}

fn snap_rate(rates: &[f64], rate: f64) -> Option<f64> {
    rates.iter().copied().min_by(|a, b| (a.ln() - rate.ln()).abs().total_cmp(&(b.ln() - rate.ln()).abs()))
}

/// Builds the report. Estimates use the table entry whose rate is nearest to
/// the layer's achieved rate (dense when nothing was pruned); layers outside
/// the table get no estimate.
/// Measured times are matched to plan ops by their first fused component.
pub fn model_report(
    archive: &ModelArchive,
    table: Option<&LatencyTable>,
    bench: Option<&[BenchRecord]>,
) -> Result<ModelReport> {
    let comp = compression_report(&archive.graph, &archive.masks)?;
    let infos: BTreeMap<_, _> = layer_infos(&archive.graph).into_iter().map(|i| (i.id.clone(), i)).collect();
    let rates = table.map(|t| t.rates()).unwrap_or_default();
    let measured: BTreeMap<&str, f64> =
        bench.unwrap_or_default().iter().map(|r| (r.layer_id.split('+').next().unwrap_or(""), r.median_us)).collect();
    let dense = PruningScheme::none();
    let mut layers = Vec::new();
    for l in comp.layers {
        let scheme = archive.schemes.get(&l.id).unwrap_or(&dense);
        let effective = if l.kept == l.weights { &dense } else { scheme };
        let estimated = match (table, infos.get(&l.id)) {
            (Some(t), Some(info)) => {
                let rate = if effective.is_none() { Some(1.0) } else { snap_rate(&rates, l.rate) };
                rate.and_then(|r| LookupQuery::for_layer(&info.kind, &info.input_shape, effective, r))
                    .and_then(|q| t.normalized_lookup(&q).ok())
                    .map(|(n, _)| n * l.dense_macs as f64)
            }
            _ => None,
        };
        layers.push(LayerReport {
            scheme: scheme.regularity.name().to_string(),
            block_size: scheme.block.map(|b| b.to_string()),
            measured_us: measured.get(l.id.as_str()).copied(),
            layer_id: l.id,
            kind: l.kind,
            weights: l.weights,
            kept: l.kept,
            compression: l.rate,
            dense_macs: l.dense_macs,
            sparse_macs: l.sparse_macs,
            estimated_us: estimated,
        });
    }
    let estimated_us = match table {
        Some(_) => layers.iter().map(|l| l.estimated_us).sum(),
        None => None,
    };
    Ok(ModelReport {
        layers,
        total_weights: comp.total_weights,
        kept_weights: comp.kept_weights,
        compression: comp.overall_rate,
        conv_compression: comp.conv_rate,
        dense_macs: comp.dense_macs,
        sparse_macs: comp.sparse_macs,
        estimated_us,
        measured_us: measured.get("total").copied(),
        model: archive.provenance.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

impl ModelReport {
    /// Plain-text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:<18} {:<8} {:>9} {:>9} {:>7} {:>12} {:>12} {:>10} {:>10}",
            "layer",
            "kind",
            "scheme",
            "block",
            "weights",
            "kept",
            "rate",
            "dense_macs",
            "sparse_macs",
            "est_us",
            "meas_us"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:<18} {:<8} {:>9} {:>9} {:>6.2}x {:>12} {:>12} {:>10} {:>10}",
                l.layer_id,
                l.kind,
                l.scheme,
                l.block_size.as_deref().unwrap_or("-"),
                l.weights,
                l.kept,
                l.compression,
                l.dense_macs,
                l.sparse_macs,
                opt(l.estimated_us),
                opt(l.measured_us)
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:<18} {:<8} {:>9} {:>9} {:>6.2}x {:>12} {:>12} {:>10} {:>10}",
            "total",
            "",
            "",
            "",
            self.total_weights,
            self.kept_weights,
            self.compression,
            self.dense_macs,
            self.sparse_macs,
            opt(self.estimated_us),
            opt(self.measured_us)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_reference_model;

    #[test]
    fn unpruned_model_is_dense() {
        let g = build_reference_model("mlp2", 0).unwrap();
        let a = ModelArchive::new(g, Provenance::new(0, &()).unwrap());
        let r = model_report(&a, None, None).unwrap();
        assert_eq!(r.compression, 1.0);
        assert!(r.layers.iter().all(|l| l.scheme == "none" && l.compression == 1.0));
        assert!(r.render().contains("fc1"));
    }

    #[test]
    fn snaps_to_nearest_rate_in_log_space() {
        assert_eq!(snap_rate(&[2.0, 4.0, 8.0], 5.5), Some(4.0));
        assert_eq!(snap_rate(&[2.0, 4.0, 8.0], 5.7), Some(8.0));
    }
}
