//! Offline latency tables.
//!
//! Every setting is measured on a synthetic cascade of 10 identical layers
//! run through the sparse executor; the per-layer latency is the cascade
//! time divided by 10. Lookups for shapes off the grid use the nearest grid
//! point in log-space of (channels, feature size) and are flagged.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{percentile, ExecutionPlan, KernelParams, PlanOptions};
use crate::graph::{GraphBuilder, LayerKind, TensorGraph};
use crate::mask::MaskSet;
use crate::pruning::{project_mask, BlockSize, LayerGeometry, PruningScheme, Regularity, Target};
use crate::tensor::Tensor;

/// Layers per measurement cascade.
pub const CASCADE: usize = 10;
/// Grid hull is widened by this factor on each axis.
pub const HULL_SLACK: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    Depthwise3x3,
    Fc,
}

impl LayerType {
    pub fn is_conv(self) -> bool {
        self != LayerType::Fc
    }

    /// Type and (channels, feature size) of a model layer. Convolutions use
    /// the geometric mean of input/output channels and the input height; FC
    /// layers use the geometric mean of their features and one row.
    pub fn classify(kind: &LayerKind, input_shape: &[usize]) -> Option<(LayerType, f64, f64)> {
        match *kind {
            LayerKind::Fc { in_features, out_features } => Some((LayerType::Fc, gm(in_features, out_features), 1.0)),
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                let t = match (kernel_h, kernel_w) {
                    (1, 1) => LayerType::Conv1x1,
                    (3, 3) => LayerType::Conv3x3,
                    (5, 5) => LayerType::Conv5x5,
                    _ => return None,
                };
                Some((t, gm(in_channels, out_channels), input_shape[1] as f64))
            }
            LayerKind::DepthwiseConv2d { channels, kernel_h: 3, kernel_w: 3, .. } => {
                Some((LayerType::Depthwise3x3, channels as f64, input_shape[1] as f64))
            }
            _ => None,
        }
    }

    fn kernel(self) -> usize {
        match self {
            LayerType::Conv1x1 | LayerType::Fc => 1,
            LayerType::Conv3x3 | LayerType::Depthwise3x3 => 3,
            LayerType::Conv5x5 => 5,
        }
    }
}

fn gm(a: usize, b: usize) -> f64 {
    ((a * b) as f64).sqrt()
}

/// Regularity a table entry is measured with, given its block size.
/// `Whole` is the structured (GEMM-column) baseline.
pub fn table_regularity(layer_type: LayerType, block: Option<BlockSize>) -> Regularity {
    match block {
        None => Regularity::None,
        Some(BlockSize::Whole) => Regularity::StructuredColumn,
        Some(_) if layer_type == LayerType::Fc => Regularity::BlockRowColumn,
        Some(_) => Regularity::BlockPunched,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySetting {
    pub layer_type: LayerType,
    pub channels: usize,
    /// Feature-map height/width; batch rows for FC.
    pub feature: usize,
    pub scheme: Regularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockSize>,
    pub rate: f64,
}

impl LatencySetting {
    /// Dense MACs of one layer of this setting.
    pub fn dense_macs(&self) -> u64 {
        let (c, f) = (self.channels as u64, self.feature as u64);
        let k = self.layer_type.kernel() as u64;
        match self.layer_type {
            LayerType::Fc => c * c * f,
            LayerType::Depthwise3x3 => c * k * k * f * f,
            _ => c * c * k * k * f * f,
        }
    }

    fn same_key(&self, other: &LatencySetting) -> bool {
        self.layer_type == other.layer_type
            && self.scheme == other.scheme
            && self.block == other.block
            && self.rate == other.rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyGrid {
    pub layer_types: Vec<LayerType>,
    pub channels: Vec<usize>,
    pub features: Vec<usize>,
    pub blocks: Vec<BlockSize>,
    pub rates: Vec<f64>,
    /// Also measure the dense layer (rate 1).
    #[serde(default = "yes")]
    pub dense: bool,
    /// Also measure pattern pruning on 3×3 convolutions.
    #[serde(default = "yes")]
    pub pattern: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl LatencyGrid {
    /// Grid with the block sizes and rates of the default configuration,
    /// sized for a desk CPU: 512 block settings plus dense and pattern entries.
    pub fn desk() -> Self {
        Self {
            layer_types: vec![
                LayerType::Conv1x1,
                LayerType::Conv3x3,
                LayerType::Conv5x5,
                LayerType::Depthwise3x3,
                LayerType::Fc,
            ],
            channels: vec![32, 64],
            features: vec![8, 16],
            blocks: vec![
                BlockSize::new(1, 1),
                BlockSize::new(2, 2),
                BlockSize::new(4, 4),
                BlockSize::new(4, 8),
                BlockSize::new(4, 16),
                BlockSize::new(8, 16),
                BlockSize::new(16, 32),
                BlockSize::Whole,
            ],
            rates: vec![2.0, 4.0, 8.0, 16.0],
            dense: true,
            pattern: true,
            seed: 0,
        }
    }

    /// Grid of the default configuration (feature sizes 56…7, channels 64…512).
    pub fn full() -> Self {
        Self {
            layer_types: vec![
                LayerType::Conv1x1,
                LayerType::Conv3x3,
                LayerType::Conv5x5,
                LayerType::Depthwise3x3,
                LayerType::Fc,
            ],
            channels: vec![64, 128, 256, 512],
            features: vec![56, 28, 14, 7],
            blocks: vec![
                BlockSize::new(1, 1),
                BlockSize::new(4, 4),
                BlockSize::new(4, 16),
                BlockSize::new(8, 16),
                BlockSize::new(16, 32),
                BlockSize::Whole,
            ],
            rates: vec![2.0, 4.0, 8.0, 12.0, 16.0],
            dense: true,
            pattern: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Latency(format!("grid needs at least one {what}")));
        if self.layer_types.is_empty() {
            return bad("layer type");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("positive channel count");
        }
        if self.features.is_empty() || self.features.contains(&0) {
            return bad("positive feature size");
        }
        if self.rates.iter().any(|&r| !(r >= 1.0)) {
            return Err(Error::Latency("rates must be >= 1".into()));
        }
        Ok(())
    }

    /// Every setting, in measurement order.
    pub fn settings(&self) -> Vec<LatencySetting> {
        let mut out = Vec::new();
        for &t in &self.layer_types {
            for &c in &self.channels {
                for &f in &self.features {
                    let mk = |scheme, block, rate| LatencySetting {
                        layer_type: t,
                        channels: c,
                        feature: f,
                        scheme,
                        block,
                        rate,
                    };
                    if self.dense {
                        out.push(mk(Regularity::None, None, 1.0));
                    }
                    if t == LayerType::Depthwise3x3 {
                        // Depthwise layers are only measured dense.
                        continue;
                    }
                    for &b in &self.blocks {
                        for &r in &self.rates {
                            out.push(mk(table_regularity(t, Some(b)), Some(b), r));
                        }
                    }
                    if self.pattern && t == LayerType::Conv3x3 {
                        for &r in self.rates.iter().filter(|&&r| r >= 9.0 / 4.0) {
                            out.push(mk(Regularity::Pattern, None, r));
                        }
                    }
                }
            }
        }
        out
    }

    /// Settings with a fixed block size (the grid proper).
    pub fn block_settings(&self) -> usize {
        self.settings().iter().filter(|s| s.block.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub setting: LatencySetting,
    /// Per-layer latency statistics in microseconds.
    pub median_us: f64,
    pub mean_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    pub std_us: f64,
    pub runs: usize,
    /// Compression rate actually reached by the generated masks.
    pub achieved_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device_tag: String,
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the grid and run count.
    #[serde(default)]
    pub config_hash: String,
    pub built_unix: u64,
    pub runs: usize,
    pub grid: LatencyGrid,
    pub records: Vec<LatencyRecord>,
    #[serde(default)]
    pub missing: Vec<LatencySetting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupQuery {
    pub layer_type: LayerType,
    pub channels: f64,
    pub feature: f64,
    pub scheme: Regularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockSize>,
    pub rate: f64,
}

impl LookupQuery {
    /// Query for a model layer under a scheme; `None` if the layer type is
    /// not covered by tables. Unstructured pruning maps to the 1×1 block entry.
    pub fn for_layer(kind: &LayerKind, input_shape: &[usize], scheme: &PruningScheme, rate: f64) -> Option<Self> {
        let (layer_type, channels, feature) = LayerType::classify(kind, input_shape)?;
        let (scheme_key, block, rate) = match scheme.regularity {
            Regularity::None => (Regularity::None, None, 1.0),
            Regularity::Pattern => (Regularity::Pattern, None, rate),
            Regularity::Unstructured => {
                let b = Some(BlockSize::new(1, 1));
                (table_regularity(layer_type, b), b, rate)
            }
            Regularity::StructuredRow | Regularity::StructuredColumn => {
                (Regularity::StructuredColumn, Some(BlockSize::Whole), rate)
            }
            _ => (table_regularity(layer_type, scheme.block), scheme.block, rate),
        };
        Some(Self { layer_type, channels, feature, scheme: scheme_key, block, rate })
    }

    fn key(&self) -> LatencySetting {
        LatencySetting {
            layer_type: self.layer_type,
            channels: 0,
            feature: 0,
            scheme: self.scheme,
            block: self.block,
            rate: self.rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupResult {
    pub latency_us: f64,
    /// Matched grid setting.
    pub setting: LatencySetting,
    pub interpolated: bool,
}

fn log_dist(c: f64, f: f64, s: &LatencySetting) -> f64 {
    let dc = c.ln() - (s.channels as f64).ln();
    let df = f.ln() - (s.feature as f64).ln();
    dc * dc + df * df
}

fn in_hull(v: f64, values: &[usize]) -> bool {
    let lo = *values.iter().min().expect("validated grid") as f64 / HULL_SLACK;
    let hi = *values.iter().max().expect("validated grid") as f64 * HULL_SLACK;
    v >= lo && v <= hi
}

impl LatencyTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: LatencyTable = serde_json::from_str(s)?;
        t.grid.validate()?;
        if let Some(r) = t.records.iter().find(|r| !(r.median_us > 0.0)) {
            return Err(Error::Latency(format!("non-positive latency for {:?}", r.setting)));
        }
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Nearest record (in log channels/feature space) with the same type,
    /// scheme, block and rate. Ties go to the earlier record.
    pub fn lookup(&self, q: &LookupQuery) -> Result<LookupResult> {
        if !in_hull(q.channels, &self.grid.channels) || !in_hull(q.feature, &self.grid.features) {
            return Err(Error::Latency(format!(
                "channels {:.1} / feature {:.1} outside the grid hull",
                q.channels, q.feature
            )));
        }
        let key = q.key();
        let mut best: Option<(&LatencyRecord, f64)> = None;
        for r in self.records.iter().filter(|r| r.setting.same_key(&key)) {
            let d = log_dist(q.channels, q.feature, &r.setting);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((r, d));
            }
        }
        let (r, d) = best.ok_or_else(|| {
            Error::Latency(format!(
                "no entry for {:?} {:?} block {:?} rate {}",
                q.layer_type,
                q.scheme,
                q.block.map(|b| b.to_string()),
                q.rate
            ))
        })?;
        Ok(LookupResult { latency_us: r.median_us, setting: r.setting.clone(), interpolated: d > 0.0 })
    }

    /// Latency ÷ dense MACs of the matched grid setting.
    pub fn normalized_lookup(&self, q: &LookupQuery) -> Result<(f64, LookupResult)> {
        let r = self.lookup(q)?;
        Ok((r.latency_us / r.setting.dense_macs() as f64, r))
    }

    /// Block sizes available for a layer type at a rate (excluding `Whole`).
    pub fn block_sizes(&self, layer_type: LayerType, rate: f64) -> Vec<BlockSize> {
        let mut out: Vec<BlockSize> = self
            .records
            .iter()
            .filter(|r| r.setting.layer_type == layer_type && r.setting.rate == rate)
            .filter_map(|r| r.setting.block)
            .filter(|b| *b != BlockSize::Whole)
            .collect();
        out.sort_by_key(|b| b.area_key());
        out.dedup();
        out
    }

    /// Rates present in the table.
    pub fn rates(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.records.iter().map(|r| r.setting.rate).filter(|&r| r > 1.0).collect();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    }
}

/// Raw timings of one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// Per-layer latency of every run, in microseconds.
    pub times_us: Vec<f64>,
    pub achieved_rate: f64,
}

/// A compiled, warmed-up cascade: `run` times one inference and returns
/// the per-layer latency in microseconds.
pub struct Probe {
    pub run: Box<dyn FnMut() -> Result<f64>>,
    pub achieved_rate: f64,
}

fn mask_rate(masks: &MaskSet) -> f64 {
    let (len, kept) = masks.values().fold((0, 0), |(l, k), m| (l + m.len(), k + m.kept()));
    if masks.is_empty() {
        1.0
    } else {
        len as f64 / kept.max(1) as f64
    }
}

/// Latency against block size for one (layer type, shape, rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCell {
    pub layer_type: LayerType,
    pub channels: usize,
    pub feature: usize,
    pub rate: f64,
    /// Block sizes in increasing area, with their median latency.
    pub points: Vec<(BlockSize, f64)>,
    /// Block sizes left out because their masks missed the rate.
    pub skipped: Vec<BlockSize>,
    /// Each latency is at most `1 + tolerance` times the previous one.
    pub non_increasing: bool,
    /// Gain between the two largest sizes is below the gain between the two smallest.
    pub saturating: bool,
}

/// Block-size trend of fixed-size block entries (structured entries excluded)
/// for the given layer types. Entries whose achieved rate deviates from the
/// nominal rate by more than `rate_slack` (relative) are skipped.
pub fn block_size_trend(
    table: &LatencyTable,
    layer_types: &[LayerType],
    tolerance: f64,
    rate_slack: f64,
) -> Vec<TrendCell> {
    let mut cells: Vec<TrendCell> = Vec::new();
    for r in &table.records {
        let s = &r.setting;
        let Some(b) = s.block.filter(|b| *b != BlockSize::Whole) else {
            continue;
        };
        if !layer_types.contains(&s.layer_type) {
            continue;
        }
        let idx = match cells.iter().position(|c| {
            c.layer_type == s.layer_type && c.channels == s.channels && c.feature == s.feature && c.rate == s.rate
        }) {
            Some(i) => i,
            None => {
                cells.push(TrendCell {
                    layer_type: s.layer_type,
                    channels: s.channels,
                    feature: s.feature,
                    rate: s.rate,
                    points: Vec::new(),
                    skipped: Vec::new(),
                    non_increasing: true,
                    saturating: true,
                });
                cells.len() - 1
            }
        };
        if ((r.achieved_rate - s.rate) / s.rate).abs() > rate_slack {
            cells[idx].skipped.push(b);
        } else {
            cells[idx].points.push((b, r.median_us));
        }
    }
    for c in &mut cells {
        c.points.sort_by_key(|(b, _)| b.area_key());
        let v: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        c.non_increasing = v.windows(2).all(|w| w[1] <= w[0] * (1.0 + tolerance));
        let n = v.len();
        c.saturating = n >= 3 && v[n - 2] - v[n - 1] < v[0] - v[1];
    }
    cells
}

/// The 10-layer cascade for a setting, plus its masks.
pub fn cascade(setting: &LatencySetting, seed: u64) -> Result<(TensorGraph, MaskSet, Tensor)> {
    let (c, f) = (setting.channels, setting.feature);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input_shape, batch_shape) = match setting.layer_type {
        LayerType::Fc => (vec![c], vec![f, c]),
        _ => (vec![c, f, f], vec![1, c, f, f]),
    };
    let mut b = GraphBuilder::new(&input_shape);
    let mut h = b.input();
    let k = setting.layer_type.kernel();
    for i in 0..CASCADE {
        let id = format!("l{i}");
        h = match setting.layer_type {
            LayerType::Fc => b.fc(&id, h, c, c),
            LayerType::Depthwise3x3 => b.depthwise(&id, h, c, 3, 1, 1),
            _ => b.conv(&id, h, c, c, k, 1, k / 2),
        };
    }
    let graph: TensorGraph = b.build(&mut rng)?;
    let mut masks = MaskSet::new();
    if setting.scheme != Regularity::None {
        let scheme = PruningScheme { regularity: setting.scheme, block: setting.block, ..PruningScheme::none() };
        for (_, layer) in graph.weight_layers() {
            let geom = LayerGeometry::from_kind(&layer.kind).expect("weight layer");
            let w = &graph.param(&layer.id).expect("weight layer").weight;
            let gm = project_mask(w, &geom, &scheme, Target::Rate(setting.rate))?;
            masks.insert(layer.id.clone(), gm.mask);
        }
    }
    let x = Tensor::uniform(&batch_shape, 1.0, &mut rng);
    Ok((graph, masks, x))
}

/// Compiles the cascade of a setting (single-threaded) and warms it up.
pub fn prepare(setting: &LatencySetting, seed: u64) -> Result<Probe> {
    let (graph, masks, x) = cascade(setting, seed)?;
    let opts = PlanOptions { params: KernelParams { threads: 1, ..KernelParams::default() }, ..PlanOptions::default() };
    let plan = ExecutionPlan::compile(&graph, &masks, &opts)?;
    for _ in 0..2 {
        plan.run(&x)?;
    }
    Ok(Probe {
        achieved_rate: mask_rate(&masks),
        run: Box::new(move || {
            let t0 = Instant::now();
            let y = plan.run(&x)?;
            let us = t0.elapsed().as_secs_f64() * 1e6 / CASCADE as f64;
            std::hint::black_box(y);
            Ok(us)
        }),
    })
}

/// Measures one setting for `runs` consecutive runs.
pub fn measure(setting: &LatencySetting, runs: usize, seed: u64) -> Result<Measurement> {
    let mut p = prepare(setting, seed)?;
    let times_us = (0..runs).map(|_| (p.run)()).collect::<Result<_>>()?;
    Ok(Measurement { times_us, achieved_rate: p.achieved_rate })
}

fn cascade_bytes(s: &LatencySetting) -> u64 {
    let k = s.layer_type.kernel() as u64;
    let c = s.channels as u64;
    let per_layer = if s.layer_type == LayerType::Depthwise3x3 { c * k * k } else { c * c * k * k };
    per_layer * CASCADE as u64 * 4
}

fn stats(setting: LatencySetting, m: Measurement) -> LatencyRecord {
    let mut t = m.times_us;
    t.sort_by(f64::total_cmp);
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    LatencyRecord {
        setting,
        median_us: percentile(&t, 0.5).max(1e-3),
        mean_us: mean,
        p10_us: percentile(&t, 0.1),
        p90_us: percentile(&t, 0.9),
        std_us: var.sqrt(),
        runs: t.len(),
        achieved_rate: m.achieved_rate,
    }
}

/// Consecutive runs of one setting before moving to the next.
pub const SLICE: usize = 5;
/// Dense weight bytes of the cascades measured together.
pub const BATCH_BYTES: u64 = 768 << 20;

/// Measures every grid setting, one inference at a time. Settings are
/// compiled in batches of at most [`BATCH_BYTES`] weights and each batch is
/// measured round-robin in slices of [`SLICE`] runs, so slow phases of the
/// host are spread over all settings instead of hitting a few. Settings that fail are listed
/// in `missing`; unless `allow_partial`, any failure rejects the table.
pub fn build_table(grid: &LatencyGrid, device_tag: &str, runs: usize, allow_partial: bool) -> Result<LatencyTable> {
    build_table_with(grid, device_tag, runs, allow_partial, prepare)
}

/// [`build_table`] with a custom probe constructor.
pub fn build_table_with(
    grid: &LatencyGrid,
    device_tag: &str,
    runs: usize,
    allow_partial: bool,
    mut prepare_fn: impl FnMut(&LatencySetting, u64) -> Result<Probe>,
) -> Result<LatencyTable> {
    grid.validate()?;
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let settings = grid.settings();
    let mut records = Vec::new();
    let mut missing = Vec::new();
    let mut start = 0;
    while start < settings.len() {
        let mut end = start;
        let mut bytes = 0;
        while end < settings.len() && (end == start || bytes + cascade_bytes(&settings[end]) <= BATCH_BYTES) {
            bytes += cascade_bytes(&settings[end]);
            end += 1;
        }
        let mut probes: Vec<Option<(Probe, Vec<f64>)>> = (start..end)
            .map(|i| match prepare_fn(&settings[i], grid.seed.wrapping_add(i as u64)) {
                Ok(p) => Some((p, Vec::with_capacity(runs))),
                Err(e) => {
                    log::warn!("setting {:?} failed: {e}", settings[i]);
                    None
                }
            })
            .collect();
        for round in 0..runs.div_ceil(SLICE) {
            let n = SLICE.min(runs - round * SLICE);
            for (k, slot) in probes.iter_mut().enumerate() {
                let Some((probe, times)) = slot else { continue };
                for _ in 0..n {
                    match (probe.run)() {
                        Ok(t) => times.push(t),
                        Err(e) => {
                            log::warn!("setting {:?} failed: {e}", settings[start + k]);
                            *slot = None;
                            break;
                        }
                    }
                }
            }
        }
        for (k, slot) in probes.into_iter().enumerate() {
            let s = settings[start + k].clone();
            match slot {
                Some((p, times)) => {
                    records.push(stats(s, Measurement { times_us: times, achieved_rate: p.achieved_rate }))
                }
                None => missing.push(s),
            }
        }
        start = end;
    }
    if !missing.is_empty() && !allow_partial {
        return Err(Error::Latency(format!(
            "{} settings failed to execute (first: {:?}); pass allow_partial to keep the table",
            missing.len(),
            missing[0]
        )));
    }
    Ok(LatencyTable {
        device_tag: device_tag.into(),
        tool_version: crate::TOOL_VERSION.into(),
        seed: grid.seed,
        config_hash: crate::io::config_hash(&(grid, runs))?,
        built_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        runs,
        grid: grid.clone(),
        records,
        missing,
    })
}
