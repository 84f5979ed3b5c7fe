//! Pruning regularities, block partitions and magnitude-based mask projection.
//!
//! Weights are viewed as `P × Q × Kh × Kw` (filters, input channels, kernel
//! rows, kernel columns); FC layers use `Kh = Kw = 1`. Block partitions tile
//! the `P × Q` plane with `p × q` blocks, the last row/column of blocks being
//! ragged when the extents do not divide evenly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{conv_out, LayerKind, TensorGraph};
use crate::mask::{Mask, MaskSet};
use crate::tensor::{Scalar, Tensor};

/// Default number of distinct kernel patterns per layer.
pub const DEFAULT_PATTERN_SET: usize = 8;
/// Non-zeros kept by each kernel pattern.
pub const PATTERN_NONZEROS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    None,
    Unstructured,
    StructuredRow,
    StructuredColumn,
    Pattern,
    BlockRow,
    BlockColumn,
    /// Block-row and block-column pruning applied together.
    BlockRowColumn,
    BlockPunched,
}

impl Regularity {
    pub const ALL: [Regularity; 9] = [
        Regularity::None,
        Regularity::Unstructured,
        Regularity::StructuredRow,
        Regularity::StructuredColumn,
        Regularity::Pattern,
        Regularity::BlockRow,
        Regularity::BlockColumn,
        Regularity::BlockRowColumn,
        Regularity::BlockPunched,
    ];

    pub fn is_block_family(self) -> bool {
        matches!(
            self,
            Regularity::BlockRow | Regularity::BlockColumn | Regularity::BlockRowColumn | Regularity::BlockPunched
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Regularity::None => "none",
            Regularity::Unstructured => "unstructured",
            Regularity::StructuredRow => "structured_row",
            Regularity::StructuredColumn => "structured_column",
            Regularity::Pattern => "pattern",
            Regularity::BlockRow => "block_row",
            Regularity::BlockColumn => "block_column",
            Regularity::BlockRowColumn => "block_row_column",
            Regularity::BlockPunched => "block_punched",
        }
    }
}

impl fmt::Display for Regularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regularity::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Scheme(format!("unknown regularity `{s}`")))
    }
}

/// Block extent in the `P × Q` plane. Serialized as `"4x16"` or `"whole"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlockSize {
    Fixed { rows: usize, cols: usize },
    Whole,
}

impl BlockSize {
    pub fn new(rows: usize, cols: usize) -> Self {
        BlockSize::Fixed { rows, cols }
    }

    /// Block extent after clamping to a `p_total × q_total` plane.
    pub fn resolve(self, p_total: usize, q_total: usize) -> (usize, usize) {
        match self {
            BlockSize::Fixed { rows, cols } => (rows.min(p_total), cols.min(q_total)),
            BlockSize::Whole => (p_total, q_total),
        }
    }

    /// Nominal area; `Whole` sorts after every fixed size.
    pub fn area_key(self) -> (usize, usize) {
        match self {
            BlockSize::Fixed { rows, cols } => (rows * cols, rows),
            BlockSize::Whole => (usize::MAX, usize::MAX),
        }
    }
}

impl fmt::Display for BlockSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSize::Fixed { rows, cols } => write!(f, "{rows}x{cols}"),
            BlockSize::Whole => f.write_str("whole"),
        }
    }
}

impl FromStr for BlockSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "whole" {
            return Ok(BlockSize::Whole);
        }
        let bad = || Error::InvalidArgument(format!("bad block size `{s}`, expected RxC or whole"));
        let (r, c) = s.split_once('x').ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(BlockSize::Fixed { rows, cols })
    }
}

impl TryFrom<String> for BlockSize {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockSize> for String {
    fn from(b: BlockSize) -> String {
        b.to_string()
    }
}

/// Per-layer pruning choice: the action space of both mappers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningScheme {
    pub regularity: Regularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockSize>,
    #[serde(default = "default_pattern_set")]
    pub pattern_set: usize,
    /// Target compression rate (dense weights ÷ kept weights).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

fn default_pattern_set() -> usize {
    DEFAULT_PATTERN_SET
}

impl PruningScheme {
    pub fn none() -> Self {
        Self { regularity: Regularity::None, block: None, pattern_set: DEFAULT_PATTERN_SET, rate: None }
    }

    pub fn new(regularity: Regularity) -> Self {
        Self { regularity, ..Self::none() }
    }

    pub fn block(regularity: Regularity, block: BlockSize) -> Self {
        Self { regularity, block: Some(block), ..Self::none() }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = Some(rate);
        self
    }

    pub fn is_none(&self) -> bool {
        self.regularity == Regularity::None
    }

    /// Checks the regularity against the layer kind.
    pub fn validate_for(&self, kind: &LayerKind) -> Result<()> {
        let geom = LayerGeometry::from_kind(kind).ok_or_else(|| Error::Scheme("layer has no weights".into()))?;
        let ok = match self.regularity {
            Regularity::None | Regularity::Unstructured | Regularity::StructuredRow | Regularity::StructuredColumn => {
                true
            }
            Regularity::Pattern => geom.is_conv && geom.kh == 3 && geom.kw == 3,
            Regularity::BlockPunched => geom.is_conv,
            Regularity::BlockRow | Regularity::BlockColumn | Regularity::BlockRowColumn => !geom.is_conv,
        };
        if !ok {
            return Err(Error::Scheme(format!("{} is not valid for a {} layer", self.regularity, geom.describe())));
        }
        if self.regularity.is_block_family() && self.block.is_none() {
            return Err(Error::Scheme(format!("{} needs a block size", self.regularity)));
        }
        if self.regularity == Regularity::Pattern && self.pattern_set == 0 {
            return Err(Error::Scheme("pattern set must not be empty".into()));
        }
        Ok(())
    }
}

/// Weight-tensor geometry of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub filters: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub is_conv: bool,
    pub is_depthwise: bool,
}

impl LayerGeometry {
    pub fn from_kind(kind: &LayerKind) -> Option<Self> {
        let (p, q, kh, kw) = kind.weight_dims()?;
        Some(Self {
            filters: p,
            channels: q,
            kh,
            kw,
            is_conv: kind.is_conv(),
            is_depthwise: matches!(kind, LayerKind::DepthwiseConv2d { .. }),
        })
    }

    pub fn fc(out: usize, inp: usize) -> Self {
        Self { filters: out, channels: inp, kh: 1, kw: 1, is_conv: false, is_depthwise: false }
    }

    pub fn conv(filters: usize, channels: usize, kh: usize, kw: usize) -> Self {
        Self { filters, channels, kh, kw, is_conv: true, is_depthwise: false }
    }

    pub fn kernel_area(&self) -> usize {
        self.kh * self.kw
    }

    pub fn len(&self) -> usize {
        self.filters * self.channels * self.kernel_area()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, f: usize, c: usize, i: usize, j: usize) -> usize {
        ((f * self.channels + c) * self.kh + i) * self.kw + j
    }

    fn describe(&self) -> String {
        if self.is_depthwise {
            format!("{}x{} depthwise conv", self.kh, self.kw)
        } else if self.is_conv {
            format!("{}x{} conv", self.kh, self.kw)
        } else {
            "fc".into()
        }
    }
}

/// Tiling of the `P × Q` plane into `p × q` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl BlockPartition {
    pub fn grid_rows(&self) -> usize {
        self.rows.div_ceil(self.block_rows)
    }

    pub fn grid_cols(&self) -> usize {
        self.cols.div_ceil(self.block_cols)
    }

    /// Number of blocks `J`.
    pub fn num_blocks(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Row range and column range of block `j` (row-major block order).
    pub fn block(&self, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (bi, bj) = (j / self.grid_cols(), j % self.grid_cols());
        let r0 = bi * self.block_rows;
        let c0 = bj * self.block_cols;
        (r0..(r0 + self.block_rows).min(self.rows), c0..(c0 + self.block_cols).min(self.cols))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (std::ops::Range<usize>, std::ops::Range<usize>)> + '_ {
        (0..self.num_blocks()).map(|j| self.block(j))
    }
}

/// Partitions a layer's filter/channel plane. Block extents larger than the
/// layer are clamped, which degenerates to structured pruning along that axis.
pub fn make_partition(geom: &LayerGeometry, rows: usize, cols: usize) -> Result<BlockPartition> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("block extents must be >= 1".into()));
    }
    if rows > geom.filters || cols > geom.channels {
        log::warn!("block {rows}x{cols} exceeds layer {}x{}; clamping", geom.filters, geom.channels);
    }
    Ok(BlockPartition {
        rows: geom.filters,
        cols: geom.channels,
        block_rows: rows.min(geom.filters),
        block_cols: cols.min(geom.channels),
    })
}

/// Partition used by a scheme, if it is block-structured.
pub fn scheme_partition(geom: &LayerGeometry, scheme: &PruningScheme) -> Result<Option<BlockPartition>> {
    if !scheme.regularity.is_block_family() {
        return Ok(None);
    }
    if geom.is_depthwise && scheme.regularity == Regularity::BlockPunched {
        return make_partition(geom, 1, 1).map(Some);
    }
    let block = scheme.block.ok_or_else(|| Error::Scheme(format!("{} needs a block size", scheme.regularity)))?;
    let (r, c) = match block {
        BlockSize::Whole => (geom.filters, geom.channels),
        BlockSize::Fixed { rows, cols } => (rows, cols),
    };
    make_partition(geom, r, c).map(Some)
}

/// Groups of flat weight indices, stored contiguously.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupIndex {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl GroupIndex {
    fn new() -> Self {
        Self { offsets: vec![0], members: Vec::new() }
    }

    fn push(&mut self, members: impl IntoIterator<Item = usize>) {
        self.members.extend(members);
        self.offsets.push(self.members.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(|g| self.group(g))
    }

    pub fn norms<T: Scalar>(&self, weights: &[T]) -> Vec<f64> {
        self.iter()
            .map(|g| {
                g.iter()
                    .map(|&i| {
                        let v = weights[i].as_f64();
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Penalty groups of a layer. `BlockRowColumn` yields the block-row groups
/// followed by the block-column groups; every other regularity yields
/// disjoint groups. Ordering is block-major (row-major block order), then
/// row `m` / column `n` / kernel position `(m, n)` inside the block.
pub fn build_groups(geom: &LayerGeometry, scheme: &PruningScheme) -> Result<GroupIndex> {
    let part = scheme_partition(geom, scheme)?;
    let mut gi = GroupIndex::new();
    let g = *geom;
    match scheme.regularity {
        Regularity::None | Regularity::Pattern => {
            // Pattern groups are kernels (connectivity level).
            for f in 0..g.filters {
                for c in 0..g.channels {
                    gi.push((0..g.kernel_area()).map(|k| g.index(f, c, 0, 0) + k));
                }
            }
        }
        Regularity::Unstructured => {
            for i in 0..g.len() {
                gi.push([i]);
            }
        }
        Regularity::StructuredRow => {
            let per = g.channels * g.kernel_area();
            for f in 0..g.filters {
                gi.push(f * per..(f + 1) * per);
            }
        }
        Regularity::StructuredColumn => {
            let per = g.channels * g.kernel_area();
            for col in 0..per {
                gi.push((0..g.filters).map(|f| f * per + col));
            }
        }
        Regularity::BlockRow => push_block_rows(&mut gi, &g, &part.expect("block family")),
        Regularity::BlockColumn => push_block_cols(&mut gi, &g, &part.expect("block family")),
        Regularity::BlockRowColumn => {
            let part = part.expect("block family");
            push_block_rows(&mut gi, &g, &part);
            push_block_cols(&mut gi, &g, &part);
        }
        Regularity::BlockPunched => {
            let part = part.expect("block family");
            for (rows, cols) in part.blocks() {
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let mut members = Vec::with_capacity(rows.len() * cols.len());
                        for f in rows.clone() {
                            for c in cols.clone() {
                                members.push(g.index(f, c, i, j));
                            }
                        }
                        gi.push(members);
                    }
                }
            }
        }
    }
    Ok(gi)
}

fn push_block_rows(gi: &mut GroupIndex, g: &LayerGeometry, part: &BlockPartition) {
    for (rows, cols) in part.blocks() {
        for f in rows {
            gi.push(cols.clone().flat_map(|c| {
                let base = g.index(f, c, 0, 0);
                base..base + g.kernel_area()
            }));
        }
    }
}

fn push_block_cols(gi: &mut GroupIndex, g: &LayerGeometry, part: &BlockPartition) {
    for (rows, cols) in part.blocks() {
        for c in cols {
            let rows = rows.clone();
            gi.push(rows.flat_map(|f| {
                let base = g.index(f, c, 0, 0);
                base..base + g.kernel_area()
            }));
        }
    }
}

/// Number of `BlockRow` groups in a `BlockRowColumn` group index.
pub fn row_group_count(geom: &LayerGeometry, part: &BlockPartition) -> usize {
    part.grid_cols() * geom.filters
}

/// What the projection should achieve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Dense weights ÷ kept weights, `>= 1`.
    Rate(f64),
    /// Keep groups whose Frobenius norm exceeds this value.
    Threshold(f64),
}

/// Projected mask plus the structure it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMask {
    pub mask: Mask,
    pub scheme: PruningScheme,
    pub partition: Option<BlockPartition>,
    pub groups: GroupIndex,
    pub group_kept: Vec<bool>,
    /// Pattern set (9-bit position masks) for `Pattern`, empty otherwise.
    pub patterns: Vec<u16>,
}

impl GroupMask {
    pub fn rate(&self) -> f64 {
        self.mask.len() as f64 / self.mask.kept().max(1) as f64
    }
}

fn keep_target(total: usize, rate: f64) -> usize {
    ((total as f64 / rate) - 1e-9).ceil().max(1.0) as usize
}

/// Orders groups by descending norm, lower index first on ties.
fn rank_groups(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

/// Keeps the highest-norm groups until `target` is met. `weight_of` gives the
/// number of newly kept weights each group contributes.
fn select_groups(norms: &[f64], target: Target, total: usize, mut weight_of: impl FnMut(usize) -> usize) -> Vec<bool> {
    let mut kept = vec![false; norms.len()];
    match target {
        Target::Threshold(t) => {
            for (k, &n) in kept.iter_mut().zip(norms) {
                *k = n > t;
            }
        }
        Target::Rate(rate) => {
            let goal = keep_target(total, rate);
            let mut count = 0;
            for g in rank_groups(norms) {
                if count >= goal {
                    break;
                }
                kept[g] = true;
                count += weight_of(g);
            }
        }
    }
    kept
}

fn check_target(target: Target) -> Result<()> {
    match target {
        Target::Rate(r) if !(r >= 1.0) => Err(Error::InvalidArgument(format!("compression rate {r} must be >= 1"))),
        Target::Threshold(t) if !(t >= 0.0) => Err(Error::InvalidArgument(format!("threshold {t} must be >= 0"))),
        _ => Ok(()),
    }
}

/// Magnitude-based projection of `weights` onto the scheme's regularity.
pub fn project_mask<T: Scalar>(
    weights: &Tensor<T>,
    geom: &LayerGeometry,
    scheme: &PruningScheme,
    target: Target,
) -> Result<GroupMask> {
    check_target(target)?;
    let shape = weights.shape().to_vec();
    if weights.len() != geom.len() {
        return Err(Error::Shape(format!("weights {:?} do not match layer geometry", shape)));
    }
    if scheme.regularity == Regularity::Pattern && !(geom.is_conv && geom.kh == 3 && geom.kw == 3) {
        return Err(Error::Scheme("pattern pruning needs a 3x3 conv layer".into()));
    }
    scheme.validate_for(&geom_kind(geom))?;
    let w = weights.data();
    let total = w.len();
    let partition = scheme_partition(geom, scheme)?;
    let groups = build_groups(geom, scheme)?;

    let (bits, group_kept, patterns) = match scheme.regularity {
        Regularity::None => (vec![true; total], vec![true; groups.len()], vec![]),
        Regularity::Pattern => project_pattern(w, geom, scheme.pattern_set, target, &groups),
        Regularity::BlockRowColumn => {
            let part = partition.expect("block family");
            let n_rows = row_group_count(geom, &part);
            project_row_column(w, &groups, n_rows, target)
        }
        _ => {
            let norms = groups.norms(w);
            let kept = select_groups(&norms, target, total, |g| groups.group(g).len());
            let mut bits = vec![false; total];
            for (g, &k) in kept.iter().enumerate() {
                if k {
                    for &i in groups.group(g) {
                        bits[i] = true;
                    }
                }
            }
            (bits, kept, vec![])
        }
    };
    Ok(GroupMask { mask: Mask::new(shape, bits)?, scheme: scheme.clone(), partition, groups, group_kept, patterns })
}

fn geom_kind(g: &LayerGeometry) -> LayerKind {
    if g.is_depthwise {
        LayerKind::DepthwiseConv2d { channels: g.filters, kernel_h: g.kh, kernel_w: g.kw, stride: 1, padding: 0 }
    } else if g.is_conv {
        LayerKind::Conv2d {
            in_channels: g.channels,
            out_channels: g.filters,
            kernel_h: g.kh,
            kernel_w: g.kw,
            stride: 1,
            padding: 0,
        }
    } else {
        LayerKind::Fc { in_features: g.channels, out_features: g.filters }
    }
}

/// Column segments first (to `sqrt` of the keep fraction), then row segments
/// over what survives until the overall target is met.
fn project_row_column<T: Scalar>(
    w: &[T],
    groups: &GroupIndex,
    n_rows: usize,
    target: Target,
) -> (Vec<bool>, Vec<bool>, Vec<u16>) {
    let total = w.len();
    let col_norms: Vec<f64> = groups.norms(w)[n_rows..].to_vec();
    let col_target = match target {
        Target::Rate(r) => Target::Rate(r.sqrt()),
        t => t,
    };
    let col_kept = select_groups(&col_norms, col_target, total, |g| groups.group(n_rows + g).len());
    let mut after_cols = vec![false; total];
    for (g, &k) in col_kept.iter().enumerate() {
        if k {
            for &i in groups.group(n_rows + g) {
                after_cols[i] = true;
            }
        }
    }
    let masked: Vec<f64> = w.iter().zip(&after_cols).map(|(v, &k)| if k { v.as_f64() } else { 0.0 }).collect();
    let row_norms: Vec<f64> =
        (0..n_rows).map(|g| groups.group(g).iter().map(|&i| masked[i] * masked[i]).sum::<f64>().sqrt()).collect();
    let row_kept =
        select_groups(&row_norms, target, total, |g| groups.group(g).iter().filter(|&&i| after_cols[i]).count());
    let mut bits = vec![false; total];
    for (g, &k) in row_kept.iter().enumerate() {
        if k {
            for &i in groups.group(g) {
                bits[i] = after_cols[i];
            }
        }
    }
    let mut group_kept = row_kept;
    group_kept.extend(col_kept);
    (bits, group_kept, vec![])
}

/// Top-`k` magnitude positions of a kernel as a bit set; ties go to the
/// lower position.
pub fn top_positions<T: Scalar>(kernel: &[T], k: usize) -> u16 {
    let mut idx: Vec<usize> = (0..kernel.len()).collect();
    idx.sort_by(|&a, &b| kernel[b].as_f64().abs().total_cmp(&kernel[a].as_f64().abs()).then(a.cmp(&b)));
    idx.iter().take(k).fold(0u16, |m, &i| m | (1 << i))
}

fn positions(mask: u16) -> Vec<usize> {
    (0..16).filter(|i| mask >> i & 1 == 1).collect()
}

/// Pattern set: the `size` most frequent top-4 position sets, ties broken by
/// lexicographic order of the sorted position lists. All-zero kernels do not
/// vote unless every kernel is zero.
pub fn derive_pattern_set<T: Scalar>(w: &[T], kernel_area: usize, size: usize) -> Vec<u16> {
    let mut freq: std::collections::BTreeMap<u16, usize> = Default::default();
    let any_nonzero = w.iter().any(|v| v.as_f64() != 0.0);
    for ker in w.chunks_exact(kernel_area) {
        if any_nonzero && ker.iter().all(|v| v.as_f64() == 0.0) {
            continue;
        }
        *freq.entry(top_positions(ker, PATTERN_NONZEROS)).or_default() += 1;
    }
    let mut cands: Vec<(u16, usize)> = freq.into_iter().collect();
    cands.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| positions(a.0).cmp(&positions(b.0))));
    cands.into_iter().take(size).map(|(p, _)| p).collect()
}

fn project_pattern<T: Scalar>(
    w: &[T],
    geom: &LayerGeometry,
    size: usize,
    target: Target,
    kernels: &GroupIndex,
) -> (Vec<bool>, Vec<bool>, Vec<u16>) {
    let area = geom.kernel_area();
    let patterns = derive_pattern_set(w, area, size);
    let mut bits = vec![false; w.len()];
    let mut norms = Vec::with_capacity(kernels.len());
    for (k, ker) in w.chunks_exact(area).enumerate() {
        let energy = |p: u16| -> f64 { positions(p).iter().map(|&i| ker[i].as_f64() * ker[i].as_f64()).sum() };
        let mut best = patterns[0];
        let mut best_e = energy(best);
        for &p in &patterns[1..] {
            let e = energy(p);
            if e > best_e {
                best = p;
                best_e = e;
            }
        }
        for i in positions(best) {
            bits[k * area + i] = true;
        }
        norms.push(best_e.sqrt());
    }
    // Connectivity pruning removes whole kernels.
    let kept = select_groups(&norms, target, w.len(), |_| PATTERN_NONZEROS);
    for (k, &keep) in kept.iter().enumerate() {
        if !keep {
            bits[k * area..(k + 1) * area].fill(false);
        }
    }
    (bits, kept, patterns)
}

/// Checks a mask against the structural constraints of a regularity.
pub fn verify_regularity(mask: &Mask, geom: &LayerGeometry, scheme: &PruningScheme) -> Result<()> {
    let bits = mask.bits();
    let fail = |what: String| Err(Error::Scheme(format!("{} mask violates: {what}", scheme.regularity)));
    let part = scheme_partition(geom, scheme)?;
    let g = geom;
    match scheme.regularity {
        Regularity::None => {
            if bits.iter().any(|b| !b) {
                return fail("dense layer has pruned weights".into());
            }
        }
        Regularity::Unstructured => {}
        Regularity::BlockPunched => {
            let part = part.expect("block family");
            for (j, (rows, cols)) in part.blocks().enumerate() {
                for i in 0..g.kh {
                    for jj in 0..g.kw {
                        let first = bits[g.index(rows.start, cols.start, i, jj)];
                        for f in rows.clone() {
                            for c in cols.clone() {
                                if bits[g.index(f, c, i, jj)] != first {
                                    return fail(format!("block {j} position ({i},{jj}) differs across kernels"));
                                }
                            }
                        }
                    }
                }
            }
        }
        Regularity::BlockRow | Regularity::BlockColumn | Regularity::BlockRowColumn => {
            let part = part.expect("block family");
            for (j, (rows, cols)) in part.blocks().enumerate() {
                let at = |f: usize, c: usize| bits[g.index(f, c, 0, 0)];
                let rows_ok = rows.clone().all(|f| {
                    let kept: Vec<bool> = cols.clone().map(|c| at(f, c)).collect();
                    kept.iter().all(|&b| b) || kept.iter().all(|&b| !b)
                });
                let cols_ok = cols.clone().all(|c| {
                    let kept: Vec<bool> = rows.clone().map(|f| at(f, c)).collect();
                    kept.iter().all(|&b| b) || kept.iter().all(|&b| !b)
                });
                let ok = match scheme.regularity {
                    Regularity::BlockRow => rows_ok,
                    Regularity::BlockColumn => cols_ok,
                    // Kept entries form a (kept rows) × (kept cols) rectangle.
                    _ => {
                        let kr: Vec<usize> = rows.clone().filter(|&f| cols.clone().any(|c| at(f, c))).collect();
                        let kc: Vec<usize> = cols.clone().filter(|&c| rows.clone().any(|f| at(f, c))).collect();
                        kr.iter().all(|&f| kc.iter().all(|&c| at(f, c)))
                    }
                };
                if !ok {
                    return fail(format!("block {j}"));
                }
            }
        }
        Regularity::StructuredRow => {
            let per = g.channels * g.kernel_area();
            for (f, row) in bits.chunks_exact(per).enumerate() {
                if !(row.iter().all(|&b| b) || row.iter().all(|&b| !b)) {
                    return fail(format!("filter {f} partially pruned"));
                }
            }
        }
        Regularity::StructuredColumn => {
            let per = g.channels * g.kernel_area();
            for col in 0..per {
                let first = bits[col];
                if (0..g.filters).any(|f| bits[f * per + col] != first) {
                    return fail(format!("column {col} partially pruned"));
                }
            }
        }
        Regularity::Pattern => {
            let mut seen = std::collections::BTreeSet::new();
            for (k, ker) in bits.chunks_exact(g.kernel_area()).enumerate() {
                let n = ker.iter().filter(|&&b| b).count();
                if n == 0 {
                    continue;
                }
                if n != PATTERN_NONZEROS {
                    return fail(format!("kernel {k} keeps {n} weights"));
                }
                seen.insert(ker.iter().enumerate().fold(0u16, |m, (i, &b)| m | ((b as u16) << i)));
            }
            if seen.len() > scheme.pattern_set {
                return fail(format!("{} distinct patterns > {}", seen.len(), scheme.pattern_set));
            }
        }
    }
    Ok(())
}

/// Multiply-accumulate count for one sample. With a mask, only kept weights
/// contribute (`kept × Ho × Wo` for convolutions).
pub fn count_macs(kind: &LayerKind, input_shape: &[usize], mask: Option<&Mask>) -> u64 {
    let Some((p, q, kh, kw)) = kind.weight_dims() else {
        return 0;
    };
    let spatial = match *kind {
        LayerKind::Conv2d { stride, padding, .. } | LayerKind::DepthwiseConv2d { stride, padding, .. } => {
            let (h, w) = (input_shape[1], input_shape[2]);
            let ho = conv_out(h, kh, stride, padding).unwrap_or(0);
            let wo = conv_out(w, kw, stride, padding).unwrap_or(0);
            (ho * wo) as u64
        }
        _ => 1,
    };
    let weights = match mask {
        Some(m) => m.kept() as u64,
        None => (p * q * kh * kw) as u64,
    };
    weights * spatial
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub id: String,
    pub kind: String,
    pub weights: usize,
    pub kept: usize,
    pub rate: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerCompression>,
    pub total_weights: usize,
    pub kept_weights: usize,
    /// Total CONV/FC weights ÷ kept weights.
    pub overall_rate: f64,
    /// Same ratio restricted to convolution layers.
    pub conv_rate: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
}

pub fn layer_kind_label(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Fc { .. } => "fc".into(),
        LayerKind::Conv2d { kernel_h, kernel_w, .. } => format!("conv{kernel_h}x{kernel_w}"),
        LayerKind::DepthwiseConv2d { kernel_h, kernel_w, .. } => format!("dwconv{kernel_h}x{kernel_w}"),
        other => format!("{other:?}").to_lowercase(),
    }
}

/// Per-layer and overall compression figures. Layers without a mask count as dense.
pub fn compression_report<T: Scalar>(graph: &TensorGraph<T>, masks: &MaskSet) -> Result<CompressionReport> {
    let mut layers = Vec::new();
    let (mut total, mut kept, mut conv_total, mut conv_kept) = (0, 0, 0, 0);
    let (mut dense_macs, mut sparse_macs) = (0u64, 0u64);
    for (idx, layer) in graph.weight_layers() {
        let shape = layer.kind.weight_shape().expect("weight layer");
        let mask = masks.get(&layer.id);
        if let Some(m) = mask {
            m.check_shape(&shape)?;
        }
        let n: usize = shape.iter().product();
        let k = mask.map_or(n, |m| m.kept());
        let input = graph.input_shape_of(idx);
        let dm = count_macs(&layer.kind, input, None);
        let sm = count_macs(&layer.kind, input, mask);
        total += n;
        kept += k;
        if layer.kind.is_conv() {
            conv_total += n;
            conv_kept += k;
        }
        dense_macs += dm;
        sparse_macs += sm;
        layers.push(LayerCompression {
            id: layer.id.clone(),
            kind: layer_kind_label(&layer.kind),
            weights: n,
            kept: k,
            rate: n as f64 / k.max(1) as f64,
            dense_macs: dm,
            sparse_macs: sm,
        });
    }
    Ok(CompressionReport {
        layers,
        total_weights: total,
        kept_weights: kept,
        overall_rate: total as f64 / kept.max(1) as f64,
        conv_rate: if conv_total == 0 { 1.0 } else { conv_total as f64 / conv_kept.max(1) as f64 },
        dense_macs,
        sparse_macs,
    })
}
