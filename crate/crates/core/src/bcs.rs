//! Blocked Compressed Storage (BCS).
//!
//! A CSR variant in which consecutive rows sharing the same column set store
//! that set once. Five arrays:
//!
//! * `weights`: stored values, row by row;
//! * `row_offset`: start of each row in `weights` (`rows + 1` entries);
//! * `compact_column`: the column list of each row group, concatenated;
//! * `column_stride`: start of each group's list in `compact_column` (`groups + 1`);
//! * `occurrence`: row boundaries of the groups (`groups + 1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pruning::{BlockPartition, LayerGeometry};

const MAGIC: &[u8; 4] = b"BCS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub row_offset: Vec<u32>,
    pub compact_column: Vec<u32>,
    pub column_stride: Vec<u32>,
    pub occurrence: Vec<u32>,
}

fn bcs_err(array: &'static str, reason: impl Into<String>) -> Error {
    Error::Bcs { array, reason: reason.into() }
}

impl BcsMatrix {
    /// Encodes the nonzeros of a dense row-major matrix.
    pub fn encode(dense: &[f32], rows: usize, cols: usize) -> Result<Self> {
        check_dims(dense.len(), rows, cols)?;
        Self::build(dense, rows, cols, |i| dense[i] != 0.0)
    }

    /// Encodes the positions kept by `mask` (kept zeros are stored explicitly).
    pub fn encode_with_mask(dense: &[f32], rows: usize, cols: usize, mask: &[bool]) -> Result<Self> {
        check_dims(dense.len(), rows, cols)?;
        check_dims(mask.len(), rows, cols)?;
        Self::build(dense, rows, cols, |i| mask[i])
    }

    fn build(dense: &[f32], rows: usize, cols: usize, keep: impl Fn(usize) -> bool) -> Result<Self> {
        if u32::try_from(dense.len()).is_err() {
            return Err(Error::InvalidArgument("matrix exceeds 32-bit indexing".into()));
        }
        let mut weights = Vec::new();
        let mut row_offset = vec![0u32];
        let mut compact_column = Vec::new();
        let mut column_stride = vec![0u32];
        let mut occurrence = vec![0u32];
        let mut prev: Option<Vec<u32>> = None;
        for r in 0..rows {
            let set: Vec<u32> = (0..cols).filter(|&c| keep(r * cols + c)).map(|c| c as u32).collect();
            weights.extend(set.iter().map(|&c| dense[r * cols + c as usize]));
            row_offset.push(weights.len() as u32);
            if prev.as_ref() != Some(&set) {
                if r > 0 {
                    occurrence.push(r as u32);
                    column_stride.push(compact_column.len() as u32);
                }
                compact_column.extend_from_slice(&set);
                prev = Some(set);
            }
        }
        occurrence.push(rows as u32);
        column_stride.push(compact_column.len() as u32);
        if rows == 0 {
            // A single empty group keeps the boundary arrays well-formed.
            occurrence = vec![0, 0];
            column_stride = vec![0, 0];
        }
        Ok(Self { rows, cols, weights, row_offset, compact_column, column_stride, occurrence })
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn groups(&self) -> usize {
        self.occurrence.len() - 1
    }

    /// Column list shared by group `g`.
    pub fn group_columns(&self, g: usize) -> &[u32] {
        &self.compact_column[self.column_stride[g] as usize..self.column_stride[g + 1] as usize]
    }

    pub fn group_rows(&self, g: usize) -> std::ops::Range<usize> {
        self.occurrence[g] as usize..self.occurrence[g + 1] as usize
    }

    /// Checks every structural invariant, naming the offending array.
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = (self.rows, self.cols);
        if self.row_offset.len() != rows + 1 {
            return Err(bcs_err("row_offset", format!("length {} != rows + 1 = {}", self.row_offset.len(), rows + 1)));
        }
        if self.row_offset[0] != 0 || self.row_offset.windows(2).any(|w| w[1] < w[0]) {
            return Err(bcs_err("row_offset", "must start at 0 and be non-decreasing"));
        }
        if self.row_offset[rows] as usize != self.weights.len() {
            return Err(bcs_err(
                "weights",
                format!("length {} != row_offset[rows] = {}", self.weights.len(), self.row_offset[rows]),
            ));
        }
        if self.occurrence.len() < 2 {
            return Err(bcs_err("occurrence", "needs at least two boundaries"));
        }
        if self.occurrence[0] != 0 || *self.occurrence.last().unwrap() as usize != rows {
            return Err(bcs_err("occurrence", format!("must run from 0 to rows = {rows}")));
        }
        if self.occurrence.windows(2).any(|w| w[1] < w[0]) {
            return Err(bcs_err("occurrence", "must be non-decreasing"));
        }
        if self.column_stride.len() != self.occurrence.len() {
            return Err(bcs_err(
                "column_stride",
                format!("length {} != groups + 1 = {}", self.column_stride.len(), self.occurrence.len()),
            ));
        }
        if self.column_stride[0] != 0
            || self.column_stride.windows(2).any(|w| w[1] < w[0])
            || *self.column_stride.last().unwrap() as usize != self.compact_column.len()
        {
            return Err(bcs_err("column_stride", "must run from 0 to compact_column length, non-decreasing"));
        }
        for g in 0..self.groups() {
            let list = self.group_columns(g);
            if list.windows(2).any(|w| w[1] <= w[0]) || list.last().is_some_and(|&c| c as usize >= cols) {
                return Err(bcs_err(
                    "compact_column",
                    format!("group {g} list is not strictly increasing within [0, {cols})"),
                ));
            }
            for r in self.group_rows(g) {
                let len = (self.row_offset[r + 1] - self.row_offset[r]) as usize;
                if len != list.len() {
                    return Err(bcs_err(
                        "row_offset",
                        format!("row {r} holds {len} weights, group {g} lists {} columns", list.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Dense row-major reconstruction; validates first.
    pub fn decode(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let mut out = vec![0.0; self.rows * self.cols];
        for g in 0..self.groups() {
            let list = self.group_columns(g);
            for r in self.group_rows(g) {
                let start = self.row_offset[r] as usize;
                for (k, &c) in list.iter().enumerate() {
                    out[r * self.cols + c as usize] = self.weights[start + k];
                }
            }
        }
        Ok(out)
    }

    /// Index entries (everything but the values).
    pub fn index_entries(&self) -> usize {
        self.row_offset.len() + self.compact_column.len() + self.column_stride.len() + self.occurrence.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (7 + self.nnz() + self.index_entries()) + 4);
        out.extend_from_slice(MAGIC);
        for v in [
            self.rows,
            self.cols,
            self.weights.len(),
            self.row_offset.len(),
            self.compact_column.len(),
            self.column_stride.len(),
            self.occurrence.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for arr in [&self.row_offset, &self.compact_column, &self.column_stride, &self.occurrence] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[..4] != MAGIC {
            return Err(bcs_err("header", "bad magic or truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let h: Vec<usize> = (1..8).map(|i| word(i) as usize).collect();
        let total = 8 + h[2..].iter().sum::<usize>();
        if bytes.len() != 4 * total {
            return Err(bcs_err("header", format!("expected {} bytes, found {}", 4 * total, bytes.len())));
        }
        let mut pos = 8;
        let mut take = |n: usize| {
            let v: Vec<u32> = (pos..pos + n).map(word).collect();
            pos += n;
            v
        };
        let weights = take(h[2]).into_iter().map(f32::from_bits).collect();
        let m = Self {
            rows: h[0],
            cols: h[1],
            weights,
            row_offset: take(h[3]),
            compact_column: take(h[4]),
            column_stride: take(h[5]),
            occurrence: take(h[6]),
        };
        m.validate()?;
        Ok(m)
    }
}

fn check_dims(len: usize, rows: usize, cols: usize) -> Result<()> {
    if len != rows * cols {
        return Err(Error::Shape(format!("{len} values for a {rows}x{cols} matrix")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub col_idx: Vec<u32>,
    pub row_ptr: Vec<u32>,
}

impl CsrMatrix {
    pub fn from_dense(dense: &[f32], rows: usize, cols: usize) -> Result<Self> {
        check_dims(dense.len(), rows, cols)?;
        let mut m = Self { rows, cols, values: vec![], col_idx: vec![], row_ptr: vec![0] };
        for r in 0..rows {
            for c in 0..cols {
                let v = dense[r * cols + c];
                if v != 0.0 {
                    m.values.push(v);
                    m.col_idx.push(c as u32);
                }
            }
            m.row_ptr.push(m.values.len() as u32);
        }
        Ok(m)
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                out[r * self.cols + self.col_idx[k] as usize] = self.values[k];
            }
        }
        out
    }

    pub fn index_entries(&self) -> usize {
        self.col_idx.len() + self.row_ptr.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    Dense,
    Csr,
    Bcs,
}

/// Bytes needed to store a dense row-major matrix in `format`, counting
/// 4 bytes per value, index and offset.
pub fn storage_cost(dense: &[f32], rows: usize, cols: usize, format: StorageFormat) -> Result<usize> {
    check_dims(dense.len(), rows, cols)?;
    Ok(match format {
        StorageFormat::Dense => 4 * rows * cols,
        StorageFormat::Csr => {
            let m = CsrMatrix::from_dense(dense, rows, cols)?;
            4 * (m.values.len() + m.index_entries())
        }
        StorageFormat::Bcs => {
            let m = BcsMatrix::encode(dense, rows, cols)?;
            4 * (m.nnz() + m.index_entries())
        }
    })
}

/// GEMM-matrix view `[P, Q·Kh·Kw]` of a weight tensor (FC weights are already 2-D).
pub fn gemm_dims(geom: &LayerGeometry) -> (usize, usize) {
    (geom.filters, geom.channels * geom.kernel_area())
}

/// One BCS matrix per block of a block-punched conv layer. Each holds the
/// block's filters as rows and uses the layer's im2col column numbering
/// `(c · Kh + i) · Kw + j`, so `cols == Q · Kh · Kw`.
pub fn encode_block_punched(
    weights: &[f32],
    mask: &Mask,
    geom: &LayerGeometry,
    partition: &BlockPartition,
) -> Result<Vec<BcsMatrix>> {
    if weights.len() != geom.len() {
        return Err(Error::Shape(format!("{} weights for geometry of {}", weights.len(), geom.len())));
    }
    mask.check_shape_len(geom.len())?;
    let (_, width) = gemm_dims(geom);
    let area = geom.kernel_area();
    partition
        .blocks()
        .map(|(rows, cols)| {
            let mut sub = vec![0.0f32; rows.len() * width];
            let mut keep = vec![false; rows.len() * width];
            for (lr, f) in rows.clone().enumerate() {
                for c in cols.clone() {
                    for k in 0..area {
                        let src = geom.index(f, c, 0, 0) + k;
                        let dst = lr * width + c * area + k;
                        sub[dst] = weights[src];
                        keep[dst] = mask.bits()[src];
                    }
                }
            }
            BcsMatrix::encode_with_mask(&sub, rows.len(), width, &keep)
        })
        .collect()
}

impl Mask {
    fn check_shape_len(&self, len: usize) -> Result<()> {
        if self.len() != len {
            return Err(Error::Shape(format!("mask of {} entries for {len} weights", self.len())));
        }
        Ok(())
    }
}
