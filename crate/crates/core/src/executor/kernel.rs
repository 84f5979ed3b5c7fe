//! Threaded BCS × dense multiplication and row reordering.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bcs::BcsMatrix;
use crate::error::{Error, Result};

/// Kernel parameters tuned per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelParams {
    /// Rows handed to a worker per task.
    pub rows_per_task: usize,
    /// Width of the dense-operand column tile.
    pub tile_cols: usize,
    pub threads: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { rows_per_task: 16, tile_cols: 64, threads: 1 }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if self.rows_per_task == 0 || self.tile_cols == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument(format!("kernel parameters must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// One row of a BCS matrix: its columns and values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
}

/// Rows of a BCS matrix in storage order.
pub fn rows_of(m: &BcsMatrix) -> Vec<SparseRow> {
    let mut out = Vec::with_capacity(m.rows);
    for g in 0..m.groups() {
        let cols = m.group_columns(g);
        for r in m.group_rows(g) {
            let s = m.row_offset[r] as usize;
            out.push(SparseRow { cols: cols.to_vec(), vals: m.weights[s..s + cols.len()].to_vec() });
        }
    }
    out
}

/// Re-encodes rows (kept zeros stay stored).
pub fn from_rows(rows: &[SparseRow], cols: usize) -> Result<BcsMatrix> {
    let mut dense = vec![0.0f32; rows.len() * cols];
    let mut keep = vec![false; rows.len() * cols];
    for (r, row) in rows.iter().enumerate() {
        for (&c, &v) in row.cols.iter().zip(&row.vals) {
            dense[r * cols + c as usize] = v;
            keep[r * cols + c as usize] = true;
        }
    }
    BcsMatrix::encode_with_mask(&dense, rows.len(), cols, &keep)
}

/// Lockstep load imbalance: rows are processed in waves of `lanes`
/// consecutive rows, each wave (including a partial last one) costing
/// `lanes ×` its largest row. Returns total wave cost ÷ total nonzeros.
pub fn imbalance(nnz: &[usize], lanes: usize) -> f64 {
    let total: usize = nnz.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let cost: usize = nnz.chunks(lanes.max(1)).map(|w| w.iter().max().copied().unwrap_or(0) * lanes.max(1)).sum();
    cost as f64 / total as f64
}

/// Sorts rows by (nonzeros descending, column set, original index).
/// Returns `perm` with `perm[new] = old` and the permuted matrix.
pub fn reorder_rows(m: &BcsMatrix) -> Result<(Vec<usize>, BcsMatrix)> {
    let rows = rows_of(m);
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    perm.sort_by(|&a, &b| {
        rows[b].cols.len().cmp(&rows[a].cols.len()).then_with(|| rows[a].cols.cmp(&rows[b].cols)).then(a.cmp(&b))
    });
    let permuted: Vec<SparseRow> = perm.iter().map(|&i| rows[i].clone()).collect();
    Ok((perm, from_rows(&permuted, m.cols)?))
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// `Y[rows × n] = M · X[cols × n]` (row-major). Rows are split into tasks
/// of `rows_per_task`, pulled from a shared queue by `threads` workers;
/// each output element is accumulated in column-list order, so the result
/// does not depend on the parameters.
pub fn spmm(m: &BcsMatrix, x: &[f32], n: usize, params: &KernelParams) -> Result<Vec<f32>> {
    params.validate()?;
    if x.len() != m.cols * n {
        return Err(Error::Shape(format!("dense operand has {} values, expected {}x{}", x.len(), m.cols, n)));
    }
    let mut y = vec![0.0f32; m.rows * n];
    if m.rows == 0 || n == 0 {
        return Ok(y);
    }
    let group_of = row_groups(m);
    let rpt = params.rows_per_task;
    let tasks: Vec<Mutex<&mut [f32]>> = y.chunks_mut(rpt * n).map(Mutex::new).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let t = next.fetch_add(1, Ordering::Relaxed);
        if t >= tasks.len() {
            break;
        }
        let mut out = tasks[t].lock().expect("task slot");
        let r0 = t * rpt;
        let r1 = (r0 + rpt).min(m.rows);
        run_task(m, &group_of, x, n, params.tile_cols, r0, r1, &mut out);
    };
    let threads = params.threads.min(tasks.len());
    if threads <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    Ok(y)
}

fn row_groups(m: &BcsMatrix) -> Vec<usize> {
    let mut g = vec![0; m.rows];
    for grp in 0..m.groups() {
        for r in m.group_rows(grp) {
            g[r] = grp;
        }
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    m: &BcsMatrix,
    group_of: &[usize],
    x: &[f32],
    n: usize,
    tile: usize,
    r0: usize,
    r1: usize,
    out: &mut [f32],
) {
    let mut r = r0;
    while r < r1 {
        let g = group_of[r];
        let end = (m.occurrence[g + 1] as usize).min(r1);
        let cols = m.group_columns(g);
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + tile).min(n);
            let mut rr = r;
            while rr + 4 <= end {
                block4(m, cols, x, n, rr, r0, j0, j1, out);
                rr += 4;
            }
            if rr + 2 <= end {
                block2(m, cols, x, n, rr, r0, j0, j1, out);
                rr += 2;
            }
            for row in rr..end {
                let w = &m.weights[m.row_offset[row] as usize..];
                let dst = &mut out[(row - r0) * n + j0..(row - r0) * n + j1];
                for (k, &c) in cols.iter().enumerate() {
                    let src = &x[c as usize * n + j0..c as usize * n + j1];
                    let wk = w[k];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wk * s;
                    }
                }
            }
            j0 = j1;
        }
        r = end;
    }
}

/// Four rows sharing one column list, accumulated together.
#[allow(clippy::too_many_arguments)]
#[inline]
fn block4(
    m: &BcsMatrix,
    cols: &[u32],
    x: &[f32],
    n: usize,
    row: usize,
    r0: usize,
    j0: usize,
    j1: usize,
    out: &mut [f32],
) {
    let off: [usize; 4] = std::array::from_fn(|i| m.row_offset[row + i] as usize);
    let width = j1 - j0;
    let base = (row - r0) * n;
    let (o0, rest) = out[base + j0..].split_at_mut(n);
    let (o1, rest) = rest.split_at_mut(n);
    let (o2, o3) = rest.split_at_mut(n);
    let (o0, o1, o2, o3) = (&mut o0[..width], &mut o1[..width], &mut o2[..width], &mut o3[..width]);
    for (k, &c) in cols.iter().enumerate() {
        let src = &x[c as usize * n + j0..c as usize * n + j1];
        let (w0, w1, w2, w3) =
            (m.weights[off[0] + k], m.weights[off[1] + k], m.weights[off[2] + k], m.weights[off[3] + k]);
        for j in 0..width {
            let s = src[j];
            o0[j] += w0 * s;
            o1[j] += w1 * s;
            o2[j] += w2 * s;
            o3[j] += w3 * s;
        }
    }
}

/// Two rows sharing one column list.
#[allow(clippy::too_many_arguments)]
#[inline]
fn block2(
    m: &BcsMatrix,
    cols: &[u32],
    x: &[f32],
    n: usize,
    row: usize,
    r0: usize,
    j0: usize,
    j1: usize,
    out: &mut [f32],
) {
    let (a, b) = (m.row_offset[row] as usize, m.row_offset[row + 1] as usize);
    let width = j1 - j0;
    let base = (row - r0) * n;
    let (o0, o1) = out[base + j0..].split_at_mut(n);
    let (o0, o1) = (&mut o0[..width], &mut o1[..width]);
    for (k, &c) in cols.iter().enumerate() {
        let src = &x[c as usize * n + j0..c as usize * n + j1];
        let (w0, w1) = (m.weights[a + k], m.weights[b + k]);
        for j in 0..width {
            let s = src[j];
            o0[j] += w0 * s;
            o1[j] += w1 * s;
        }
    }
}

/// `spmm` on a row-permuted matrix, with output rows restored to the
/// original order (`perm[new] = old`).
pub fn spmm_permuted(
    m: &BcsMatrix,
    perm: Option<&[usize]>,
    x: &[f32],
    n: usize,
    params: &KernelParams,
) -> Result<Vec<f32>> {
    let y = spmm(m, x, n, params)?;
    let Some(perm) = perm else {
        return Ok(y);
    };
    let mut out = vec![0.0f32; y.len()];
    for (new, &old) in perm.iter().enumerate() {
        out[old * n..(old + 1) * n].copy_from_slice(&y[new * n..(new + 1) * n]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_vector() {
        let mut eye = vec![0.0f32; 25];
        for i in 0..5 {
            eye[i * 6] = 1.0;
        }
        let m = BcsMatrix::encode(&eye, 5, 5).unwrap();
        let v = vec![1.0, -2.0, 3.5, 0.0, 7.0];
        assert_eq!(spmm(&m, &v, 1, &KernelParams::default()).unwrap(), v);
    }

    #[test]
    fn imbalance_examples() {
        assert!((imbalance(&[5, 1, 5, 1], 2) - 20.0 / 12.0).abs() < 1e-12);
        assert_eq!(imbalance(&[5, 5, 1, 1], 2), 1.0);
    }

    #[test]
    fn sorted_input_keeps_identity_permutation() {
        let dense = vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 3.0];
        let m = BcsMatrix::encode(&dense, 3, 3).unwrap();
        let (perm, p) = reorder_rows(&m).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(p, m);
    }
}
