//! Dense row-major `f64` matrices and the raw math kernels.
//!
//! Kernels are plain functions so that the differentiation tape and the
//! cache-based inference paths share one implementation. Reductions always
//! run in row-major order; nothing here is parallel or order-dependent on
//! allocation, so results are reproducible bit for bit.

use super::bits::BitMatrix;
use super::{NumericsError, Result};

/// A dense rows x cols matrix of `f64`, stored row-major.
///
/// Values are treated as immutable once produced by an op; mutation methods
/// exist only for construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "backing length must be rows*cols");
        Tensor2D { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor2D { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor2D { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Owned copy of a contiguous block of rows.
    pub fn rows_slice(&self, start: usize, len: usize) -> Tensor2D {
        assert!(start + len <= self.rows);
        Tensor2D {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Index of the row maximum; ties break toward the lowest index so greedy
/// decode paths agree exactly across call sites.
pub fn argmax_row(t: &Tensor2D, i: usize) -> usize {
    let row = t.row(i);
    let mut best = 0;
    let mut best_v = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn shape_err(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

/// C = A * B. Accumulates in i,k,j order: each output row is a running sum of
/// scaled B rows, which vectorizes well and keeps the reduction order fixed.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor2D { rows: m, cols: n, data: out })
}

/// C = A * B^T, via an explicit transpose so the inner loop stays contiguous.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    matmul(a, &transpose(b))
}

/// C = A^T * B.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a, b));
    }
    matmul(&transpose(a), b)
}

pub fn transpose(a: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

pub fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor2D { rows: a.rows, cols: a.cols, data })
}

pub fn scale(a: &Tensor2D, c: f64) -> Tensor2D {
    Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

pub fn hadamard(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.shape() != b.shape() {
        return Err(shape_err("hadamard", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor2D { rows: a.rows, cols: a.cols, data })
}

/// Replicates a 1 x d row n times.
pub fn broadcast_rows(row: &Tensor2D, n: usize) -> Result<Tensor2D> {
    if row.rows != 1 {
        return Err(shape_err("broadcast_rows", row, row));
    }
    let mut data = Vec::with_capacity(n * row.cols);
    for _ in 0..n {
        data.extend_from_slice(&row.data);
    }
    Ok(Tensor2D { rows: n, cols: row.cols, data })
}

pub fn concat_cols(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(shape_err("concat_cols", a, b));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for i in 0..a.rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(Tensor2D { rows: a.rows, cols, data })
}

pub fn concat_rows(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(shape_err("concat_rows", a, b));
    }
    let mut data = Vec::with_capacity((a.rows + b.rows) * a.cols);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor2D { rows: a.rows + b.rows, cols: a.cols, data })
}

pub fn slice_cols(a: &Tensor2D, start: usize, len: usize) -> Result<Tensor2D> {
    if start + len > a.cols {
        return Err(NumericsError::IndexOutOfRange {
            op: "slice_cols",
            index: start + len,
            bound: a.cols,
        });
    }
    let mut data = Vec::with_capacity(a.rows * len);
    for i in 0..a.rows {
        data.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Ok(Tensor2D { rows: a.rows, cols: len, data })
}

/// Gathers rows of `a` by index; an index of -1 yields a zero row. Used for
/// "hidden state of the previous position, or nothing at the sequence start".
pub fn select_rows(a: &Tensor2D, idx: &[i64]) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(idx.len(), a.cols);
    for (i, &src) in idx.iter().enumerate() {
        if src < 0 {
            continue;
        }
        let src = src as usize;
        if src >= a.rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "select_rows",
                index: src,
                bound: a.rows,
            });
        }
        out.row_mut(i).copy_from_slice(a.row(src));
    }
    Ok(out)
}

/// Embedding lookup: rows of `table` at `ids`.
pub fn embedding(table: &Tensor2D, ids: &[usize]) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding",
                index: id,
                bound: table.rows,
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub const RMS_NORM_EPS: f64 = 1e-6;

/// Row-wise RMS normalization with a learned per-column gain (the LLaMA-style
/// layer norm). Returns the output and the per-row `1/rms` needed by the
/// backward pass.
pub fn rms_norm(x: &Tensor2D, gain: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
    if gain.rows != 1 || gain.cols != x.cols {
        return Err(shape_err("rms_norm", x, gain));
    }
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    let mut inv_rms = Vec::with_capacity(x.rows);
    let d = x.cols as f64;
    for i in 0..x.rows {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        inv_rms.push(inv);
        for (o, (&v, &g)) in out.row_mut(i).iter_mut().zip(row.iter().zip(gain.row(0))) {
            *o = v * inv * g;
        }
    }
    Ok((out, inv_rms))
}

/// Gradient of [`rms_norm`] with respect to the input and the gain.
pub fn rms_norm_backward(
    x: &Tensor2D,
    gain: &Tensor2D,
    inv_rms: &[f64],
    g: &Tensor2D,
) -> (Tensor2D, Tensor2D) {
    let d = x.cols as f64;
    let mut dx = Tensor2D::zeros(x.rows, x.cols);
    let mut dgain = Tensor2D::zeros(1, x.cols);
    for i in 0..x.rows {
        let xr = x.row(i);
        let gr = g.row(i);
        let inv = inv_rms[i];
        // y_j = x_j * inv * gain_j, with inv depending on all x.
        let mut dot = 0.0; // sum_j g_j * gain_j * x_j
        for j in 0..x.cols {
            dot += gr[j] * gain.row(0)[j] * xr[j];
        }
        let k = dot * inv * inv * inv / d;
        for j in 0..x.cols {
            dx.row_mut(i)[j] = gr[j] * gain.row(0)[j] * inv - xr[j] * k;
            dgain.row_mut(0)[j] += gr[j] * xr[j] * inv;
        }
    }
    (dx, dgain)
}

/// SiLU activation, x * sigmoid(x). Chosen over GELU to match the rest of the
/// LLaMA-flavored blocks.
pub fn silu(x: &Tensor2D) -> Tensor2D {
    Tensor2D {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| {
                let s = 1.0 / (1.0 + (-v).exp());
                v * s
            })
            .collect(),
    }
}

pub fn silu_backward(x: &Tensor2D, g: &Tensor2D) -> Tensor2D {
    let data = x
        .data
        .iter()
        .zip(&g.data)
        .map(|(&v, &gv)| {
            let s = 1.0 / (1.0 + (-v).exp());
            gv * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor2D { rows: x.rows, cols: x.cols, data }
}

/// Row-wise softmax restricted to mask-allowed entries.
///
/// Disallowed entries are exactly 0.0 in the output (they are never written),
/// allowed entries are stabilized by subtracting the row max over allowed
/// entries. A row with no allowed entries is an error.
pub fn softmax_masked(x: &Tensor2D, mask: &BitMatrix) -> Result<Tensor2D> {
    if mask.rows() != x.rows || mask.cols() != x.cols {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_masked",
            left: x.shape(),
            right: (mask.rows(), mask.cols()),
        });
    }
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in mask.iter_row(i) {
            if row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::DegenerateSoftmaxRow { row: i });
        }
        let mut sum = 0.0;
        let orow = out.row_mut(i);
        for j in mask.iter_row(i) {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for j in mask.iter_row(i) {
            orow[j] *= inv;
        }
    }
    Ok(out)
}

/// Softmax gradient given the forward output `y`: dx = (g - sum(g .* y)) .* y
/// per row. Entries that were masked have y = 0 and therefore dx = 0.
pub fn softmax_backward(y: &Tensor2D, g: &Tensor2D) -> Tensor2D {
    let mut dx = Tensor2D::zeros(y.rows, y.cols);
    for i in 0..y.rows {
        let yr = y.row(i);
        let gr = g.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..y.cols {
            dx.row_mut(i)[j] = (gr[j] - dot) * yr[j];
        }
    }
    dx
}

/// Mean negative log-likelihood over rows with a non-negative label, scaled
/// by `scale` instead of `1/count` so segmented training steps can share a
/// global normalizer. Returns the scalar loss.
pub fn cross_entropy_scaled(logits: &Tensor2D, labels: &[i64], scale: f64) -> Result<f64> {
    if labels.len() != logits.rows {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut total = 0.0;
    let mut any = false;
    for (i, &lab) in labels.iter().enumerate() {
        if lab < 0 {
            continue;
        }
        let lab = lab as usize;
        if lab >= logits.cols {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                index: lab,
                bound: logits.cols,
            });
        }
        any = true;
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[lab];
    }
    if !any {
        return Err(NumericsError::EmptyLoss);
    }
    Ok(total * scale)
}

/// Gradient of [`cross_entropy_scaled`] with respect to the logits:
/// `scale * (softmax(row) - onehot(label))` on loss rows, zero elsewhere.
pub fn cross_entropy_backward(logits: &Tensor2D, labels: &[i64], scale: f64) -> Tensor2D {
    let mut dx = Tensor2D::zeros(logits.rows, logits.cols);
    for (i, &lab) in labels.iter().enumerate() {
        if lab < 0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let inv = 1.0 / sum;
        let dr = dx.row_mut(i);
        for j in 0..row.len() {
            dr[j] = (row[j] - max).exp() * inv * scale;
        }
        dr[lab as usize] -= scale;
    }
    dx
}

/// Rotary embedding applied independently to each `head_dim`-wide column
/// group. Pairs (2j, 2j+1) within a head rotate by `pos * base^(-2j/head_dim)`.
/// With `inverse` the rotation angle is negated, which is also the transpose
/// used by the backward pass.
pub fn rope(
    x: &Tensor2D,
    positions: &[usize],
    head_dim: usize,
    base: f64,
    inverse: bool,
) -> Result<Tensor2D> {
    if positions.len() != x.rows {
        return Err(NumericsError::ShapeMismatch {
            op: "rope",
            left: x.shape(),
            right: (positions.len(), 0),
        });
    }
    if head_dim == 0 || head_dim % 2 != 0 || x.cols % head_dim != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "rope",
            left: x.shape(),
            right: (head_dim, head_dim),
        });
    }
    let half = head_dim / 2;
    let thetas: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let p = positions[i] as f64 * sign;
        let xr = x.row(i);
        let or = out.row_mut(i);
        for h in (0..xr.len()).step_by(head_dim) {
            for j in 0..half {
                let ang = p * thetas[j];
                let (s, c) = ang.sin_cos();
                let a = xr[h + 2 * j];
                let b = xr[h + 2 * j + 1];
                or[h + 2 * j] = a * c - b * s;
                or[h + 2 * j + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}
