//! Dense row-major 2-D kernels.
//!
//! Every layer's feature and gradient is a [`Blob`]: rows are examples (or
//! units for parameters), columns are features. All kernels are pure and
//! accumulate in a fixed order so repeated calls are bit-identical.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matrix dimension a blob is sliced or concatenated along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dim {
    /// Dimension 0: rows, i.e. the batch dimension.
    Rows,
    /// Dimension 1: columns, i.e. the feature dimension.
    Cols,
}

impl TryFrom<u8> for Dim {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Dim::Rows),
            1 => Ok(Dim::Cols),
            other => Err(format!("dimension must be 0 or 1, got {other}")),
        }
    }
}

impl From<Dim> for u8 {
    fn from(d: Dim) -> u8 {
        match d {
            Dim::Rows => 0,
            Dim::Cols => 1,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Sizes of `parts` contiguous pieces of an extent of `n`, larger pieces first.
pub fn split_sizes(n: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 {
        return Err(Error::Partition("cannot split into zero parts".into()));
    }
    if parts > n {
        return Err(Error::Partition(format!(
            "cannot split extent {n} into {parts} parts"
        )));
    }
    let base = n / parts;
    let rem = n % parts;
    Ok((0..parts).map(|i| base + usize::from(i < rem)).collect())
}

/// Start offset and length of piece `index` out of `parts`.
pub fn split_range(n: usize, parts: usize, index: usize) -> Result<(usize, usize)> {
    let sizes = split_sizes(n, parts)?;
    let len = *sizes
        .get(index)
        .ok_or_else(|| Error::Partition(format!("piece {index} out of {parts}")))?;
    let start = sizes[..index].iter().sum();
    Ok((start, len))
}

#[derive(Clone, PartialEq)]
pub struct Blob {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Blob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Blob[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Default for Blob {
    fn default() -> Self {
        Blob::zeros(0, 0)
    }
}

impl Blob {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Blob {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Blob {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Blob::zeros(n, n);
        for i in 0..n {
            b.data[i * n + i] = 1.0;
        }
        b
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Blob { rows, cols, data })
    }

    /// Builds a blob from nested rows. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Blob {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Blob {
            rows: 1,
            cols: data.len(),
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values viewed with a different shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Blob::from_vec(rows, cols, self.data)
    }

    pub fn transpose(&self) -> Blob {
        let mut out = Blob::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Blob, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Blob {
        Blob {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Blob, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Blob> {
        self.same_shape(other, op)?;
        Blob {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .checked(op)
    }

    pub fn add(&self, other: &Blob) -> Result<Blob> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Blob) -> Result<Blob> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Blob) -> Result<Blob> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Blob> {
        self.map(|v| v * s).checked("scale")
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Blob) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, row: &Blob) -> Result<Blob> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, b) in out.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(&row.data)
            {
                *v += b;
            }
        }
        out.checked("add_row")
    }

    /// Sum of each row, as a `rows×1` blob.
    pub fn row_sum(&self) -> Blob {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Blob {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Sum of each column, as a `1×cols` blob. Rows are added in ascending order.
    pub fn col_sum(&self) -> Blob {
        let mut data = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in data.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        Blob {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sigmoid(&self) -> Blob {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Blob {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Blob {
        self.map(|v| v.max(0.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Blob> {
        if self.cols == 0 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: self.shape(),
                rhs: (self.rows, 1),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out.checked("softmax_rows")
    }

    /// Copy of rows `[start, start+len)`.
    pub fn rows_range(&self, start: usize, len: usize) -> Blob {
        Blob {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, start+len)`.
    pub fn cols_range(&self, start: usize, len: usize) -> Blob {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Blob {
            rows: self.rows,
            cols: len,
            data,
        }
    }
}

/// Logistic function, evaluated without overflow for large negative inputs.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matrix product `op(a) · op(b)` where `op` optionally transposes.
///
/// Each output element is accumulated from zero in ascending inner index, so
/// the result equals the naive triple loop bit for bit.
pub fn gemm(a: &Blob, b: &Blob, transpose_a: bool, transpose_b: bool) -> Result<Blob> {
    let ta;
    let a = if transpose_a {
        ta = a.transpose();
        &ta
    } else {
        a
    };
    let tb;
    let b = if transpose_b {
        tb = b.transpose();
        &tb
    } else {
        b
    };
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "gemm",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Blob::zeros(m, n);
    for i in 0..m {
        let crow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    out.checked("gemm")
}

/// Contiguous partition along `dim`; remainder goes to the lowest indices.
pub fn slice(a: &Blob, dim: Dim, parts: usize) -> Result<Vec<Blob>> {
    let extent = match dim {
        Dim::Rows => a.rows,
        Dim::Cols => a.cols,
    };
    let sizes = split_sizes(extent, parts)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(parts);
    for len in sizes {
        out.push(match dim {
            Dim::Rows => a.rows_range(start, len),
            Dim::Cols => a.cols_range(start, len),
        });
        start += len;
    }
    Ok(out)
}

/// Inverse of [`slice`]: joins blobs along `dim` in order.
pub fn concat(parts: &[Blob], dim: Dim) -> Result<Blob> {
    let refs: Vec<&Blob> = parts.iter().collect();
    concat_refs(&refs, dim)
}

pub fn concat_refs(parts: &[&Blob], dim: Dim) -> Result<Blob> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Partition("concat of an empty list".into()))?;
    match dim {
        Dim::Rows => {
            let cols = first.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                if p.cols != cols {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: first.shape(),
                        rhs: p.shape(),
                    });
                }
                data.extend_from_slice(&p.data);
                rows += p.rows;
            }
            Ok(Blob { rows, cols, data })
        }
        Dim::Cols => {
            let rows = first.rows;
            if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: bad.shape(),
                });
            }
            let cols: usize = parts.iter().map(|p| p.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Ok(Blob { rows, cols, data })
        }
    }
}
