//! Dense row-major `f64` matrices.

use std::fmt;

use super::NumError;

/// A dense real matrix stored row-major.
///
/// Values are never mutated through the public API after construction, so a
/// `Matrix` can be shared freely between threads.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Entrywise binary operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumError::RaggedRows {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix from column-major data, the layout used on disk.
    pub fn from_col_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        let mut out = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                out.data[r * cols + c] = data[c * rows + r];
            }
        }
        Ok(out)
    }

    pub fn to_col_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        out
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Returns a copy with entry `(r, c)` replaced.
    pub fn with_entry(&self, r: usize, c: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[r * self.cols + c] = value;
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        matmul(self, rhs)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        elementwise(self, rhs, Elementwise::Add)
    }

    pub fn mul(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        elementwise(self, rhs, Elementwise::Mul)
    }

    pub fn relu(&self) -> Matrix {
        relu(self)
    }

    pub fn tanh(&self) -> Matrix {
        self.map(f64::tanh)
    }

    /// Multiplies column `c` by `weights[c]` (a gate replicated down every row).
    pub fn mul_row_broadcast(&self, weights: &Matrix) -> Result<Matrix, NumError> {
        if weights.rows != 1 || weights.cols != self.cols {
            return Err(NumError::shape("mul_row_broadcast", self, weights));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] *= weights.data[c];
            }
        }
        Ok(out)
    }

    /// Adds the column vector `bias` to every column.
    pub fn add_col_broadcast(&self, bias: &Matrix) -> Result<Matrix, NumError> {
        if bias.cols != 1 || bias.rows != self.rows {
            return Err(NumError::shape("add_col_broadcast", self, bias));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias.data[r];
            }
        }
        Ok(out)
    }

    /// Permutes columns so that output column `i` is input column `perm[i]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.cols);
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (i, &src) in perm.iter().enumerate() {
                out.data[r * self.cols + i] = self.data[r * self.cols + src];
            }
        }
        out
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumError> {
    if a.cols != b.rows {
        return Err(NumError::shape("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

pub fn elementwise(a: &Matrix, b: &Matrix, kind: Elementwise) -> Result<Matrix, NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::shape(
            match kind {
                Elementwise::Add => "add",
                Elementwise::Mul => "mul",
            },
            a,
            b,
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match kind {
            Elementwise::Add => x + y,
            Elementwise::Mul => x * y,
        })
        .collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Column-wise softmax of `m / temperature`, stabilised by subtracting each
/// column's maximum before exponentiating.
pub fn softmax_cols(m: &Matrix, temperature: f64) -> Result<Matrix, NumError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NumError::Temperature(temperature));
    }
    let mut out = m.map(|v| v / temperature);
    let (rows, cols) = out.shape();
    for c in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..rows {
            max = max.max(out.data[r * cols + c]);
        }
        let mut total = 0.0;
        for r in 0..rows {
            let e = (out.data[r * cols + c] - max).exp();
            out.data[r * cols + c] = e;
            total += e;
        }
        for r in 0..rows {
            out.data[r * cols + c] /= total;
        }
    }
    Ok(out)
}

/// Entrywise `max(0, x)`.
pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Stacks `a` above `b`.
pub fn concat_rows(a: &Matrix, b: &Matrix) -> Result<Matrix, NumError> {
    if a.cols != b.cols {
        return Err(NumError::shape("concat_rows", a, b));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Matrix {
        rows: a.rows + b.rows,
        cols: a.cols,
        data,
    })
}
