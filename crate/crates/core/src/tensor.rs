//! Dense 2-D f64 tensors and the pure math shared by the whole crate.
//!
//! Everything is row-major `Vec<f64>`. Vectors are 1xN rows. There is no
//! broadcasting: shape mismatches are hard errors, which keeps silent
//! numerical bugs out of the training loop.

use crate::rng::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: (usize, usize),
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                op: "new",
                len: data.len(),
                shape: (rows, cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::Empty { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "from_rows",
                    a: (1, cols),
                    b: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn uniformly from (-bound, bound).
    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
        Tensor { rows, cols, data }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, which for a flattened parameter is its L2 norm.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, b: &Tensor, op: &'static str) -> Result<(), NumericsError> {
        if self.shape() != b.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                a: self.shape(),
                b: b.shape(),
            });
        }
        Ok(())
    }

    /// C = A B for (m x k)(k x n). ikj loop order for cache locality.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        if self.cols != b.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                a: self.shape(),
                b: b.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = self.data[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a_ip * brow[j];
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// C = A B^T for (m x k)(n x k), used by attention scores.
    pub fn matmul_transb(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        if self.cols != b.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_transb",
                a: self.shape(),
                b: b.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, b.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.same_shape(b, "add")?;
        Ok(self.zip(b, |x, y| x + y))
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.same_shape(b, "sub")?;
        Ok(self.zip(b, |x, y| x - y))
    }

    pub fn hadamard(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.same_shape(b, "hadamard")?;
        Ok(self.zip(b, |x, y| x * y))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    /// Adds a 1xN bias row to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, NumericsError> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                a: self.shape(),
                b: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bias.data[c];
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            softmax_in_place(row);
        }
        out
    }

    /// Row-wise log-softmax via logsumexp.
    pub fn log_softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Per-row standardization: (x - mean) / sqrt(var + eps), no affine part.
    pub fn layer_norm_rows(&self, eps: f64) -> Tensor {
        let mut out = self.clone();
        let n = self.cols as f64;
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
        out
    }

    /// Column means as a 1xN row.
    pub fn mean_rows(&self) -> Result<Tensor, NumericsError> {
        if self.rows == 0 {
            return Err(NumericsError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(Tensor {
            rows: 1,
            cols: self.cols,
            data: out,
        })
    }

    /// Columns [start, end) as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, NumericsError> {
        if start >= end || end > self.cols {
            return Err(NumericsError::OutOfRange {
                op: "slice_cols",
                index: end,
                bound: self.cols,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        Ok(Tensor {
            rows: self.rows,
            cols: w,
            data,
        })
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat_cols" });
        }
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    a: (rows, parts[0].cols),
                    b: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }
}

/// log(sum(exp(xs))) computed against the row max, so large logits do not
/// overflow and softmax/cross-entropy stay shift-invariant.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Cross-entropy of one logit row against an integer target:
/// logsumexp(logits) - logits[target].
pub fn cross_entropy_logits(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::OutOfRange {
            op: "cross_entropy_logits",
            index: target,
            bound: logits.len(),
        });
    }
    Ok(logsumexp(logits) - logits[target])
}
