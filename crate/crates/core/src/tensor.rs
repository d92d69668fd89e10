//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the plain inference path.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("label {label} at position {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Shaped array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.is_empty() {
            return Err(NnError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::InvalidShape {
                shape: vec![rows.len(), cols],
                len: data.len(),
            });
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix; a vector counts as a single row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.shape.len() == 2 {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            })
        }
    }

    /// `self [m×k] · other [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.require_matrix("add_row")?;
        let n = self.shape[1];
        if row.len() != n {
            return Err(NnError::ShapeMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Column-wise mean of a matrix, returned as a vector.
    pub fn mean_rows(&self) -> Result<Tensor> {
        self.require_matrix("mean_rows")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n];
        for chunk in self.data.chunks(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Tensor::vector(out))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        self.require_matrix("slice_cols")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if start >= end || end > n {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                left: self.shape.clone(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data: out,
        })
    }

    /// Contiguous range of a vector.
    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.len() != 1 || start >= end || end > self.len() {
            return Err(NnError::ShapeMismatch {
                op: "slice",
                left: self.shape.clone(),
                right: vec![start, end],
            });
        }
        Ok(Tensor::vector(self.data[start..end].to_vec()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= self.rows()) {
            return Err(NnError::ShapeMismatch {
                op: "select_rows",
                left: self.shape.clone(),
                right: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data: out })
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("concat_cols")?;
        other.require_matrix("concat_cols")?;
        if self.shape[0] != other.shape[0] {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (a, b) = (self.shape[1], other.shape[1]);
        let mut out = Vec::with_capacity(self.len() + other.len());
        for i in 0..self.shape[0] {
            out.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            out.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Ok(Tensor {
            shape: vec![self.shape[0], a + b],
            data: out,
        })
    }
}

/// `x [B×d_in] · w [d_in×d_out] + b [d_out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape().len() != 1 || w.shape().len() != 2 || b.len() != w.shape()[1] {
        return Err(NnError::ShapeMismatch {
            op: "dense_forward",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    x.matmul(w)
        .map_err(|_| NnError::ShapeMismatch {
            op: "dense_forward",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        })?
        .add_row(b)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(NnError::ShapeMismatch {
            op: "softmax_nll",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let k = logits.cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(NnError::LabelOutOfRange {
            index,
            label,
            classes: k,
        });
    }
    Ok(())
}

/// Summed negative log-likelihood of `labels` under row-wise softmax.
pub fn softmax_nll(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax_row(logits.row(i))[y])
        .sum())
}

pub(crate) fn validate_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    check_labels(logits, labels)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_and_sum() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (bsz, din, dout) = (3, 4, 2);
        let x = random(&mut rng, &[bsz, din]);
        let w = random(&mut rng, &[din, dout]);
        let b = random(&mut rng, &[dout]);
        let out = dense_forward(&x, &w, &b).unwrap();
        for i in 0..bsz {
            for j in 0..dout {
                let mut acc = b.data()[j];
                for k in 0..din {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((out.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_mismatch_names_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        let err = dense_forward(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn dense_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = random(&mut rng, &[3, 4]);
        let x2 = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let b = Tensor::zeros(&[5]);
        let (a, c) = (0.7, -1.3);
        let mix = x1.scale(a).add(&x2.scale(c)).unwrap();
        let lhs = dense_forward(&mix, &w, &b).unwrap();
        let rhs = dense_forward(&x1, &w, &b)
            .unwrap()
            .scale(a)
            .add(&dense_forward(&x2, &w, &b).unwrap().scale(c))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&Tensor::vector(vec![-1.0, -3.0])).data(), &[0.0, 0.0]);
        let pos = Tensor::vector(vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_nll_values() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!((softmax_nll(&l, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let l = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let expected = (1.0 + (-20f64).exp()).ln();
        let got = softmax_nll(&l, &[0]).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 2.06e-9).abs() < 1e-11);
        let l = Tensor::from_rows(&[vec![0.0; 4]]).unwrap();
        assert!((softmax_nll(&l, &[3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_nll_rejects_bad_label() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            softmax_nll(&l, &[2]),
            Err(NnError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn softmax_nll_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let l = random(&mut rng, &[4, 5]).scale(5.0);
            let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let c = rng.random_range(-50.0..50.0);
            let shifted = l.map(|v| v + c);
            let a = softmax_nll(&l, &y).unwrap();
            let b = softmax_nll(&shifted, &y).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }
}
