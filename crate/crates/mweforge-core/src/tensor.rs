//! Dense row-major tensors over a generic scalar.
//!
//! Shapes are explicit: elementwise operations require equal shapes, and the
//! only broadcast form anywhere in the crate is adding a bias vector to every
//! row of a matrix. Scalars are rank-0 tensors (empty shape, one element).

use std::fmt;

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: String, lhs: String, rhs: String },
    #[error("{op} requires a square matrix, got {shape}")]
    NotSquare { op: String, shape: String },
    #[error("{op} requires a matrix, got {shape}")]
    NotMatrix { op: String, shape: String },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: String,
        index: usize,
        size: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// Dense row-major tensor. Rank 0 (scalar), 1 (vector), and 2 (matrix) are
/// the only ranks the crate uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "data length {} does not match shape {}",
            data.len(),
            shape_string(&shape)
        );
        Self { shape, data }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested row slices; rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn shape_string(&self) -> String {
        shape_string(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Number of rows when viewed as a matrix (vectors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-singleton tensor");
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: op.to_string(),
                lhs: self.shape_string(),
                rhs: other.shape_string(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(S, S) -> S) -> Result<Self, TensorError> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    /// Accumulates `other` into `self` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if !self.is_matrix() || !other.is_matrix() {
            return Err(TensorError::NotMatrix {
                op: "matmul".to_string(),
                shape: if self.is_matrix() {
                    other.shape_string()
                } else {
                    self.shape_string()
                },
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul".to_string(),
                lhs: self.shape_string(),
                rhs: other.shape_string(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        Ok(Self::matrix(m, n, out))
    }

    pub fn transpose(&self) -> Self {
        match self.shape.len() {
            2 => {
                let (r, c) = (self.shape[0], self.shape[1]);
                let mut data = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = self.data[i * c + j];
                    }
                }
                Self::matrix(c, r, data)
            }
            _ => self.clone(),
        }
    }

    /// Copy with the main diagonal zeroed. Square matrices only.
    pub fn zero_diag(&self) -> Result<Self, TensorError> {
        if !self.is_matrix() || self.shape[0] != self.shape[1] {
            return Err(TensorError::NotSquare {
                op: "zero_diag".to_string(),
                shape: self.shape_string(),
            });
        }
        let n = self.shape[0];
        let mut out = self.clone();
        for i in 0..n {
            out.data[i * n + i] = S::zero();
        }
        Ok(out)
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self, TensorError> {
        if !self.is_matrix() || bias.shape.len() != 1 || bias.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias".to_string(),
                lhs: self.shape_string(),
                rhs: bias.shape_string(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = self.clone();
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = out.data[i * c + j] + bias.data[j];
            }
        }
        Ok(out)
    }

    /// Sums each column of a matrix into a vector of length `cols`.
    pub fn column_sums(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + self.data[i * c + j];
            }
        }
        Self::vector(out)
    }

    /// Row shift with zero padding: `out[i] = self[i + offset]` where valid.
    pub fn shift_rows(&self, offset: isize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[r, c]);
        for i in 0..r {
            let src = i as isize + offset;
            if src >= 0 && (src as usize) < r {
                let src = src as usize;
                out.data[i * c..(i + 1) * c].copy_from_slice(&self.data[src * c..(src + 1) * c]);
            }
        }
        out
    }

    /// Step function: 1 where x > 0, 0 where x <= 0.
    pub fn heaviside(&self) -> Self {
        self.map(|v| if v > S::zero() { S::one() } else { S::zero() })
    }

    /// Scaled logistic: 1 / (1 + exp(-k x)).
    pub fn sigmoid_k(&self, k: S) -> Self {
        self.map(|v| sigmoid_scalar(v, k))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = self.clone();
        for i in 0..r {
            let row = &mut out.data[i * c..(i + 1) * c];
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        out
    }

    /// Index of the maximum entry per row, first occurrence on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (r, c) = (self.rows(), self.cols());
        (0..r)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S, k: S) -> S {
    S::one() / (S::one() + (-(k * x)).exp())
}

impl<S: Scalar> fmt::Display for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}]", self.shape_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Tensor::identity(2);
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn matmul_inner_product() {
        let a = Tensor::<f64>::matrix(1, 2, vec![1.0, 2.0]);
        let b = Tensor::<f64>::matrix(2, 1, vec![3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message was {msg}");
    }

    #[test]
    fn zero_diag_examples() {
        let id = Tensor::<f64>::identity(3);
        assert_eq!(id.zero_diag().unwrap(), Tensor::zeros(&[3, 3]));
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(z.zero_diag().unwrap(), z);
        let m = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let zd = m.zero_diag().unwrap();
        assert_eq!(zd.data(), &[0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_diag_rejects_non_square() {
        let m = Tensor::<f64>::zeros(&[2, 3]);
        assert!(m.zero_diag().is_err());
    }

    #[test]
    fn heaviside_matches_step_definition() {
        let t = Tensor::<f64>::vector(vec![0.5, 0.0, -2.0]);
        assert_eq!(t.heaviside().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_half_at_zero_for_any_k() {
        for k in [0.5f64, 1.0, 10.0, 100.0] {
            let t = Tensor::scalar(0.0);
            assert_eq!(t.sigmoid_k(k).item(), 0.5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]);
        let p = t.softmax_rows();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_rows_pads_with_zeros() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let up = t.shift_rows(1);
        assert_eq!(up.data(), &[2.0, 3.0, 0.0]);
        let down = t.shift_rows(-1);
        assert_eq!(down.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn works_for_f32_too() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = a.add(&a).unwrap();
        assert_eq!(b.data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
