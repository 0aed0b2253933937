//! Dense row-major 2-D tensors and the deterministic matmul kernel.
//!
//! Every operation accumulates in a fixed order that does not depend on the
//! host CPU, so identical inputs give bit-identical outputs for a given build.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("tensor data length {got} does not match shape {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, got: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A dense matrix of scalars. Row vectors are `1 x n` tensors, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::BadDataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Single row vector.
    pub fn from_row(row: &[T]) -> Self {
        Tensor {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    /// Stack f32 rows (the interchange precision) into a `len x cols` tensor.
    pub fn from_f32_rows<'a, I>(rows: I, cols: usize) -> Result<Self, NumError>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut n = 0usize;
        for r in rows {
            if r.len() != cols {
                return Err(NumError::BadDataLength {
                    rows: 1,
                    cols,
                    got: r.len(),
                });
            }
            data.extend(r.iter().map(|&x| T::of_f32(x)));
            n += 1;
        }
        Ok(Tensor { rows: n, cols, data })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.cols + j] = x;
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self (m x k) * rhs (k x n)`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, NumError> {
        if self.cols != rhs.rows {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        gemm_nn_acc(
            &mut out.data,
            &self.data,
            &rhs.data,
            self.rows,
            self.cols,
            rhs.cols,
        );
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, NumError> {
        if self.shape() != rhs.shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    /// Columnwise concatenation `[self | rhs]`; leading dimensions must agree.
    pub fn concat_cols(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, NumError> {
        if self.rows != rhs.rows {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(rhs.row(i));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|x| x * factor)
    }

    pub fn sum_all(&self) -> T {
        // Fixed left-to-right order.
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Sum consecutive blocks of `group` rows: `(g*group) x n -> g x n`.
    pub fn sum_row_groups(&self, group: usize) -> Result<Tensor<T>, NumError> {
        if group == 0 || self.rows % group != 0 {
            return Err(NumError::Contract(format!(
                "sum_row_groups: {} rows not divisible into groups of {}",
                self.rows, group
            )));
        }
        let out_rows = self.rows / group;
        let mut out = Tensor::zeros(out_rows, self.cols);
        for g in 0..out_rows {
            let dst = &mut out.data[g * self.cols..(g + 1) * self.cols];
            for r in 0..group {
                let src = self.row(g * group + r);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(out)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0usize;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`, row-major.
///
/// Loop order is k-outer / i-middle / j-inner: each output element
/// accumulates over k in strictly increasing order, independent of SIMD
/// width, so results are reproducible for a given build.
pub(crate) fn gemm_nn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = a[i * k + kk];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}
