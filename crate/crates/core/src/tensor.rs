//! Dense row-major tensors and the matrix kernels every other module builds on.
//!
//! Kernels accumulate in a fixed sequential order per output element. Row-level
//! parallelism never splits a single dot product, so results are bitwise
//! independent of the worker count.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LrcError, Result};

/// Storage precision tag used by the checkpoint directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (oracle checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LrcError::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows; used mostly by tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LrcError::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::lit(x))).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(LrcError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(LrcError::shape("transpose", format!("{:?} is not 2-D", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(&[c, r], |idx| {
            let (i, j) = (idx / r, idx % r);
            self.data[j * c + i]
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Dense matrix product treating leading axes of `self` as rows.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        if rhs.shape.len() != 2 || rhs.shape[0] != k {
            return Err(LrcError::shape(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", self.shape, rhs.shape),
            ));
        }
        let n = rhs.shape[1];
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = n;
        Ok(Tensor {
            shape,
            data: matmul_nn(&self.data, &rhs.data, m, k, n),
        })
    }

    /// `self · rhsᵀ` where `rhs` is `[n, k]`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        if rhs.shape.len() != 2 || rhs.shape[1] != k {
            return Err(LrcError::shape(
                "matmul_t",
                format!("lhs {:?} vs rhsᵀ of {:?}", self.shape, rhs.shape),
            ));
        }
        let n = rhs.shape[0];
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor {
            shape,
            data: matmul_nt(&self.data, &rhs.data, m, k, n),
        })
    }
}

const PAR_THRESHOLD: usize = 1 << 18;

fn rows_mut<T: Real>(out: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if n == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    rows_mut(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &b) in row.iter_mut().zip(brow) {
                *c += aip * b;
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    rows_mut(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    rows_mut(&mut c, n, m * k * n, |i, row| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &b) in row.iter_mut().zip(brow) {
                *c += api * b;
            }
        }
    });
    c
}

/// Fixed-order dot product with four interleaved partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Row-wise `x − log Σ exp(x)`.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    out
}

/// `log(Σ exp(row))` computed stably.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for &x in row {
        total += (x - max).exp();
    }
    max + total.ln()
}
