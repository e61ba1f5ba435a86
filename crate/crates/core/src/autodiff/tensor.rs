use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`]. Implemented for `f64`
/// (the default everywhere) and `f32`.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<R = f64> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, R::one())
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<R>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows<S: AsRef<[R]>>(rows: &[S]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidTensor(format!(
                    "row {} has {} values, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> R {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidTensor(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> R {
        self.data.iter().fold(R::zero(), |a, &b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Element-type conversion.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| S::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(S::nan))
                .collect(),
        }
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Appends the rows of `other` (equal column counts required).
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::InvalidTensor(format!(
                "cannot stack {:?} on {:?}",
                other.shape, self.shape
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(vec![self.shape[0] + other.shape[0], self.cols()], data)
    }
}

/// `op(a) * op(b)` for row-major matrices, with optional transposition of
/// either side. `a` is `a_rows x a_cols` as stored.
pub(crate) fn gemm<R: Real>(
    a: &[R],
    a_rows: usize,
    a_cols: usize,
    transpose_a: bool,
    b: &[R],
    b_rows: usize,
    b_cols: usize,
    transpose_b: bool,
) -> Vec<R> {
    let (m, k) = if transpose_a {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let n = if transpose_b { b_rows } else { b_cols };
    let mut out = vec![R::zero(); m * n];
    match (transpose_a, transpose_b) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * a_cols + p];
                    if av == R::zero() {
                        continue;
                    }
                    let brow = &b[p * b_cols..(p + 1) * b_cols];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * a_cols..(i + 1) * a_cols];
                for j in 0..n {
                    let brow = &b[j * b_cols..(j + 1) * b_cols];
                    let mut s = R::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        s = s + x * y;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, false) => {
            // a stored k x m
            for p in 0..k {
                let arow = &a[p * a_cols..(p + 1) * a_cols];
                let brow = &b[p * b_cols..(p + 1) * b_cols];
                for (i, &av) in arow.iter().enumerate() {
                    if av == R::zero() {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = R::zero();
                    for p in 0..k {
                        s = s + a[p * a_cols + i] * b[j * b_cols + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    out
}
