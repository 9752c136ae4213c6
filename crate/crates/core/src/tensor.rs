//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and a [`Shape`]; there are no views
//! or strides and no broadcasting. Feature maps use `[height, width,
//! channels]` ordering. The element type doubles as the precision tag:
//! `f32` for training, `f64` for finite-difference checking.

use std::fmt::{self, Debug};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Floating-point element type a tensor can hold.
pub trait Element:
    Float + FromPrimitive + NumAssignOps + Sum + Default + Debug + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion is total")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion is total")
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;
}

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be 1..={MAX_RANK}, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(dims.to_vec()))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("elem", &std::any::type_name::<T>())
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &Shape, value: T) -> Self {
        let t = Tensor {
            shape: shape.clone(),
            data: vec![value; shape.numel()],
        };
        t.debug_check();
        t
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&Shape::new(&[n, n])?);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
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

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::shape(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn debug_check(&self) {
        debug_assert_eq!(self.data.len(), self.shape.numel());
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.dims() {
            &[r, c] => Ok((r, c)),
            d => Err(Error::shape(format!("{what} must be a matrix, got {d:?}"))),
        }
    }
}

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul lhs")?;
    let (k2, n) = b.matrix_dims("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// `c += a · b`, all row-major, `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aik == T::zero() {
                continue;
            }
            for (c, &bkj) in c_row.iter_mut().zip(b_row) {
                *c += aik * bkj;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&aki, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            if aki == T::zero() {
                continue;
            }
            for (c, &bkj) in c_row.iter_mut().zip(b_row) {
                *c += aki * bkj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (c, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c += acc;
        }
    }
}
