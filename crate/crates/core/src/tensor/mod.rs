//! Minimal dense tensor kernel with a define-by-run reverse-mode tape.
//!
//! Tensors are row-major and at most rank 2 in practice. Training runs in
//! `f32`; every kernel is generic over [`Scalar`] so the same graph can be
//! evaluated in `f64` for finite-difference gradient checks.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod rng;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub(crate) use checkpoint::hex;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use graph::{Gradients, Graph, NodeId, Segment};
pub(crate) use graph::softmax_in_place;
pub use optim::{warmup_lr, AdamW, AdamWConfig, OptimizerState};
pub use params::ParamSet;
pub use rng::SeededRng;

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices that cover every strided element; the
        // bounds are asserted by `gemm_bounds_ok` in debug builds.
        debug_assert!(gemm_bounds_ok(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc));
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(gemm_bounds_ok(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc));
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_bounds_ok(
    m: usize,
    k: usize,
    n: usize,
    alen: usize,
    rsa: isize,
    csa: isize,
    blen: usize,
    rsb: isize,
    csb: isize,
    clen: usize,
    rsc: isize,
    csc: isize,
) -> bool {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> isize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs
        }
    };
    let ok = |rows, cols, rs, cs, len: usize| rows == 0 || cols == 0 || (last(rows, cols, rs, cs) as usize) < len;
    ok(m, k, rsa, csa, alen) && ok(k, n, rsb, csb, blen) && ok(m, n, rsc, csc, clen)
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Tensor(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Tensor("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.iter().flatten().copied().collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Keeps only the listed columns of a rank-2 (or rank-1) tensor.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        let c = self.cols();
        if columns.is_empty() || columns.iter().any(|&j| j >= c) {
            return Err(Error::Tensor(format!("column selection {columns:?} out of range for {c} columns")));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * columns.len());
        for i in 0..rows {
            let row = self.row(i);
            data.extend(columns.iter().map(|&j| row[j]));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("non-empty shape") = columns.len();
        Tensor::new(shape, data)
    }
}
