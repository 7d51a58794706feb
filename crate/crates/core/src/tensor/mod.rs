//! Dense row-major tensors, a tape-based reverse-mode graph, Adam and
//! finite-difference gradient checking.
//!
//! Storage is generic over [`Real`] so the same model code can run in `f32`
//! for training and in `f64` for numerical verification. Every primitive
//! computes in `f64` and rounds once when storing its output.

mod adam;
mod gradcheck;
mod graph;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real: Copy + Debug + Default + PartialEq + PartialOrd + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Little-endian bytes of the value, used for fingerprints.
    fn le_bytes(self) -> Vec<u8>;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

/// A dense tensor with positive dimensions and row-major storage.
///
/// Most operations treat a tensor as a matrix: a 1-D tensor of length `n`
/// behaves as a `1 × n` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![F::from_f64(value); n]).expect("positive shape")
    }

    /// A `1 × n` row.
    pub fn row(values: &[f64]) -> Self {
        Self::from_f64(&[1, values.len()], values).expect("nonempty row")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Matrix view of the shape: `(rows, cols)`. Higher-rank tensors fold all
    /// leading dimensions into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c].to_f64()
    }

    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        let c = self.cols();
        self.data[r * c..(r + 1) * c]
            .iter()
            .map(|v| v.to_f64())
            .collect()
    }

    /// Copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        Self::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    /// Stack `1 × n` (or `k × n`) tensors vertically.
    pub fn concat_rows(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {c} vs {}", p.cols()),
                ));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(&[rows, c], data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Feeds shape and raw bytes into a hasher.
    pub fn hash_into(&self, hasher: &mut impl sha2::Digest) {
        for d in &self.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.le_bytes());
        }
    }
}
