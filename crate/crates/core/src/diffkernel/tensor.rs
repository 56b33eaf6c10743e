//! Dense row-major tensors over f32/f64.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point scalar usable by the kernel.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Vec<usize>) -> Tensor<S> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<S>> {
        Tensor::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Standard normal samples. Draws are made in f64 and cast, so the
    /// same RNG stream yields the same values at either precision.
    pub fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor { shape, data }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        self.map(|v| v * s)
    }

    pub fn add(&self, o: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(o, |a, b| a - b)
    }

    fn zip(&self, o: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != o.shape {
            return Err(Error::Validation(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, o.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&o.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self (m,k) x other (k,n)`.
    pub fn matmul(&self, o: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (o.rows(), o.cols());
        if k != k2 {
            return Err(Error::Validation(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(&self.data, &o.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// `self^T (k,m)^T=(m,k) ... ` i.e. `self (m,k)` transposed times
    /// `o (m,n)` giving `(k,n)`. Used for weight gradients.
    pub fn matmul_at_b(&self, o: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = (self.rows(), self.cols());
        let (m2, n) = (o.rows(), o.cols());
        if m != m2 {
            return Err(Error::Validation(format!(
                "matmul_at_b outer dims {m} vs {m2}"
            )));
        }
        let mut out = Tensor::zeros(vec![k, n]);
        for r in 0..m {
            let a_row = &self.data[r * k..(r + 1) * k];
            let b_row = &o.data[r * n..(r + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(b_row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self (m,n)` times `o (k,n)` transposed, giving `(m,k)`. Used
    /// for input gradients.
    pub fn matmul_a_bt(&self, o: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = (self.rows(), self.cols());
        let (k, n2) = (o.rows(), o.cols());
        if n != n2 {
            return Err(Error::Validation(format!(
                "matmul_a_bt inner dims {n} vs {n2}"
            )));
        }
        let mut out = Tensor::zeros(vec![m, k]);
        for r in 0..m {
            let a_row = &self.data[r * n..(r + 1) * n];
            let dst = &mut out.data[r * k..(r + 1) * k];
            for (j, d) in dst.iter_mut().enumerate() {
                let b_row = &o.data[j * n..(j + 1) * n];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *d = acc;
            }
        }
        Ok(out)
    }

    /// Add a row vector to every row.
    pub fn add_row(&self, row: &Tensor<S>) -> Result<Tensor<S>> {
        if row.len() != self.cols() {
            return Err(Error::Validation(format!(
                "bias width {} vs {} columns",
                row.len(),
                self.cols()
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows() {
            let dst = out.row_mut(r);
            for (d, &b) in dst.iter_mut().zip(&row.data) {
                *d += b;
            }
        }
        Ok(out)
    }

    /// Sum over rows, giving a row vector.
    pub fn col_sum(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![n]);
        for r in 0..m {
            for (d, &v) in out.data.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                *d += v;
            }
        }
        out
    }
}

/// `c += a (m,k) x b (k,n)`, written so LLVM vectorizes the inner row
/// accumulation.
fn matmul_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}
