//! Dense tensors and tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain n-dimensional value (row-major, contiguous).
//! Differentiable computation goes through a [`Tape`]: leaves are registered
//! with [`Tape::leaf`], operations on the returned [`Var`] handles record
//! nodes, and [`Var::backward`] populates gradients.
//!
//! Backward passes are themselves recorded as ordinary tape operations, so a
//! scalar built from a gradient (e.g. the squared norm of an input gradient)
//! can be differentiated again by a second backward call. The training
//! regularizers rely on this.

mod gradcheck;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var};

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Storage precision of a tensor element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type of a tensor. "Standard" precision is `f32`,
/// "high" precision is `f64`; oracles and verification run in high precision.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
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
    /// The next representable value one ulp toward `target`.
    fn next_toward(self, target: Self) -> Self;
}

macro_rules! impl_next_toward {
    ($t:ty, $bits:ty) => {
        fn next_toward(self, target: Self) -> Self {
            if self == target || self.is_nan() || target.is_nan() {
                return target;
            }
            if self == 0.0 {
                let tiny = <$t>::from_bits(1);
                return if target > 0.0 { tiny } else { -tiny };
            }
            let bits = self.to_bits();
            let toward_zero = (self > 0.0) == (target < self);
            let next = if toward_zero { bits - 1 } else { bits + 1 };
            <$t>::from_bits(next as $bits)
        }
    };
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    impl_next_toward!(f32, u32);
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }

    impl_next_toward!(f64, u64);
}

/// Dense n-dimensional array, row-major. A scalar has the empty shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Uniform samples in `[lo, hi)`, drawn in f64 then converted.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn uniformly from {-1, +1}.
    pub fn rand_rademacher(shape: &[usize], rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                if rng.gen::<bool>() {
                    E::one()
                } else {
                    -E::one()
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elementwise a*x + self, shapes must match.
    pub fn axpy(&self, alpha: f64, x: &Tensor<E>) -> Result<Self> {
        if self.shape != x.shape {
            return Err(Error::Dimension(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.shape, x.shape
            )));
        }
        let a = E::from_f64(alpha);
        let data = self
            .data
            .iter()
            .zip(&x.data)
            .map(|(&s, &v)| s + a * v)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn dot(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "dot shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    /// Frobenius norm (plain 2-norm of all entries).
    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::DTYPE.byte_width());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let w = E::DTYPE.byte_width();
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * w {
            return Err(Error::Format(format!(
                "expected {} bytes for shape {:?}, got {}",
                numel * w,
                shape,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(w).map(E::read_le).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
