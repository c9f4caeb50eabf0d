//! Plain tensor values, boolean masks, and the scalar trait.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// f64 math routed through `num_traits::Float`, so the crate builds the
/// same with or without std in the dependency graph.
pub(crate) mod fmath {
    pub fn sqrt(x: f64) -> f64 {
        num_traits::Float::sqrt(x)
    }

    pub fn powf(x: f64, e: f64) -> f64 {
        num_traits::Float::powf(x, e)
    }

    pub fn sin(x: f64) -> f64 {
        num_traits::Float::sin(x)
    }

    pub fn cos(x: f64) -> f64 {
        num_traits::Float::cos(x)
    }

    pub fn ln(x: f64) -> f64 {
        num_traits::Float::ln(x)
    }

    pub fn exp(x: f64) -> f64 {
        num_traits::Float::exp(x)
    }

    pub fn powi(x: f64, e: i32) -> f64 {
        num_traits::Float::powi(x, e)
    }
}

/// Floating-point width the numerics run at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar type of every tensor. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + core::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor value with no autodiff attached.
///
/// Scalars have an empty shape. The invariant `data.len() == numel(shape)`
/// holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

impl<T: Real> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Identity matrix scaled by `c`.
    pub fn scaled_identity(d: usize, c: T) -> Self {
        let mut out = Self::zeros(vec![d, d]);
        for i in 0..d {
            out.data[i * d + i] = c;
        }
        out
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Concatenate along `axis`, used by the decode cache when growing the
    /// time dimension of stored states.
    pub fn concat(axis: usize, parts: &[&TensorData<T>]) -> Result<Self> {
        let first = parts[0];
        let rank = first.shape.len();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape.len() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let slab = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * slab..(o + 1) * slab]);
            }
        }
        Ok(Self { shape, data })
    }
}

/// A trainable tensor with a stable name. Parameter names key the optimizer
/// state, checkpoints, and gradient lookups.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: TensorData<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: String, value: TensorData<T>) -> Self {
        Self { name, value }
    }
}

/// Boolean mask; `true` marks a position that participates.
///
/// Masks broadcast right-aligned against a tensor shape: every mask extent
/// must equal the tensor extent or be 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if numel(&shape) != keep.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_new",
                lhs: shape,
                rhs: vec![keep.len()],
            });
        }
        Ok(Self { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Stride table for broadcasting this mask over `target`: 0 where the
    /// mask extent is 1 or the dimension is missing.
    pub(crate) fn broadcast_strides(&self, op: &'static str, target: &[usize]) -> Result<Vec<usize>> {
        if self.shape.len() > target.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - self.shape.len();
        let own = row_major_strides(&self.shape);
        let mut out = vec![0usize; target.len()];
        for (i, &ext) in self.shape.iter().enumerate() {
            if ext != target[offset + i] && ext != 1 {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: self.shape.clone(),
                    rhs: target.to_vec(),
                });
            }
            out[offset + i] = if ext == 1 { 0 } else { own[i] };
        }
        Ok(out)
    }

    /// Materialize the mask against `target`, one bool per element.
    pub(crate) fn expand_to(&self, op: &'static str, target: &[usize]) -> Result<Vec<bool>> {
        let bstrides = self.broadcast_strides(op, target)?;
        let total = numel(target);
        let strides = row_major_strides(target);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut midx = 0usize;
            for (d, &s) in strides.iter().enumerate() {
                let coord = (flat / s) % target[d];
                midx += coord * bstrides[d];
            }
            out.push(self.keep[midx]);
        }
        Ok(out)
    }
}
