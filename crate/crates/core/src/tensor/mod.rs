//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! [`Tensor`] owns values and an optional gradient buffer and is what models
//! store as parameters. A forward pass copies parameters onto a [`Tape`] as
//! leaves, records every operation, and [`Tape::backward`] walks the record in
//! reverse. Gradients of named parameter leaves are read back with
//! [`Tape::param_grads`] and accumulated into the owning tensors.

mod kernels;
mod optim;
mod rng;
pub mod shape;
mod tape;

pub use optim::{optimizer_step, OptimizerState};
pub use rng::{derive_seed, rng_normal, SeededRng};
pub use tape::{backward, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Degenerate(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if shape::numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    /// # Panics
    /// If any extent is zero.
    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape::numel(&shape);
        Tensor::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Degenerate("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let st = shape::strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape::numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Overwrites the values, keeping shape and gradient state.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::shape("assign", &self.shape, &[values.len()]));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    /// Equal shapes and bit-identical values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, p) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::new(vec![m, p], kernels::batched_matmul(&a.data, &b.data, 1, m, k, p))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= v.shape.len() {
        return Err(Error::Degenerate(format!(
            "softmax axis {axis} out of range for {:?}",
            v.shape
        )));
    }
    if v.data.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    Tensor::new(v.shape.clone(), kernels::softmax(&v.data, &v.shape, axis))
}

/// Population mean and variance over `axes`, returned with the reduced
/// extents kept as 1 so they broadcast back onto `t`.
pub fn moments(t: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let out_shape = shape::reduced_shape(&t.shape, axes)?;
    let map = shape::broadcast_map(&out_shape, &t.shape)?;
    let out_len = shape::numel(&out_shape);
    let count = (t.numel() / out_len) as f64;
    let mut mean = kernels::reduce_sum(&t.data, &map, out_len);
    mean.iter_mut().for_each(|m| *m /= count);
    let sq: Vec<f64> = t
        .data
        .iter()
        .zip(&map)
        .map(|(x, &o)| (x - mean[o]) * (x - mean[o]))
        .collect();
    let mut var = kernels::reduce_sum(&sq, &map, out_len);
    var.iter_mut().for_each(|v| *v /= count);
    Ok((
        Tensor::new(out_shape.clone(), mean)?,
        Tensor::new(out_shape, var)?,
    ))
}
