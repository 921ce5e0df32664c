//! Dense f64 tensors with a reverse-mode tape.

mod adam;
mod checkpoint;
mod kernels;
pub mod primitive;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use primitive::PrimitiveOp;
pub use tape::{Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        if numel(&dims) != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {} values, got {}",
                numel(&dims),
                values.len()
            )));
        }
        Ok(Tensor {
            dims,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            values: vec![v; numel(dims)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            values: (0..numel(dims)).map(f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Square identity matrix, or the leading-diagonal ones of a rectangular one.
    pub fn eye(rows: usize, cols: usize) -> Self {
        Self::from_fn(
            &[rows, cols],
            |i| if i / cols == i % cols { 1.0 } else { 0.0 },
        )
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of {} values",
                g.len(),
                self.values.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if numel(dims) != self.values.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Copy of the leading block `[0..dims[0], 0..dims[1], ...]`.
    pub fn leading_slice(&self, dims: &[usize]) -> Result<Tensor> {
        if dims.len() != self.dims.len() || dims.iter().zip(&self.dims).any(|(a, b)| a > b) {
            return Err(Error::Capacity(format!(
                "cannot take a {dims:?} slice of a {:?} tensor",
                self.dims
            )));
        }
        let src_strides = kernels::strides(&self.dims);
        let dst_strides = kernels::strides(dims);
        let out = (0..numel(dims))
            .map(|flat| {
                let src: usize = dst_strides
                    .iter()
                    .zip(&src_strides)
                    .zip(dims)
                    .map(|((ds, ss), &d)| (flat / ds) % d * ss)
                    .sum();
                self.values[src]
            })
            .collect();
        Tensor::new(dims.to_vec(), out)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_extent() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn leading_slice_takes_top_left_block() {
        let t = Tensor::from_fn(&[3, 4], |i| i as f64);
        let s = t.leading_slice(&[2, 2]).unwrap();
        assert_eq!(s.values(), &[0.0, 1.0, 4.0, 5.0]);
        assert!(t.leading_slice(&[4, 1]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
