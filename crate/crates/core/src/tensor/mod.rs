//! Dense f64 tensors with a reverse-mode gradient tape.
//!
//! Tensors are immutable row-major values (shape + flat data). All exported
//! operations are deterministic: summation orders are fixed, so identical
//! inputs produce bitwise-identical outputs. Gradient tracking lives in
//! [`Tape`]; plain `Tensor` methods and tape operations share the same
//! numeric kernels, so a tracked forward pass computes exactly the same
//! values as the untracked one.

pub(crate) mod kernels;
mod serial;
mod tape;

pub use serial::{read_tensor, write_tensor};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Reduction kind for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Ties resolve to the first (lowest linear index) element; the tape
    /// routes the max gradient to that element only.
    Max,
}

/// Dense n-dimensional array: row-major f64 data plus shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()` and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("product is {numel} but data has {} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by kernels that cannot create
    /// non-finite entries from finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
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

    /// Single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Value at a full multi-index. Panics on rank or bounds mismatch; meant
    /// for tests and small readers, not hot loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut linear = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} ({dim})");
            linear = linear * dim + ix;
        }
        self.data[linear]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} values into it", self.data.len()),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&a| f(a)).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("add_scalar", |a| a + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("mul_scalar", |a| a * s)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data.iter().map(|&a| a.abs()).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Reduce over `axes` (empty slice = all axes). Mean divides the ordered
    /// sum by the reduced element count once, at the end.
    pub fn reduce(&self, op: Reduce, axes: &[usize]) -> Result<Tensor> {
        let plan = kernels::ReducePlan::new(&self.shape, axes)?;
        Ok(match op {
            Reduce::Sum => plan.sum(&self.data),
            Reduce::Mean => plan.mean(&self.data),
            Reduce::Max => plan.max(&self.data).0,
        })
    }

    /// 2-D cross-correlation of a `[C,H,W]` input with an `[O,C,kh,kw]`
    /// kernel (odd kh/kw), zero padding `pad`, equal stride on both axes.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let spec = kernels::ConvSpec::new(&self.shape, &kernel.shape, stride, pad)?;
        Ok(kernels::conv2d_forward(&spec, &self.data, &kernel.data))
    }

    /// Bilinear resize of a `[C,h,w]` tensor to `[C,H,W]`, half-pixel center
    /// alignment (align-corners false). Constant inputs map to the same
    /// constant exactly.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Tensor> {
        let spec = kernels::ResizeSpec::new(&self.shape, height, width)?;
        Ok(kernels::resize_forward(&spec, &self.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.mul_scalar(0.0).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(c.relu().data(), &[0.0, 2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn reduce_examples() {
        let a = Tensor::new(vec![3], vec![0.5, 2.0, 1.0]).unwrap();
        assert_eq!(a.reduce(Reduce::Max, &[]).unwrap().item(), 2.0);

        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = b.reduce(Reduce::Sum, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 7.0]);

        let m = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        assert_eq!(m.reduce(Reduce::Mean, &[]).unwrap().item(), 3.0);
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            a.reduce(Reduce::Sum, &[2]),
            Err(Error::InvalidAxis { .. })
        ));
        let empty = Tensor::zeros(&[2, 0]);
        assert!(matches!(
            empty.reduce(Reduce::Sum, &[1]),
            Err(Error::EmptyReduction { .. })
        ));
    }

    #[test]
    fn new_rejects_bad_length_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn div_by_zero_is_caught() {
        let a = Tensor::new(vec![1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(a.div(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scalar_tensor_round_trip() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.25);
        assert_eq!(s.reduce(Reduce::Sum, &[]).unwrap().item(), 4.25);
    }
}
