//! Dense row-major tensors and the raw kernels behind every graph operation.
//!
//! A [`Tensor`] is an immutable value: public constructors and operations
//! reject NaN and infinities, so any tensor observed outside this crate is
//! finite.

mod broadcast;
mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::real::Real;

pub use broadcast::{broadcast_shape, Expand};
pub(crate) use kernels::{channel_broadcast, conv2d_geom as kernels_conv};
pub use kernels::{
    avg_pool, avg_pool_grad, channel_bias, channel_sum, conv2d_batch, conv2d_input_grad,
    conv2d_weight_grad, log_softmax_rows, matmul_t, softmax_rows, ConvGeom,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking `product(shape) == data.len()` and that every
    /// element is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    /// Wraps data produced by an internal kernel, verifying finiteness.
    pub(crate) fn checked(shape: Vec<usize>, data: Vec<T>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// # Panics
    /// If `value` is not finite.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        assert!(value.is_finite(), "tensor fill value must be finite");
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast_from(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(contract_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel(&shape), self.data.len());
        self.shape = shape;
        self
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    /// Copies the `index`-th slice along the leading axis.
    pub fn row(&self, index: usize) -> Result<Self> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| dim_err!("row() on a scalar"))?;
        if index >= n {
            return Err(dim_err!("row {} out of range for leading dim {}", index, n));
        }
        let len = numel(rest);
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * len..(index + 1) * len].to_vec(),
        })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| contract_err!("stack of nothing"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn zip_same(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Elementwise binary op under the restricted broadcasting rules.
    pub(crate) fn zip_broadcast(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if self.shape == other.shape {
            return Tensor::checked(self.shape.clone(), self.zip_same(other, f).data, op);
        }
        let (out_shape, left, right) = broadcast_shape(&self.shape, &other.shape)?;
        let n = numel(&out_shape);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f(self.data[left.index(i)], other.data[right.index(i)]));
        }
        Tensor::checked(out_shape, data, op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        Tensor::checked(self.shape.clone(), self.map(|v| v * c).data, "scale")
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn exp(&self) -> Result<Self> {
        Tensor::checked(self.shape.clone(), self.map(|v| v.exp()).data, "exp")
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(alloc::format!("log of nonpositive value {}", bad)));
        }
        Ok(self.map(|v| v.ln()))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest element; ties resolve to the first occurrence.
    pub fn max(&self) -> Result<(usize, T)> {
        argmax(&self.data).ok_or_else(|| contract_err!("max of empty tensor"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Self> {
        softmax_rows(self)
    }

    pub fn log_softmax(&self) -> Result<Self> {
        log_softmax_rows(self)
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_t(self, other, false, false)
    }

    /// Cross-correlation of `[C,H,W]` (or batched `[N,C,H,W]`) with an
    /// `[O,C,kh,kw]` kernel.
    pub fn conv2d(&self, kernel: &Self, stride: usize, padding: usize) -> Result<Self> {
        match self.rank() {
            3 => {
                let mut batched = vec![1];
                batched.extend_from_slice(&self.shape);
                let out = conv2d_batch(&self.reshape(batched)?, kernel, stride, padding)?;
                let shape = out.shape[1..].to_vec();
                Ok(out.reshaped(shape))
            }
            4 => conv2d_batch(self, kernel, stride, padding),
            r => Err(dim_err!("conv2d expects a rank-3 or rank-4 input, got rank {}", r)),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

/// Index and value of the largest element, first occurrence on ties.
pub fn argmax<T: Real>(values: &[T]) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(matches!(Tensor::<f64>::new([2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(
            Tensor::<f64>::new([2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(Tensor::<f32>::zeros([3, 4]).numel(), 12);
    }

    #[test]
    fn identity_and_hand_matmul() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
        assert!(matches!(row.matmul(&row), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_softmax_examples() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(t(&[2], &[0.0, 0.0]).softmax().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        assert!(matches!(t(&[2], &[1.0, 0.0]).log(), Err(Error::Domain(_))));
        assert_eq!(t(&[1], &[1.0]).log().unwrap().data(), &[0.0]);
    }

    #[test]
    fn conv_examples() {
        let ones = Tensor::<f64>::ones([1, 3, 3]);
        let two = t(&[1, 1, 1, 1], &[2.0]);
        assert_eq!(ones.conv2d(&two, 1, 0).unwrap(), Tensor::full([1, 3, 3], 2.0));

        let x = Tensor::<f64>::new([1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let avg = Tensor::full([1, 1, 2, 2], 0.25);
        let y = x.conv2d(&avg, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::<f64>::ones([1, 2, 2]);
        let k = Tensor::<f64>::ones([1, 1, 3, 3]);
        assert!(matches!(x.conv2d(&k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), Some((1, 3.0)));
    }
}
