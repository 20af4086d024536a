//! Dense row-major tensors, their forward kernels, a reverse-mode tape,
//! the optimizer and the binary tensor format.

mod io;
mod kernels;
mod optim;
mod tape;

pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, MAGIC, VERSION};
pub use kernels::{conv2d, conv2d_backward, pyramid_len, pyramid_pool, pyramid_pool_backward, ConvGrads};
pub use optim::Sgd;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

/// `(outer, len, inner)` extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> S {
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum();
        self.data[offset]
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn log(&self) -> Self {
        self.map(|x| x.ln())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let t = Tensor::new(shape, self.data.clone())?;
        Ok(t)
    }

    /// Softmax across axis 0 (the class axis of a `[K, H, W]` map), per pixel.
    pub fn softmax_channel(&self) -> Result<Self> {
        self.check_axis(0)?;
        let (_, k, inner) = axis_split(&self.shape, 0);
        let mut out = vec![S::zero(); self.data.len()];
        for p in 0..inner {
            let mut max = S::neg_infinity();
            for c in 0..k {
                max = max.max(self.data[c * inner + p]);
            }
            let mut total = S::zero();
            for c in 0..k {
                let e = (self.data[c * inner + p] - max).exp();
                out[c * inner + p] = e;
                total += e;
            }
            for c in 0..k {
                out[c * inner + p] /= total;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Numerically stable `log(softmax_channel(x))`.
    pub fn log_softmax_channel(&self) -> Result<Self> {
        self.check_axis(0)?;
        let (_, k, inner) = axis_split(&self.shape, 0);
        let mut out = vec![S::zero(); self.data.len()];
        for p in 0..inner {
            let mut max = S::neg_infinity();
            for c in 0..k {
                max = max.max(self.data[c * inner + p]);
            }
            let mut total = S::zero();
            for c in 0..k {
                total += (self.data[c * inner + p] - max).exp();
            }
            let lse = max + total.ln();
            for c in 0..k {
                out[c * inner + p] = self.data[c * inner + p] - lse;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let norm = S::one() / S::of_usize(n);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= norm;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor {
            shape,
            data: out,
            requires_grad: false,
        })
    }

    /// Copy of the index range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if start >= end || end > self.shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Tensor {
            shape,
            data: out,
            requires_grad: false,
        })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        first.check_axis(axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis];
                out.extend_from_slice(&p.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor {
            shape,
            data: out,
            requires_grad: false,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose2 needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
            requires_grad: false,
        })
    }

    /// Index of the maximum along axis 0 for every trailing position.
    /// Ties resolve to the lowest index.
    pub fn argmax_channel(&self) -> Vec<usize> {
        let (_, k, inner) = axis_split(&self.shape, 0);
        (0..inner)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if self.data[c * inner + p] > self.data[best * inner + p] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mirror along the last axis.
    pub fn flip_last(&self) -> Self {
        let w = *self.shape.last().expect("flip of rank-0 tensor");
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: self.requires_grad,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = t(&[2, 1, 1], &[0.0, 0.0]).softmax_channel().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(t(&[2], &[-1.0, 2.0]).relu().data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_over_width() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).mean_axis(1).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[1.5, 3.5]);
    }

    #[test]
    fn axis_out_of_range() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(x.mean_axis(2).is_err());
        assert!(x.slice(3, 0, 1).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        assert_eq!(a.data(), &[1.0, 4.0]);
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
    }

    #[test]
    fn strides_are_row_major() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 4]);
        assert_eq!(x.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, -0.2, 0.1]);
        let a = x.log_softmax_channel().unwrap();
        let b = x.softmax_channel().unwrap().log();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
