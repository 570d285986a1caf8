//! Dense row-major tensors.
//!
//! A tensor is a flat buffer plus a list of extents. Rank-4 tensors use
//! the `[batch, channel, height, width]` convention everywhere in this
//! crate; kernels for convolutions use `[filters, channels, kh, kw]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with positive extents and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::ShapeMismatch(
            "tensor rank must be at least 1".into(),
        ));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        n = n.checked_mul(e).ok_or_else(|| {
            Error::ShapeMismatch(format!("tensor extents overflow: {shape:?}"))
        })?;
    }
    Ok(n)
}

impl<S: Scalar> Tensor<S> {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        })
    }

    /// Tensor filled with a single finite value.
    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value is not finite".into()));
        }
        let n = checked_numel(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Builds a tensor from a flat row-major buffer. The buffer length
    /// must equal the product of the extents and every value must be
    /// finite.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {} values but shape {:?} needs {}",
                data.len(),
                shape,
                n
            )));
        }
        let t = Self {
            shape: shape.to_vec(),
            data,
        };
        t.validate_finite("from_vec")?;
        Ok(t)
    }

    /// Scalar (single element) tensor of shape `[1]`.
    pub fn scalar(value: S) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Consumes the tensor, returning its flat buffer.
    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same buffer under new extents; the element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) into {:?} ({} values)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Errors if any element is NaN or infinite. `what` names the tensor
    /// in the error message.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{what}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Value of the single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element-wise map into a new tensor. The callback must return
    /// finite values; this is not re-validated here.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, e.g. for serialization.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Stacks same-shaped tensors along a fresh leading batch axis.
pub fn stack<S: Scalar>(items: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = items.first().ok_or_else(|| {
        Error::InvalidArgument("stack needs at least one tensor".into())
    })?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "stack mixes shapes {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::from_vec(&shape, data)
}
