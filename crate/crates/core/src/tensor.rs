//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat value buffer, with an optional
//! gradient buffer of the same length. Invariants enforced here:
//!
//! - `shape.iter().product() == data.len()` (zero-sized axes rejected),
//! - a gradient, when present, has the same length as the data,
//! - operations in [`crate::tape`] never store non-finite values.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// n-dimensional real array. Rank 0 (empty shape) holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
        if !value {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, value: bool) -> Self {
        self.set_requires_grad(value);
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<S>> {
        &mut self.grad
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expect != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value at a multi-axis index (row-major).
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Shape produced by right-aligned broadcasting, or a dimension error.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Dimension(format!("shapes {a:?} and {b:?} do not broadcast")));
        };
    }
    Ok(out)
}

/// Strides mapping positions of the broadcast result back into `shape`
/// (stride 0 on broadcast axes). `shape` must broadcast to `target`.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Walk every position of `shape`, tracking flat offsets into two
/// broadcast sources via their stride vectors. The offsets advance
/// odometer-style, one carry chain per step, instead of div/mod per
/// element.
pub(crate) fn zip_broadcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product::<usize>().max(1);
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            counters[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counters[d] < shape[d] {
                break;
            }
            counters[d] = 0;
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
        }
    }
}

/// Single-source variant of [`zip_broadcast`].
pub(crate) fn for_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product::<usize>().max(1);
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut idx = 0usize;
    for flat in 0..n {
        f(flat, idx);
        for d in (0..rank).rev() {
            counters[d] += 1;
            idx += strides[d];
            if counters[d] < shape[d] {
                break;
            }
            counters[d] = 0;
            idx -= strides[d] * shape[d];
        }
    }
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, reversing a
/// broadcast.
pub fn reduce_to_shape<S: Scalar>(grad: &[S], grad_shape: &[usize], target_shape: &[usize]) -> Vec<S> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![S::zero(); target_numel.max(1)];
    let strides = broadcast_strides(target_shape, grad_shape);
    for_broadcast(grad_shape, &strides, |flat, src| out[src] += grad[flat]);
    out
}
