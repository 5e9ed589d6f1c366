//! Dense row-major tensors, integer class masks, and the reverse-mode graph
//! that the segmentation network is expressed in.

mod graph;
mod gradcheck;
mod kernels;

pub use graph::{GradMap, Graph, NodeId};
pub use gradcheck::{grad_check, GradCheckReport, Probe};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape(
                op,
                format!("expected a 4-d tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Copies channels `[start, end)` out of a `[B,C,H,W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} outside {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor {
            shape: vec![b, end - start, h, w],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

/// Integer class-id mask (`[H,W]` for one sample, `[B,H,W]` for a batch).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IntMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl IntMask {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "mask",
                format!("shape {shape:?} does not match {} labels", data.len()),
            ));
        }
        Ok(IntMask { shape, data })
    }

    pub fn filled(shape: &[usize], class: u8) -> Self {
        IntMask {
            shape: shape.to_vec(),
            data: vec![class; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width)` of a 2-d mask.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(
                "mask",
                format!("expected a 2-d mask, got {:?}", self.shape),
            )),
        }
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn stack(items: &[&IntMask]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no masks to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for m in items {
            if m.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("mask shape {:?} differs from {:?}", m.shape, first.shape),
                ));
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(IntMask { shape, data })
    }

    /// Splits a `[B,H,W]` mask into `B` masks of shape `[H,W]`.
    pub fn unstack(&self) -> Vec<IntMask> {
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step: usize = inner.iter().product();
        self.data
            .chunks(step)
            .map(|c| IntMask {
                shape: inner.clone(),
                data: c.to_vec(),
            })
            .collect()
    }
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` logits. Ties go to the
/// lower class id.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<IntMask> {
    let [b, k, h, w] = logits.dims4("argmax")?;
    if k > 256 {
        return Err(Error::shape("argmax", format!("{k} classes exceed u8 labels")));
    }
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = d[bi * k * plane + p];
            for c in 1..k {
                let v = d[(bi * k + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    IntMask::new(vec![b, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_ties_prefer_lower_class() {
        let t = Tensor::<f64>::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        let m = argmax_classes(&t).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn mask_stack_unstack() {
        let a = IntMask::new(vec![1, 2], vec![0, 1]).unwrap();
        let b = IntMask::new(vec![1, 2], vec![2, 3]).unwrap();
        let s = IntMask::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }
}
