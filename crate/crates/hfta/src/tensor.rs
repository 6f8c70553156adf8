//! Dense n-dimensional tensors of f64 in row-major order.
//!
//! `Tensor` is a plain value type: shape plus a contiguous buffer. All
//! differentiable structure lives on the [`crate::tape::Tape`]; kernels in
//! [`crate::ops`] operate on plain tensors so the same code serves the
//! forward pass, the backward rules, and the test oracles.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Buffers are shared copy-on-write: cloning a tensor (saving values for
/// backward, binding parameters onto a tape) is a refcount bump, and
/// `data_mut` copies only when the buffer is actually shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; numel]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![1.0; numel]) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    /// Uniform in [-bound, bound); the default weight-init distribution.
    pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(-bound, bound)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut StreamRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal(mean, std)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    fn data_mut_internal(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() requires a scalar, shape is {:?}",
                self.shape
            )))
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count;
    /// shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({numel})",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        // fixed left-to-right summation order: reductions must be deterministic
        self.data.iter().sum()
    }

    /// In-place accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "accumulate shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data_mut_internal().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let rank = tensors[0].shape.len();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} out of rank {rank}")));
        }
        for t in tensors {
            if t.shape.len() != rank {
                return Err(Error::dim(format!(
                    "ragged ranks in concat: {:?} vs {:?}",
                    tensors[0].shape, t.shape
                )));
            }
            for d in 0..rank {
                if d != axis && t.shape[d] != tensors[0].shape[d] {
                    return Err(Error::dim(format!(
                        "ragged shapes in concat along axis {axis}: {:?} vs {:?}",
                        tensors[0].shape, t.shape
                    )));
                }
            }
        }
        let outer: usize = tensors[0].shape[..axis].iter().product();
        let inner: usize = tensors[0].shape[axis + 1..].iter().product();
        let total_axis: usize = tensors.iter().map(|t| t.shape[axis]).sum();
        let mut shape = tensors[0].shape.clone();
        shape[axis] = total_axis;
        let mut data = vec![0.0; outer * total_axis * inner];
        for o in 0..outer {
            let mut dst_axis = 0;
            for t in tensors {
                let ext = t.shape[axis];
                let src_base = o * ext * inner;
                let dst_base = (o * total_axis + dst_axis) * inner;
                data[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&t.data[src_base..src_base + ext * inner]);
                dst_axis += ext;
            }
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Split along `axis` into blocks of the given extents (must sum to the axis extent).
    pub fn split(&self, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::dim(format!("split axis {axis} out of rank {rank}")));
        }
        let total: usize = extents.iter().sum();
        if total != self.shape[axis] {
            return Err(Error::dim(format!(
                "split extents {extents:?} sum to {total}, axis extent is {}",
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_ext = self.shape[axis];
        let mut out = Vec::with_capacity(extents.len());
        let mut start = 0;
        for &ext in extents {
            let mut shape = self.shape.clone();
            shape[axis] = ext;
            let mut data = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                let src_base = (o * axis_ext + start) * inner;
                let dst_base = o * ext * inner;
                data[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&self.data[src_base..src_base + ext * inner]);
            }
            out.push(Tensor { shape, data: Arc::new(data) });
            start += ext;
        }
        Ok(out)
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::dim(format!("narrow axis {axis} out of rank {rank}")));
        }
        if start + len > self.shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) exceeds axis extent {}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_ext = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * axis_ext + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&self.data[src_base..src_base + len * inner]);
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Inverse of `narrow`: place `self` into a zero tensor of `full_shape`
    /// at [start, start+len) along `axis`.
    pub fn pad_into(&self, axis: usize, start: usize, full_extent: usize) -> Result<Tensor> {
        let mut shape = self.shape.clone();
        let len = shape[axis];
        shape[axis] = full_extent;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        if start + len > full_extent {
            return Err(Error::dim(format!(
                "pad_into [{start}, {}) exceeds axis extent {full_extent}",
                start + len
            )));
        }
        let mut data = vec![0.0; outer * full_extent * inner];
        for o in 0..outer {
            let dst_base = (o * full_extent + start) * inner;
            let src_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&self.data[src_base..src_base + len * inner]);
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn concat_of_one_is_identity() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let c = Tensor::concat(&[&t], 1).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn concat_two_along_axis1_block_interleaves() {
        // two [2,3] along axis 1 -> [2,6]; row r holds a's row r then b's row r
        let a = Tensor::new(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![10., 11., 12., 13., 14., 15.]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(
            c.data(),
            &[0., 1., 2., 10., 11., 12., 3., 4., 5., 13., 14., 15.]
        );
    }

    #[test]
    fn concat_ragged_shapes_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(Tensor::concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn split_concat_round_trip_bit_identical() {
        let mut rng = StreamRng::new(11);
        for axis in 0..3 {
            let t = Tensor::rand_uniform(&[4, 6, 5], 1.0, &mut rng);
            let extents = match axis {
                0 => vec![1, 2, 1],
                1 => vec![2, 3, 1],
                _ => vec![2, 2, 1],
            };
            let parts = t.split(axis, &extents).unwrap();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let back = Tensor::concat(&refs, axis).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn split_bad_extents_rejected() {
        let t = Tensor::zeros(&[2, 4]);
        assert!(t.split(1, &[1, 1]).is_err());
    }

    #[test]
    fn narrow_pad_round_trip() {
        let t = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64).collect()).unwrap();
        let mid = t.narrow(1, 1, 3).unwrap();
        assert_eq!(mid.shape(), &[2, 3]);
        assert_eq!(mid.data(), &[1., 2., 3., 6., 7., 8.]);
        let back = mid.pad_into(1, 1, 5).unwrap();
        assert_eq!(back.data(), &[0., 1., 2., 3., 0., 0., 6., 7., 8., 0.]);
    }
}
