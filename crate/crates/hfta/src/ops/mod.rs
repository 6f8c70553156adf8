//! Serial reference operators and their horizontally fused counterparts.
//!
//! Each operator family lives in its own submodule as plain-tensor kernels
//! (forward and backward) plus a `fuse_*` constructor that builds the fused
//! operator from B identical serial configurations. Differentiable wrappers
//! over these kernels live on [`crate::tape::Tape`].

pub mod conv;
pub mod counter;
pub mod dropout;
pub mod embedding;
pub mod layout;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::{fuse_conv_family, ConvConfig, ConvKind};
pub use dropout::{fused_dropout_mask, DropoutKind};
pub use embedding::fuse_embedding;
pub use layout::{layout_adapt_indices, FusedLayout};
pub use linear::fuse_linear;
pub use norm::{fuse_batchnorm, fuse_layernorm, BatchNormConfig, BatchNormState, LayerNormConfig};
pub use pool::{fused_pool, PoolKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor annotated with fusion metadata, so optimizers and
/// planners can address per-model slices of the fused value.
#[derive(Clone, Debug)]
pub struct FusedParameter {
    pub value: Tensor,
    pub model_count: usize,
    pub fusion_axis: usize,
    /// Contiguous block size along `fusion_axis` belonging to one model.
    pub per_model_extent: usize,
}

impl FusedParameter {
    pub fn new(
        value: Tensor,
        model_count: usize,
        fusion_axis: usize,
        per_model_extent: usize,
    ) -> Result<Self> {
        let ext = value.shape().get(fusion_axis).copied().ok_or_else(|| {
            Error::Fusion(format!(
                "fusion axis {fusion_axis} out of rank {}",
                value.shape().len()
            ))
        })?;
        if ext != model_count * per_model_extent {
            return Err(Error::Fusion(format!(
                "axis extent {ext} != model_count {model_count} x per_model_extent {per_model_extent}"
            )));
        }
        Ok(FusedParameter { value, model_count, fusion_axis, per_model_extent })
    }

    /// A single-model parameter (the degenerate fused form).
    pub fn single(value: Tensor) -> Self {
        let ext = value.shape()[0];
        FusedParameter { value, model_count: 1, fusion_axis: 0, per_model_extent: ext }
    }

    /// Concatenate B identically-shaped serial parameters along `axis`.
    pub fn fuse(values: &[Tensor], axis: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyFusion("no parameters to fuse".into()));
        }
        for v in values {
            if v.shape() != values[0].shape() {
                return Err(Error::Infusible {
                    field: "parameter shape".into(),
                    detail: format!("{:?} vs {:?}", values[0].shape(), v.shape()),
                });
            }
        }
        let refs: Vec<&Tensor> = values.iter().collect();
        let fused = Tensor::concat(&refs, axis)?;
        FusedParameter::new(fused, values.len(), axis, values[0].shape()[axis])
    }

    /// Stack B identically-shaped serial parameters along a new leading model axis.
    pub fn stack(values: &[Tensor]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyFusion("no parameters to stack".into()));
        }
        let per: Vec<Tensor> = values
            .iter()
            .map(|v| {
                let mut s = vec![1];
                s.extend_from_slice(v.shape());
                v.reshape(&s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = per.iter().collect();
        let fused = Tensor::concat(&refs, 0)?;
        FusedParameter::new(fused, values.len(), 0, 1)
    }

    /// Extract model `b`'s slice as a serial parameter tensor.
    pub fn slice(&self, b: usize) -> Result<Tensor> {
        if b >= self.model_count {
            return Err(Error::Range(format!(
                "model index {b} out of {}",
                self.model_count
            )));
        }
        let t = self
            .value
            .narrow(self.fusion_axis, b * self.per_model_extent, self.per_model_extent)?;
        // stacked parameters carry a synthetic leading axis of extent 1
        if self.per_model_extent == 1 && self.fusion_axis == 0 && self.value.shape().len() > 1 {
            let inner = &self.value.shape()[1..];
            return t.reshape(inner);
        }
        Ok(t)
    }
}

/// Elementwise activation kinds shared by the serial and fused paths
/// (shape-preserving, so fusion is the identity transformation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Relu6,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// d out / d in given the input value and the output value.
    pub fn grad(&self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    *alpha
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        counter::bump(self.kernel_name());
        x.map(|v| self.apply(v))
    }

    pub fn kernel_name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_parameter_slices_round_trip() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let fused = FusedParameter::fuse(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(fused.value.shape(), &[4, 3]);
        assert_eq!(fused.slice(0).unwrap(), a);
        assert_eq!(fused.slice(1).unwrap(), b);
    }

    #[test]
    fn stacked_parameter_slices_drop_model_axis() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let fused = FusedParameter::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(fused.value.shape(), &[2, 2, 2]);
        assert_eq!(fused.slice(1).unwrap(), b);
        assert_eq!(fused.slice(0).unwrap(), a);
    }

    #[test]
    fn fuse_rejects_ragged_parameters() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(FusedParameter::fuse(&[a, b], 0).is_err());
    }

    #[test]
    fn relu6_clamps_high() {
        assert_eq!(Activation::Relu6.apply(7.5), 6.0);
        assert_eq!(Activation::Relu6.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu6.apply(2.0), 2.0);
    }

    #[test]
    fn relu_on_mixed_signs() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        let y = Activation::Relu.forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }
}
