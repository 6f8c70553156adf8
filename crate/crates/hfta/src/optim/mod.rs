//! Horizontally fused optimizers and learning-rate schedulers.
//!
//! A fused job steps all B models in lockstep; each scalar hyperparameter of
//! the serial optimizer becomes a length-B vector broadcast over the fused
//! parameter so model b's slice is updated with model b's settings. The
//! per-element update formulas are shared between the serial and fused
//! paths, so a fused step is bit-identical to B serial steps.

mod adadelta;
mod adam;

pub use adadelta::{Adadelta, AdadeltaParams, FusedAdadelta, FusedAdadeltaParams};
pub use adam::{Adam, AdamParams, FusedAdam, FusedAdamParams};

use crate::error::{Error, Result};
use crate::ops::FusedParameter;
use crate::tensor::Tensor;

/// One value per model of a fused job.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperVector {
    pub name: String,
    pub values: Vec<f64>,
}

impl HyperVector {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        HyperVector { name: name.into(), values }
    }

    pub fn uniform(name: impl Into<String>, value: f64, b: usize) -> Self {
        HyperVector { name: name.into(), values: vec![value; b] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_len(&self, b: usize) -> Result<()> {
        if self.values.len() != b {
            return Err(Error::Fusion(format!(
                "hypervector `{}` has {} entries for a fused job of {b} models",
                self.name,
                self.values.len()
            )));
        }
        Ok(())
    }

    fn check_open_unit(&self) -> Result<()> {
        for &v in &self.values {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::config(format!(
                    "`{}` entries must lie in (0, 1), got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn check_positive(&self) -> Result<()> {
        for &v in &self.values {
            if v <= 0.0 {
                return Err(Error::config(format!(
                    "`{}` entries must be positive, got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Fill `out` (shaped like the fused parameter) so every element of model
/// b's slice holds `values[b]`.
pub(crate) fn broadcast_values_into(values: &[f64], param: &FusedParameter, out: &mut Tensor) {
    let shape = param.value.shape();
    let axis = param.fusion_axis;
    let outer: usize = shape[..axis].iter().product();
    let axis_ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let od = out.data_mut();
    for o in 0..outer {
        for a in 0..axis_ext {
            let model = a / param.per_model_extent;
            let base = (o * axis_ext + a) * inner;
            od[base..base + inner].fill(values[model]);
        }
    }
}

/// Expand a hypervector to a tensor shaped like the fused parameter, where
/// every element of model b's slice holds `hv.values[b]`.
pub fn broadcast_hyper(hv: &HyperVector, param: &FusedParameter) -> Result<Tensor> {
    hv.check_len(param.model_count)?;
    let mut out = Tensor::zeros(param.value.shape());
    broadcast_values_into(&hv.values, param, &mut out);
    Ok(out)
}

/// Per-model contiguous block ranges of a fused parameter with fusion
/// axis 0 (all fused parameter families use axis 0): block m covers
/// [m * len, (m + 1) * len).
pub(crate) fn model_block_len(param: &FusedParameter) -> Result<usize> {
    if param.fusion_axis != 0 {
        return Err(Error::Fusion(format!(
            "fused optimizers expect fusion axis 0, got {}",
            param.fusion_axis
        )));
    }
    Ok(param.value.numel() / param.model_count)
}

pub(crate) fn check_state_shape(
    buffer: &Tensor,
    param: &FusedParameter,
    what: &str,
) -> Result<()> {
    if buffer.shape() != param.value.shape() {
        return Err(Error::State(format!(
            "{what} buffer shape {:?} drifted from parameter shape {:?}",
            buffer.shape(),
            param.value.shape()
        )));
    }
    Ok(())
}

/// StepLR: lr_b(epoch) = lr_b(0) * gamma_b^floor(epoch / period_b).
/// Pure function of its inputs; re-evaluation is idempotent.
pub fn fused_steplr_step(
    initial: &HyperVector,
    epoch: u64,
    periods: &[u64],
    gamma: &HyperVector,
) -> Result<HyperVector> {
    let b = initial.len();
    gamma.check_len(b)?;
    if periods.len() != b {
        return Err(Error::Fusion(format!(
            "{} periods for a fused job of {b} models",
            periods.len()
        )));
    }
    for &p in periods {
        if p == 0 {
            return Err(Error::config("learning-rate decay period must be >= 1"));
        }
    }
    for &g in &gamma.values {
        if !(0.0 < g && g <= 1.0) {
            return Err(Error::config(format!("decay factor must be in (0, 1], got {g}")));
        }
    }
    let values = initial
        .values
        .iter()
        .zip(periods.iter().zip(gamma.values.iter()))
        .map(|(&lr0, (&p, &g))| lr0 * g.powi((epoch / p) as i32))
        .collect();
    Ok(HyperVector { name: initial.name.clone(), values })
}

/// Serial StepLR: the B=1 slice of the fused rule.
pub fn steplr(initial: f64, epoch: u64, period: u64, gamma: f64) -> Result<f64> {
    let hv = fused_steplr_step(
        &HyperVector::new("lr", vec![initial]),
        epoch,
        &[period],
        &HyperVector::new("gamma", vec![gamma]),
    )?;
    Ok(hv.values[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_uniform_vector_is_constant_tensor() {
        let p = FusedParameter::new(Tensor::zeros(&[6, 2]), 3, 0, 2).unwrap();
        let hv = HyperVector::uniform("lr", 0.5, 3);
        let t = broadcast_hyper(&hv, &p).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn broadcast_fills_per_model_blocks() {
        // B=2, per_model_extent=4: first 4 blocks get v0, next 4 get v1
        let p = FusedParameter::new(Tensor::zeros(&[8, 3]), 2, 0, 4).unwrap();
        let hv = HyperVector::new("lr", vec![1.0, 2.0]);
        let t = broadcast_hyper(&hv, &p).unwrap();
        for row in 0..8 {
            let expect = if row < 4 { 1.0 } else { 2.0 };
            for col in 0..3 {
                assert_eq!(t.data()[row * 3 + col], expect);
            }
        }
    }

    #[test]
    fn broadcast_single_model_is_scalar_fill() {
        let p = FusedParameter::single(Tensor::zeros(&[5]));
        let t = broadcast_hyper(&HyperVector::new("wd", vec![0.25]), &p).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn broadcast_length_mismatch_is_fusion_error() {
        let p = FusedParameter::new(Tensor::zeros(&[4]), 2, 0, 2).unwrap();
        let hv = HyperVector::new("lr", vec![1.0, 2.0, 3.0]);
        assert!(matches!(broadcast_hyper(&hv, &p), Err(Error::Fusion(_))));
    }

    #[test]
    fn steplr_gamma_one_is_constant() {
        for epoch in [0, 7, 100] {
            assert_eq!(steplr(0.1, epoch, 10, 1.0).unwrap(), 0.1);
        }
    }

    #[test]
    fn steplr_closed_form() {
        // 0.1 * 0.5^floor(25/10) = 0.025
        assert!((steplr(0.1, 25, 10, 0.5).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn steplr_per_model_periods_decay_independently() {
        let lr0 = HyperVector::new("lr", vec![1.0, 1.0]);
        let gamma = HyperVector::new("gamma", vec![0.5, 0.5]);
        let at = |e| fused_steplr_step(&lr0, e, &[5, 10], &gamma).unwrap().values;
        assert_eq!(at(4), vec![1.0, 1.0]);
        assert_eq!(at(5), vec![0.5, 1.0]);
        assert_eq!(at(10), vec![0.25, 0.5]);
        assert_eq!(at(25), vec![1.0 * 0.5f64.powi(5), 1.0 * 0.5f64.powi(2)]);
    }

    #[test]
    fn steplr_zero_period_rejected() {
        assert!(steplr(0.1, 3, 0, 0.5).is_err());
    }

    #[test]
    fn steplr_is_idempotent_pure_function() {
        let a = steplr(0.07, 33, 4, 0.9).unwrap();
        let b = steplr(0.07, 33, 4, 0.9).unwrap();
        assert_eq!(a, b);
    }
}
