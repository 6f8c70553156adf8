//! Adadelta, serial and fused.

use crate::error::{Error, Result};
use crate::ops::FusedParameter;
use crate::tensor::Tensor;

use super::{check_state_shape, model_block_len, HyperVector};

/// Per-element Adadelta recurrences, shared by the serial and fused paths.
#[allow(clippy::too_many_arguments)]
#[inline]
fn adadelta_update(
    theta: &mut f64,
    grad: f64,
    sq_avg: &mut f64,
    acc_delta: &mut f64,
    lr: f64,
    rho: f64,
    eps: f64,
    wd: f64,
) {
    let g = grad + wd * *theta;
    *sq_avg = rho * *sq_avg + (1.0 - rho) * g * g;
    let delta = g * (*acc_delta + eps).sqrt() / (*sq_avg + eps).sqrt();
    *acc_delta = rho * *acc_delta + (1.0 - rho) * delta * delta;
    *theta -= lr * delta;
}

#[derive(Clone, Debug)]
pub struct AdadeltaParams {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdadeltaParams {
    fn default() -> Self {
        AdadeltaParams { lr: 1.0, rho: 0.9, eps: 1e-6, weight_decay: 0.0 }
    }
}

pub struct Adadelta {
    pub params: AdadeltaParams,
    sq_avg: Vec<Tensor>,
    acc_delta: Vec<Tensor>,
    t: u64,
}

impl Adadelta {
    pub fn new(params: AdadeltaParams, shapes: &[&[usize]]) -> Self {
        Adadelta {
            params,
            sq_avg: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            acc_delta: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.sq_avg.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.sq_avg.len(),
                params.len()
            )));
        }
        self.t += 1;
        let h = &self.params;
        for ((p, g), (sq, acc)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.sq_avg.iter_mut().zip(self.acc_delta.iter_mut()))
        {
            if p.shape() != sq.shape() || g.shape() != p.shape() {
                return Err(Error::State(format!(
                    "parameter/state shape drift: param {:?}, state {:?}, grad {:?}",
                    p.shape(),
                    sq.shape(),
                    g.shape()
                )));
            }
            let pd = p.data_mut();
            let sqd = sq.data_mut();
            let accd = acc.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                adadelta_update(
                    &mut pd[i],
                    gd[i],
                    &mut sqd[i],
                    &mut accd[i],
                    h.lr,
                    h.rho,
                    h.eps,
                    h.weight_decay,
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusedAdadeltaParams {
    pub lr: HyperVector,
    pub rho: HyperVector,
    pub eps: f64,
    pub weight_decay: HyperVector,
}

impl FusedAdadeltaParams {
    pub fn validate(&self, b: usize) -> Result<()> {
        self.lr.check_len(b)?;
        self.lr.check_positive()?;
        self.rho.check_len(b)?;
        self.rho.check_open_unit()?;
        self.weight_decay.check_len(b)?;
        Ok(())
    }
}

pub struct FusedAdadelta {
    pub params: FusedAdadeltaParams,
    sq_avg: Vec<Tensor>,
    acc_delta: Vec<Tensor>,
    t: u64,
}

impl FusedAdadelta {
    pub fn new(params: FusedAdadeltaParams, fused: &[FusedParameter]) -> Result<Self> {
        let b = fused.first().map(|p| p.model_count).unwrap_or(1);
        params.validate(b)?;
        for p in fused {
            model_block_len(p)?;
        }
        Ok(FusedAdadelta {
            sq_avg: fused.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            acc_delta: fused.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            params,
            t: 0,
        })
    }

    pub fn set_lr(&mut self, lr: HyperVector, _fused: &[FusedParameter]) -> Result<()> {
        lr.check_len(self.params.lr.len())?;
        self.params.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [FusedParameter], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.sq_avg.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.sq_avg.len(),
                params.len()
            )));
        }
        self.t += 1;
        let h = &self.params;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            check_state_shape(&self.sq_avg[k], p, "adadelta sq_avg")?;
            if g.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "gradient shape {:?} drifted from parameter shape {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let block = model_block_len(p)?;
            let sq = self.sq_avg[k].data_mut();
            let acc = self.acc_delta[k].data_mut();
            let gd = g.data();
            let theta = p.value.data_mut();
            for model in 0..p.model_count {
                let (lr, rho, wd) =
                    (h.lr.values[model], h.rho.values[model], h.weight_decay.values[model]);
                for i in model * block..(model + 1) * block {
                    adadelta_update(
                        &mut theta[i],
                        gd[i],
                        &mut sq[i],
                        &mut acc[i],
                        lr,
                        rho,
                        self.params.eps,
                        wd,
                    );
                }
            }
        }
        Ok(())
    }
}
