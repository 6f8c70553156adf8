//! Adam with classic L2-in-gradient weight decay, serial and fused.

use crate::error::{Error, Result};
use crate::ops::FusedParameter;
use crate::tensor::Tensor;

use super::{check_state_shape, model_block_len, HyperVector};

/// The per-element Adam update, shared verbatim by the serial and fused
/// paths so a fused step is bit-identical to the serial step per slice.
/// `bc1`/`bc2` are the precomputed bias corrections 1 - beta^t.
#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(
    theta: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    wd: f64,
) {
    let g = grad + wd * *theta;
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
}

#[derive(Clone, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Serial Adam over a list of parameter tensors.
pub struct Adam {
    pub params: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: AdamParams, shapes: &[&[usize]]) -> Self {
        Adam {
            params,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let h = &self.params;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != m.shape() || g.shape() != p.shape() {
                return Err(Error::State(format!(
                    "parameter/state shape drift: param {:?}, state {:?}, grad {:?}",
                    p.shape(),
                    m.shape(),
                    g.shape()
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                adam_update(
                    &mut pd[i],
                    gd[i],
                    &mut md[i],
                    &mut vd[i],
                    h.lr,
                    h.beta1,
                    h.beta2,
                    bc1,
                    bc2,
                    h.eps,
                    h.weight_decay,
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusedAdamParams {
    pub lr: HyperVector,
    pub beta1: HyperVector,
    pub beta2: HyperVector,
    /// Shared across models: not part of the tuned surface.
    pub eps: f64,
    pub weight_decay: HyperVector,
}

impl FusedAdamParams {
    pub fn validate(&self, b: usize) -> Result<()> {
        self.lr.check_len(b)?;
        self.lr.check_positive()?;
        self.beta1.check_len(b)?;
        self.beta1.check_open_unit()?;
        self.beta2.check_len(b)?;
        self.beta2.check_open_unit()?;
        self.weight_decay.check_len(b)?;
        Ok(())
    }
}

/// Fused Adam: one step updates all B models' slices with their own
/// hyperparameters. The per-model hypervector entries are broadcast over
/// each model's contiguous parameter block, so slice b runs exactly the
/// serial update with model b's scalars.
pub struct FusedAdam {
    pub params: FusedAdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl FusedAdam {
    pub fn new(params: FusedAdamParams, fused: &[FusedParameter]) -> Result<Self> {
        let b = fused.first().map(|p| p.model_count).unwrap_or(1);
        params.validate(b)?;
        for p in fused {
            if p.model_count != b {
                return Err(Error::Fusion(format!(
                    "parameters disagree on model count: {b} vs {}",
                    p.model_count
                )));
            }
            model_block_len(p)?;
        }
        Ok(FusedAdam {
            m: fused.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: fused.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            params,
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Refresh per-model learning rates (scheduler hook); lengths must match.
    pub fn set_lr(&mut self, lr: HyperVector, _fused: &[FusedParameter]) -> Result<()> {
        lr.check_len(self.params.lr.len())?;
        self.params.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [FusedParameter], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let h = &self.params;
        let bc1: Vec<f64> = h.beta1.values.iter().map(|b| 1.0 - b.powi(t)).collect();
        let bc2: Vec<f64> = h.beta2.values.iter().map(|b| 1.0 - b.powi(t)).collect();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            check_state_shape(&self.m[k], p, "adam m")?;
            if g.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "gradient shape {:?} drifted from parameter shape {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let block = model_block_len(p)?;
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let gd = g.data();
            let theta = p.value.data_mut();
            for model in 0..p.model_count {
                let range = model * block..(model + 1) * block;
                let (lr, b1, b2, wd) = (
                    h.lr.values[model],
                    h.beta1.values[model],
                    h.beta2.values[model],
                    h.weight_decay.values[model],
                );
                for i in range {
                    adam_update(
                        &mut theta[i],
                        gd[i],
                        &mut m[i],
                        &mut v[i],
                        lr,
                        b1,
                        b2,
                        bc1[model],
                        bc2[model],
                        self.params.eps,
                        wd,
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(theta: &Tensor, center: &Tensor) -> Tensor {
        // d/dθ sum (θ - c)^2 = 2 (θ - c)
        theta.zip(center, |t, c| 2.0 * (t - c)).unwrap()
    }

    #[test]
    fn single_model_fused_equals_serial_exactly() {
        let center = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let init = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0]);

        let mut serial = Adam::new(
            AdamParams { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 },
            &[&[4]],
        );
        let mut sp = vec![init.clone()];

        let mut fp = vec![FusedParameter::single(init)];
        let mut fused = FusedAdam::new(
            FusedAdamParams {
                lr: HyperVector::new("lr", vec![0.05]),
                beta1: HyperVector::new("beta1", vec![0.9]),
                beta2: HyperVector::new("beta2", vec![0.999]),
                eps: 1e-8,
                weight_decay: HyperVector::new("wd", vec![0.01]),
            },
            &fp,
        )
        .unwrap();

        for _ in 0..50 {
            let gs = quadratic_grad(&sp[0], &center);
            serial.step(&mut sp, &[gs]).unwrap();
            let gf = quadratic_grad(&fp[0].value, &center);
            fused.step(&mut fp, &[gf]).unwrap();
        }
        assert!(sp[0].max_abs_diff(&fp[0].value) == 0.0);
    }

    #[test]
    fn three_models_with_distinct_lrs_match_three_serial_runs() {
        let b = 3;
        let lrs = [0.1, 0.01, 0.002];
        let center = Tensor::from_vec(vec![1.0, -1.0]);

        // fused job: per-model blocks along axis 0
        let init: Vec<Tensor> = (0..b).map(|_| Tensor::zeros(&[2])).collect();
        let mut fused_param = vec![FusedParameter::fuse(&init, 0).unwrap()];
        let mut fused = FusedAdam::new(
            FusedAdamParams {
                lr: HyperVector::new("lr", lrs.to_vec()),
                beta1: HyperVector::uniform("beta1", 0.9, b),
                beta2: HyperVector::uniform("beta2", 0.999, b),
                eps: 1e-8,
                weight_decay: HyperVector::uniform("wd", 0.0, b),
            },
            &fused_param,
        )
        .unwrap();

        let mut serial: Vec<(Adam, Vec<Tensor>)> = lrs
            .iter()
            .map(|&lr| {
                (
                    Adam::new(AdamParams { lr, ..AdamParams::default() }, &[&[2]]),
                    vec![Tensor::zeros(&[2])],
                )
            })
            .collect();

        for _ in 0..50 {
            let g: Vec<Tensor> = (0..b)
                .map(|m| {
                    let slice = fused_param[0].slice(m).unwrap();
                    quadratic_grad(&slice, &center)
                })
                .collect();
            let grefs: Vec<&Tensor> = g.iter().collect();
            let fused_grad = Tensor::concat(&grefs, 0).unwrap();
            fused.step(&mut fused_param, &[fused_grad]).unwrap();

            for (opt, p) in serial.iter_mut() {
                let gs = quadratic_grad(&p[0], &center);
                opt.step(p, &[gs]).unwrap();
            }
        }
        for m in 0..b {
            let fslice = fused_param[0].slice(m).unwrap();
            assert!(
                fslice.max_abs_diff(&serial[m].1[0]) <= 1e-10,
                "model {m} diverged"
            );
        }
    }

    #[test]
    fn zero_gradients_move_params_only_through_weight_decay() {
        let init = Tensor::from_vec(vec![2.0, -2.0]);
        let mut with_wd = vec![init.clone()];
        let mut opt = Adam::new(AdamParams { weight_decay: 0.1, ..AdamParams::default() }, &[&[2]]);
        opt.step(&mut with_wd, &[Tensor::zeros(&[2])]).unwrap();
        assert!(with_wd[0].max_abs_diff(&init) > 0.0);

        let mut without = vec![init.clone()];
        let mut opt2 = Adam::new(AdamParams::default(), &[&[2]]);
        opt2.step(&mut without, &[Tensor::zeros(&[2])]).unwrap();
        assert!(without[0].max_abs_diff(&init) == 0.0);
    }

    #[test]
    fn state_shape_drift_rejected() {
        let mut opt = Adam::new(AdamParams::default(), &[&[3]]);
        let mut params = vec![Tensor::zeros(&[4])];
        let grads = vec![Tensor::zeros(&[4])];
        assert!(matches!(opt.step(&mut params, &grads), Err(Error::State(_))));
    }

    #[test]
    fn invalid_beta_rejected() {
        let p = FusedParameter::single(Tensor::zeros(&[2]));
        let params = FusedAdamParams {
            lr: HyperVector::new("lr", vec![0.1]),
            beta1: HyperVector::new("beta1", vec![1.0]),
            beta2: HyperVector::new("beta2", vec![0.999]),
            eps: 1e-8,
            weight_decay: HyperVector::new("wd", vec![0.0]),
        };
        assert!(FusedAdam::new(params, &[p]).is_err());
    }
}
