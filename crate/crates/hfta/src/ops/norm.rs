//! Batch normalization and layer normalization, serial and fused.
//!
//! BatchNorm over B*C channels IS the fused form: statistics are
//! per-(model, channel) because channels never mix. The featureless 1d case
//! [N, B, C] is realized by reshaping to [N, B*C]. LayerNorm's fused form
//! normalizes over the trailing dims of a model-leading input with no
//! affine, then applies a per-model affine pair shaped [B, 1, ..., E].

use crate::error::{Error, Result};
use crate::ops::{counter, FusedParameter};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub num_features: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn new(num_features: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[num_features]),
            running_var: Tensor::ones(&[num_features]),
        }
    }
}

/// Values saved by the forward pass for the backward rule.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub mean: Tensor,
    pub invstd: Tensor,
    pub training: bool,
}

fn check_bn_input(x: &Tensor, c: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape.len() > 4 {
        return Err(Error::dim(format!("batchnorm input rank {} unsupported", shape.len())));
    }
    if shape[1] != c {
        return Err(Error::dim(format!(
            "batchnorm input has {} channels, config expects {c}",
            shape[1]
        )));
    }
    let n = shape[0];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, spatial))
}

/// Forward pass. In training mode returns the updated running statistics;
/// in eval mode normalizes with the stored running statistics.
pub fn batchnorm_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    state: &BatchNormState,
    cfg: &BatchNormConfig,
    training: bool,
) -> Result<(Tensor, BatchNormSaved, Option<BatchNormState>)> {
    let c = cfg.num_features;
    let (n, spatial) = check_bn_input(x, c)?;
    if w.numel() != c || b.numel() != c {
        return Err(Error::dim(format!(
            "batchnorm affine must have {c} elements, got {} / {}",
            w.numel(),
            b.numel()
        )));
    }
    counter::bump("batchnorm");
    let m = n * spatial;
    let xd = x.data();
    let (mean, var) = if training {
        if m < 2 {
            return Err(Error::Contract(
                "batchnorm training needs more than one value per channel".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for s in 0..spatial {
                    acc += xd[base + s];
                }
            }
            let mu = acc / m as f64;
            mean[ch] = mu;
            let mut vacc = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for s in 0..spatial {
                    let d = xd[base + s] - mu;
                    vacc += d * d;
                }
            }
            var[ch] = vacc / m as f64; // biased, used for normalization
        }
        (mean, var)
    } else {
        (state.running_mean.data().to_vec(), state.running_var.data().to_vec())
    };

    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut y = vec![0.0; x.numel()];
    let wd = w.data();
    let bd = b.data();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let scale = wd[ch] * invstd[ch];
            let shift = bd[ch] - mean[ch] * scale;
            for s in 0..spatial {
                y[base + s] = xd[base + s] * scale + shift;
            }
        }
    }

    let new_state = if training {
        // running stats use the unbiased variance, same rule per channel as serial
        let mom = cfg.momentum;
        let unbiased: Vec<f64> = var.iter().map(|&v| v * m as f64 / (m - 1) as f64).collect();
        let rm: Vec<f64> = state
            .running_mean
            .data()
            .iter()
            .zip(mean.iter())
            .map(|(&r, &mu)| (1.0 - mom) * r + mom * mu)
            .collect();
        let rv: Vec<f64> = state
            .running_var
            .data()
            .iter()
            .zip(unbiased.iter())
            .map(|(&r, &v)| (1.0 - mom) * r + mom * v)
            .collect();
        Some(BatchNormState {
            running_mean: Tensor::new(vec![c], rm)?,
            running_var: Tensor::new(vec![c], rv)?,
        })
    } else {
        None
    };

    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormSaved {
            mean: Tensor::new(vec![c], mean)?,
            invstd: Tensor::new(vec![c], invstd)?,
            training,
        },
        new_state,
    ))
}

/// Gradients w.r.t. (x, w, b).
pub fn batchnorm_backward(
    grad_y: &Tensor,
    x: &Tensor,
    w: &Tensor,
    saved: &BatchNormSaved,
) -> (Tensor, Tensor, Tensor) {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let m = (n * spatial) as f64;
    let xd = x.data();
    let gyd = grad_y.data();
    let wd = w.data();
    let mean = saved.mean.data();
    let invstd = saved.invstd.data();

    let mut gw = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut sum_gy = vec![0.0; c];
    let mut sum_gy_xhat = vec![0.0; c];
    for ch in 0..c {
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for s in 0..spatial {
                let gy = gyd[base + s];
                let xhat = (xd[base + s] - mean[ch]) * invstd[ch];
                sg += gy;
                sgx += gy * xhat;
            }
        }
        sum_gy[ch] = sg;
        sum_gy_xhat[ch] = sgx;
        gb[ch] = sg;
        gw[ch] = sgx;
    }

    let mut gx = vec![0.0; x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let scale = wd[ch] * invstd[ch];
            for s in 0..spatial {
                let gy = gyd[base + s];
                if saved.training {
                    let xhat = (xd[base + s] - mean[ch]) * invstd[ch];
                    gx[base + s] =
                        scale * (gy - sum_gy[ch] / m - xhat * sum_gy_xhat[ch] / m);
                } else {
                    gx[base + s] = scale * gy;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(vec![c], gw).unwrap(),
        Tensor::new(vec![c], gb).unwrap(),
    )
}

/// Fuse B batch norms with identical (C, eps, momentum) into one over B*C
/// channels. Affine parameters and running statistics concatenate along the
/// channel axis.
pub fn fuse_batchnorm(
    configs: &[BatchNormConfig],
    weights: &[Tensor],
    biases: &[Tensor],
    states: &[BatchNormState],
) -> Result<(BatchNormConfig, FusedParameter, FusedParameter, BatchNormState)> {
    if configs.is_empty() {
        return Err(Error::EmptyFusion("no batchnorm configs".into()));
    }
    let first = &configs[0];
    for c in &configs[1..] {
        if c.num_features != first.num_features {
            return Err(Error::Infusible {
                field: "num_features".into(),
                detail: format!("{} vs {}", first.num_features, c.num_features),
            });
        }
        if c.eps != first.eps {
            return Err(Error::Infusible {
                field: "eps".into(),
                detail: format!("{} vs {}", first.eps, c.eps),
            });
        }
        if c.momentum != first.momentum {
            return Err(Error::Infusible {
                field: "momentum".into(),
                detail: format!("{} vs {}", first.momentum, c.momentum),
            });
        }
    }
    let fused_cfg = BatchNormConfig {
        num_features: configs.len() * first.num_features,
        eps: first.eps,
        momentum: first.momentum,
    };
    let w = FusedParameter::fuse(weights, 0)?;
    let b = FusedParameter::fuse(biases, 0)?;
    let rm: Vec<&Tensor> = states.iter().map(|s| &s.running_mean).collect();
    let rv: Vec<&Tensor> = states.iter().map(|s| &s.running_var).collect();
    let state = BatchNormState {
        running_mean: Tensor::concat(&rm, 0)?,
        running_var: Tensor::concat(&rv, 0)?,
    };
    Ok((fused_cfg, w, b, state))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormConfig {
    pub normalized_shape: Vec<usize>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormSaved {
    /// Per-row mean and inverse std, one entry per leading-dim row.
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
}

/// Right-aligned broadcast index map from an x-shaped flat index to a
/// w-shaped flat index (w dims are each equal to x's or 1).
struct BroadcastMap {
    x_dims: Vec<usize>,
    w_strides: Vec<usize>, // 0 where w broadcasts
}

impl BroadcastMap {
    fn new(x_shape: &[usize], w_shape: &[usize]) -> Result<Self> {
        if w_shape.len() > x_shape.len() {
            return Err(Error::dim(format!(
                "affine rank {} exceeds input rank {}",
                w_shape.len(),
                x_shape.len()
            )));
        }
        let offset = x_shape.len() - w_shape.len();
        let mut padded = vec![1usize; x_shape.len()];
        padded[offset..].copy_from_slice(w_shape);
        let mut strides = vec![0usize; x_shape.len()];
        let mut acc = 1;
        for d in (0..x_shape.len()).rev() {
            if padded[d] != 1 && padded[d] != x_shape[d] {
                return Err(Error::dim(format!(
                    "affine shape {w_shape:?} does not broadcast over {x_shape:?}"
                )));
            }
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        Ok(BroadcastMap { x_dims: x_shape.to_vec(), w_strides: strides })
    }

    fn map(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in (0..self.x_dims.len()).rev() {
            let coord = flat % self.x_dims[d];
            flat /= self.x_dims[d];
            out += coord * self.w_strides[d];
        }
        out
    }
}

fn ln_row_extent(x: &Tensor, cfg: &LayerNormConfig) -> Result<(usize, usize)> {
    let nr = cfg.normalized_shape.len();
    let rank = x.shape().len();
    if rank < nr || x.shape()[rank - nr..] != cfg.normalized_shape[..] {
        return Err(Error::dim(format!(
            "layernorm input {:?} does not end with normalized shape {:?}",
            x.shape(),
            cfg.normalized_shape
        )));
    }
    let e: usize = cfg.normalized_shape.iter().product();
    let rows = x.numel() / e;
    Ok((rows, e))
}

/// LayerNorm over the trailing normalized dims, then affine `y = xhat*w + b`
/// with w and b broadcast right-aligned (serial: [E...]; fused:
/// [B, 1, ..., E...]). The fused and serial paths share this kernel.
pub fn layernorm_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    cfg: &LayerNormConfig,
) -> Result<(Tensor, LayerNormSaved)> {
    let (rows, e) = ln_row_extent(x, cfg)?;
    counter::bump("layernorm");
    let wmap = BroadcastMap::new(x.shape(), w.shape())?;
    let bmap = BroadcastMap::new(x.shape(), b.shape())?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut y = vec![0.0; x.numel()];
    let mut mean = vec![0.0; rows];
    let mut invstd = vec![0.0; rows];
    for r in 0..rows {
        let base = r * e;
        let mut acc = 0.0;
        for i in 0..e {
            acc += xd[base + i];
        }
        let mu = acc / e as f64;
        let mut vacc = 0.0;
        for i in 0..e {
            let d = xd[base + i] - mu;
            vacc += d * d;
        }
        let inv = 1.0 / (vacc / e as f64 + cfg.eps).sqrt();
        mean[r] = mu;
        invstd[r] = inv;
        for i in 0..e {
            let flat = base + i;
            let xhat = (xd[flat] - mu) * inv;
            y[flat] = xhat * wd[wmap.map(flat)] + bd[bmap.map(flat)];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        LayerNormSaved { mean, invstd },
    ))
}

pub fn layernorm_backward(
    grad_y: &Tensor,
    x: &Tensor,
    w: &Tensor,
    b_shape: &[usize],
    saved: &LayerNormSaved,
    cfg: &LayerNormConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, e) = ln_row_extent(x, cfg)?;
    let wmap = BroadcastMap::new(x.shape(), w.shape())?;
    let bmap = BroadcastMap::new(x.shape(), b_shape)?;
    let xd = x.data();
    let gyd = grad_y.data();
    let wd = w.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; b_shape.iter().product()];
    for r in 0..rows {
        let base = r * e;
        let mu = saved.mean[r];
        let inv = saved.invstd[r];
        // first pass: affine grads and the two row reductions
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..e {
            let flat = base + i;
            let xhat = (xd[flat] - mu) * inv;
            let gy = gyd[flat];
            gw[wmap.map(flat)] += gy * xhat;
            gb[bmap.map(flat)] += gy;
            let dxhat = gy * wd[wmap.map(flat)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for i in 0..e {
            let flat = base + i;
            let xhat = (xd[flat] - mu) * inv;
            let dxhat = gyd[flat] * wd[wmap.map(flat)];
            gx[flat] =
                inv * (dxhat - sum_dxhat / e as f64 - xhat * sum_dxhat_xhat / e as f64);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(b_shape.to_vec(), gb)?,
    ))
}

/// Fuse B layer norms with identical normalized shape E into a per-model
/// affine pair shaped [B, 1 x middle_dims, E...] over a model-leading input.
pub fn fuse_layernorm(
    configs: &[LayerNormConfig],
    weights: &[Tensor],
    biases: &[Tensor],
    middle_dims: usize,
) -> Result<(LayerNormConfig, FusedParameter, FusedParameter)> {
    if configs.is_empty() {
        return Err(Error::EmptyFusion("no layernorm configs".into()));
    }
    let first = &configs[0];
    for c in &configs[1..] {
        if c.normalized_shape != first.normalized_shape {
            return Err(Error::Infusible {
                field: "normalized_shape".into(),
                detail: format!("{:?} vs {:?}", first.normalized_shape, c.normalized_shape),
            });
        }
        if c.eps != first.eps {
            return Err(Error::Infusible {
                field: "eps".into(),
                detail: format!("{} vs {}", first.eps, c.eps),
            });
        }
    }
    let b_models = configs.len();
    let mut shape = vec![1usize; 1 + middle_dims];
    shape.extend_from_slice(&first.normalized_shape);
    let reshaped_w: Vec<Tensor> =
        weights.iter().map(|t| t.reshape(&shape)).collect::<Result<_>>()?;
    let reshaped_b: Vec<Tensor> =
        biases.iter().map(|t| t.reshape(&shape)).collect::<Result<_>>()?;
    let wrefs: Vec<&Tensor> = reshaped_w.iter().collect();
    let brefs: Vec<&Tensor> = reshaped_b.iter().collect();
    let w = FusedParameter::new(Tensor::concat(&wrefs, 0)?, b_models, 0, 1)?;
    let b = FusedParameter::new(Tensor::concat(&brefs, 0)?, b_models, 0, 1)?;
    Ok((first.clone(), w, b))
}
