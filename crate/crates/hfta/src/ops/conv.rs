//! Direct grouped (de)convolution, 1d and 2d.
//!
//! The fused form of B identical convolutions is a single grouped
//! convolution over B*C channels with B*g groups: group i reads input
//! channel block i and writes output channel block i, so model b owns
//! groups [b*g, (b+1)*g). Weights and biases are concatenated along the
//! leading (per-model) axis. The kernels are deliberately naive loops:
//! the per-group iteration order is identical in the serial and fused
//! paths, which makes the equivalence bit-exact, not just close.

use crate::error::{Error, Result};
use crate::ops::{counter, FusedParameter};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv1d,
    Conv2d,
    ConvT2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// [k] for 1d, [kh, kw] for 2d.
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub transposed: bool,
}

impl ConvConfig {
    pub fn kind(&self) -> Result<ConvKind> {
        match (self.kernel.len(), self.transposed) {
            (1, false) => Ok(ConvKind::Conv1d),
            (2, false) => Ok(ConvKind::Conv2d),
            (2, true) => Ok(ConvKind::ConvT2d),
            (1, true) => Err(Error::config("transposed conv is only supported in 2d")),
            (n, _) => Err(Error::config(format!("kernel rank {n} unsupported"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::config("channel and group counts must be positive"));
        }
        if !self.in_channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        if self.kernel.contains(&0) || self.stride == 0 {
            return Err(Error::config("kernel and stride extents must be positive"));
        }
        Ok(())
    }

    /// Weight tensor shape: [Cout, Cin/G, k...] for conv,
    /// [Cin, Cout/G, k...] for transposed conv.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = if self.transposed {
            vec![self.in_channels, self.out_channels / self.groups]
        } else {
            vec![self.out_channels, self.in_channels / self.groups]
        };
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_channels]
    }

    /// Spatial output extent for input extent `n` along one axis.
    pub fn out_extent(&self, n: usize, axis: usize) -> Result<usize> {
        let k = self.kernel[axis];
        if self.transposed {
            let out = (n - 1) * self.stride + k;
            let out = out
                .checked_sub(2 * self.padding)
                .filter(|&o| o > 0)
                .ok_or_else(|| {
                    Error::dim(format!(
                        "transposed conv output extent non-positive for input {n}, kernel {k}, \
                         stride {}, padding {}",
                        self.stride, self.padding
                    ))
                })?;
            Ok(out)
        } else {
            let padded = n + 2 * self.padding;
            if padded < k {
                return Err(Error::dim(format!(
                    "kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / self.stride + 1)
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial_rank = self.kernel.len();
        if input.len() != spatial_rank + 2 {
            return Err(Error::dim(format!(
                "conv input rank {} does not match kernel rank {spatial_rank}",
                input.len()
            )));
        }
        if input[1] != self.in_channels {
            return Err(Error::dim(format!(
                "input has {} channels, config expects {}",
                input[1], self.in_channels
            )));
        }
        let mut out = vec![input[0], self.out_channels];
        for a in 0..spatial_rank {
            out.push(self.out_extent(input[2 + a], a)?);
        }
        Ok(out)
    }
}

/// Grouped (de)convolution forward.
pub fn grouped_conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvConfig) -> Result<Tensor> {
    let kind = cfg.kind()?;
    if w.shape() != cfg.weight_shape().as_slice() {
        return Err(Error::dim(format!(
            "weight shape {:?} does not match config {:?}",
            w.shape(),
            cfg.weight_shape()
        )));
    }
    if b.shape() != cfg.bias_shape().as_slice() {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match config {:?}",
            b.shape(),
            cfg.bias_shape()
        )));
    }
    let out_shape = cfg.output_shape(x.shape())?;
    match kind {
        ConvKind::Conv1d => {
            counter::bump("conv1d");
            Ok(conv1d_fwd(x, w, b, cfg, &out_shape))
        }
        ConvKind::Conv2d => {
            counter::bump("conv2d");
            Ok(conv2d_fwd(x, w, b, cfg, &out_shape))
        }
        ConvKind::ConvT2d => {
            counter::bump("convt2d");
            Ok(convt2d_fwd(x, w, b, cfg, &out_shape))
        }
    }
}

/// Gradients w.r.t. (x, w, b) given the upstream gradient.
pub fn grouped_conv_backward(
    grad_y: &Tensor,
    x: &Tensor,
    w: &Tensor,
    cfg: &ConvConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    match cfg.kind()? {
        ConvKind::Conv1d => Ok(conv1d_bwd(grad_y, x, w, cfg)),
        ConvKind::Conv2d => Ok(conv2d_bwd(grad_y, x, w, cfg)),
        ConvKind::ConvT2d => Ok(convt2d_bwd(grad_y, x, w, cfg)),
    }
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvConfig, out_shape: &[usize]) -> Tensor {
    let (n_batch, h_in, w_in) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (out_shape[2], out_shape[3]);
    let (kh, kw) = (cfg.kernel[0], cfg.kernel[1]);
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut y = vec![0.0; out_shape.iter().product()];
    for n in 0..n_batch {
        for grp in 0..g {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bd[oc];
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for dh in 0..kh {
                                let ih = (oh * s) as isize - p + dh as isize;
                                if ih < 0 || ih >= h_in as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = (ow * s) as isize - p + dw as isize;
                                    if iw < 0 || iw >= w_in as isize {
                                        continue;
                                    }
                                    let xi = ((n * cfg.in_channels + ic) * h_in
                                        + ih as usize)
                                        * w_in
                                        + iw as usize;
                                    let wi = ((oc * cin_g + icl) * kh + dh) * kw + dw;
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                        let yi = ((n * cfg.out_channels + oc) * h_out + oh) * w_out + ow;
                        y[yi] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), y).expect("conv2d output shape")
}

fn conv2d_bwd(grad_y: &Tensor, x: &Tensor, w: &Tensor, cfg: &ConvConfig) -> (Tensor, Tensor, Tensor) {
    let (n_batch, h_in, w_in) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (grad_y.shape()[2], grad_y.shape()[3]);
    let (kh, kw) = (cfg.kernel[0], cfg.kernel[1]);
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let gyd = grad_y.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cfg.out_channels];
    for n in 0..n_batch {
        for grp in 0..g {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let gy = gyd[((n * cfg.out_channels + oc) * h_out + oh) * w_out + ow];
                        gb[oc] += gy;
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for dh in 0..kh {
                                let ih = (oh * s) as isize - p + dh as isize;
                                if ih < 0 || ih >= h_in as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = (ow * s) as isize - p + dw as isize;
                                    if iw < 0 || iw >= w_in as isize {
                                        continue;
                                    }
                                    let xi = ((n * cfg.in_channels + ic) * h_in
                                        + ih as usize)
                                        * w_in
                                        + iw as usize;
                                    let wi = ((oc * cin_g + icl) * kh + dh) * kw + dw;
                                    gw[wi] += gy * xd[xi];
                                    gx[xi] += gy * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![cfg.out_channels], gb).unwrap(),
    )
}

fn conv1d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvConfig, out_shape: &[usize]) -> Tensor {
    let (n_batch, l_in) = (x.shape()[0], x.shape()[2]);
    let l_out = out_shape[2];
    let k = cfg.kernel[0];
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut y = vec![0.0; out_shape.iter().product()];
    for n in 0..n_batch {
        for grp in 0..g {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for ol in 0..l_out {
                    let mut acc = bd[oc];
                    for icl in 0..cin_g {
                        let ic = grp * cin_g + icl;
                        for dk in 0..k {
                            let il = (ol * s) as isize - p + dk as isize;
                            if il < 0 || il >= l_in as isize {
                                continue;
                            }
                            let xi = (n * cfg.in_channels + ic) * l_in + il as usize;
                            let wi = (oc * cin_g + icl) * k + dk;
                            acc += xd[xi] * wd[wi];
                        }
                    }
                    y[(n * cfg.out_channels + oc) * l_out + ol] = acc;
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), y).expect("conv1d output shape")
}

fn conv1d_bwd(grad_y: &Tensor, x: &Tensor, w: &Tensor, cfg: &ConvConfig) -> (Tensor, Tensor, Tensor) {
    let (n_batch, l_in) = (x.shape()[0], x.shape()[2]);
    let l_out = grad_y.shape()[2];
    let k = cfg.kernel[0];
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let gyd = grad_y.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cfg.out_channels];
    for n in 0..n_batch {
        for grp in 0..g {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for ol in 0..l_out {
                    let gy = gyd[(n * cfg.out_channels + oc) * l_out + ol];
                    gb[oc] += gy;
                    for icl in 0..cin_g {
                        let ic = grp * cin_g + icl;
                        for dk in 0..k {
                            let il = (ol * s) as isize - p + dk as isize;
                            if il < 0 || il >= l_in as isize {
                                continue;
                            }
                            let xi = (n * cfg.in_channels + ic) * l_in + il as usize;
                            let wi = (oc * cin_g + icl) * k + dk;
                            gw[wi] += gy * xd[xi];
                            gx[xi] += gy * wd[wi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![cfg.out_channels], gb).unwrap(),
    )
}

fn convt2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, cfg: &ConvConfig, out_shape: &[usize]) -> Tensor {
    let (n_batch, h_in, w_in) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (out_shape[2], out_shape[3]);
    let (kh, kw) = (cfg.kernel[0], cfg.kernel[1]);
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride as isize, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut y = vec![0.0; out_shape.iter().product()];
    // y[oh] gathers x[ih] where oh = ih*s - p + dh
    for n in 0..n_batch {
        for grp in 0..g {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bd[oc];
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for dh in 0..kh {
                                let num_h = oh as isize + p - dh as isize;
                                if num_h < 0 || num_h % s != 0 {
                                    continue;
                                }
                                let ih = num_h / s;
                                if ih >= h_in as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let num_w = ow as isize + p - dw as isize;
                                    if num_w < 0 || num_w % s != 0 {
                                        continue;
                                    }
                                    let iw = num_w / s;
                                    if iw >= w_in as isize {
                                        continue;
                                    }
                                    let xi = ((n * cfg.in_channels + ic) * h_in
                                        + ih as usize)
                                        * w_in
                                        + iw as usize;
                                    let wi = ((ic * cout_g + ocl) * kh + dh) * kw + dw;
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                        let yi = ((n * cfg.out_channels + oc) * h_out + oh) * w_out + ow;
                        y[yi] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), y).expect("convt2d output shape")
}

fn convt2d_bwd(grad_y: &Tensor, x: &Tensor, w: &Tensor, cfg: &ConvConfig) -> (Tensor, Tensor, Tensor) {
    let (n_batch, h_in, w_in) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (grad_y.shape()[2], grad_y.shape()[3]);
    let (kh, kw) = (cfg.kernel[0], cfg.kernel[1]);
    let g = cfg.groups;
    let cin_g = cfg.in_channels / g;
    let cout_g = cfg.out_channels / g;
    let (s, p) = (cfg.stride as isize, cfg.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let gyd = grad_y.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cfg.out_channels];
    for n in 0..n_batch {
        for oc in 0..cfg.out_channels {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    gb[oc] += gyd[((n * cfg.out_channels + oc) * h_out + oh) * w_out + ow];
                }
            }
        }
    }
    // scatter view: each x[ih,iw] contributes to y[ih*s - p + dh, ...]
    for n in 0..n_batch {
        for grp in 0..g {
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                for ih in 0..h_in {
                    for iw in 0..w_in {
                        let xi = ((n * cfg.in_channels + ic) * h_in + ih) * w_in + iw;
                        let xv = xd[xi];
                        for ocl in 0..cout_g {
                            let oc = grp * cout_g + ocl;
                            for dh in 0..kh {
                                let oh = ih as isize * s - p + dh as isize;
                                if oh < 0 || oh >= h_out as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let ow = iw as isize * s - p + dw as isize;
                                    if ow < 0 || ow >= w_out as isize {
                                        continue;
                                    }
                                    let gy = gyd[((n * cfg.out_channels + oc) * h_out
                                        + oh as usize)
                                        * w_out
                                        + ow as usize];
                                    let wi = ((ic * cout_g + ocl) * kh + dh) * kw + dw;
                                    gw[wi] += gy * xv;
                                    gx[xi] += gy * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![cfg.out_channels], gb).unwrap(),
    )
}

/// Fuse B identically-configured convolutions into one grouped convolution
/// with in_channels B*Cx, out_channels B*Cy and groups B*g.
pub fn fuse_conv_family(
    configs: &[ConvConfig],
    weights: &[Tensor],
    biases: &[Tensor],
) -> Result<(ConvConfig, FusedParameter, FusedParameter)> {
    if configs.is_empty() {
        return Err(Error::EmptyFusion("no conv configs".into()));
    }
    let b = configs.len();
    if weights.len() != b || biases.len() != b {
        return Err(Error::Fusion(format!(
            "{b} configs but {} weights / {} biases",
            weights.len(),
            biases.len()
        )));
    }
    let first = &configs[0];
    first.validate()?;
    for c in &configs[1..] {
        for (field, differs) in [
            ("in_channels", c.in_channels != first.in_channels),
            ("out_channels", c.out_channels != first.out_channels),
            ("kernel", c.kernel != first.kernel),
            ("stride", c.stride != first.stride),
            ("padding", c.padding != first.padding),
            ("groups", c.groups != first.groups),
            ("transposed", c.transposed != first.transposed),
        ] {
            if differs {
                return Err(Error::Infusible {
                    field: field.into(),
                    detail: format!("{first:?} vs {c:?}"),
                });
            }
        }
    }
    let fused_cfg = ConvConfig {
        in_channels: b * first.in_channels,
        out_channels: b * first.out_channels,
        kernel: first.kernel.clone(),
        stride: first.stride,
        padding: first.padding,
        groups: b * first.groups,
        transposed: first.transposed,
    };
    // per-model block along the leading weight axis: Cy for conv, Cx for convT
    let w = FusedParameter::fuse(weights, 0)?;
    let bias = FusedParameter::fuse(biases, 0)?;
    Ok((fused_cfg, w, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::linear::matmul;
    use crate::rng::StreamRng;

    fn rand(shape: &[usize], rng: &mut StreamRng) -> Tensor {
        Tensor::rand_uniform(shape, 1.0, rng)
    }

    #[test]
    fn one_by_one_kernel_is_per_pixel_linear_map() {
        // groups=1, 1x1 kernel: conv == matmul over channels at every pixel
        let mut rng = StreamRng::new(3);
        let cfg = ConvConfig {
            in_channels: 3,
            out_channels: 4,
            kernel: vec![1, 1],
            stride: 1,
            padding: 0,
            groups: 1,
            transposed: false,
        };
        let x = rand(&[2, 3, 5, 5], &mut rng);
        let w = rand(&cfg.weight_shape(), &mut rng);
        let b = Tensor::zeros(&[4]);
        let y = grouped_conv_forward(&x, &w, &b, &cfg).unwrap();
        let wm = w.reshape(&[4, 3]).unwrap();
        for n in 0..2 {
            for h in 0..5 {
                for wv in 0..5 {
                    let px: Vec<f64> =
                        (0..3).map(|c| x.data()[((n * 3 + c) * 5 + h) * 5 + wv]).collect();
                    let px_t = Tensor::new(vec![3, 1], px).unwrap();
                    let out = matmul(&wm, &px_t).unwrap();
                    for c in 0..4 {
                        let got = y.data()[((n * 4 + c) * 5 + h) * 5 + wv];
                        assert!((got - out.data()[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn groups_two_equals_independent_halves() {
        let mut rng = StreamRng::new(4);
        let cfg = ConvConfig {
            in_channels: 4,
            out_channels: 6,
            kernel: vec![3, 3],
            stride: 1,
            padding: 1,
            groups: 2,
            transposed: false,
        };
        let x = rand(&[2, 4, 6, 6], &mut rng);
        let w = rand(&cfg.weight_shape(), &mut rng);
        let b = rand(&[6], &mut rng);
        let y = grouped_conv_forward(&x, &w, &b, &cfg).unwrap();

        let half = ConvConfig { in_channels: 2, out_channels: 3, groups: 1, ..cfg.clone() };
        for grp in 0..2 {
            let xh = x.narrow(1, grp * 2, 2).unwrap();
            let wh = w.narrow(0, grp * 3, 3).unwrap();
            let bh = b.narrow(0, grp * 3, 3).unwrap();
            let yh = grouped_conv_forward(&xh, &wh, &bh, &half).unwrap();
            let yslice = y.narrow(1, grp * 3, 3).unwrap();
            assert!(yh.max_abs_diff(&yslice) == 0.0);
        }
    }

    #[test]
    fn transposed_output_extent_formula() {
        let mut rng = StreamRng::new(5);
        for _ in 0..5 {
            let h_in = 2 + rng.below(6);
            let k = 2 + rng.below(3);
            let pad = rng.below(k.min(2));
            let cfg = ConvConfig {
                in_channels: 2,
                out_channels: 2,
                kernel: vec![k, k],
                stride: 2,
                padding: pad,
                groups: 1,
                transposed: true,
            };
            let expect = (h_in - 1) * 2 + k - 2 * pad;
            assert_eq!(cfg.out_extent(h_in, 0).unwrap(), expect);
            let x = rand(&[1, 2, h_in, h_in], &mut rng);
            let w = rand(&cfg.weight_shape(), &mut rng);
            let b = Tensor::zeros(&[2]);
            let y = grouped_conv_forward(&x, &w, &b, &cfg).unwrap();
            assert_eq!(y.shape(), &[1, 2, expect, expect]);
        }
    }

    #[test]
    fn fuse_two_convs_doubles_channels_and_groups() {
        // B=2, Cx=3, Cy=4, g=1 -> fused conv with 6 in, 8 out, 2 groups
        let cfg = ConvConfig {
            in_channels: 3,
            out_channels: 4,
            kernel: vec![3, 3],
            stride: 1,
            padding: 1,
            groups: 1,
            transposed: false,
        };
        let mut rng = StreamRng::new(6);
        let ws: Vec<Tensor> = (0..2).map(|_| rand(&cfg.weight_shape(), &mut rng)).collect();
        let bs: Vec<Tensor> = (0..2).map(|_| rand(&[4], &mut rng)).collect();
        let (fcfg, fw, fb) = fuse_conv_family(&[cfg.clone(), cfg], &ws, &bs).unwrap();
        assert_eq!(fcfg.in_channels, 6);
        assert_eq!(fcfg.out_channels, 8);
        assert_eq!(fcfg.groups, 2);
        assert_eq!(fw.per_model_extent, 4);
        assert_eq!(fb.per_model_extent, 4);
    }

    #[test]
    fn fuse_single_model_is_original_config() {
        let cfg = ConvConfig {
            in_channels: 2,
            out_channels: 3,
            kernel: vec![2],
            stride: 1,
            padding: 0,
            groups: 1,
            transposed: false,
        };
        let mut rng = StreamRng::new(7);
        let w = rand(&cfg.weight_shape(), &mut rng);
        let b = rand(&[3], &mut rng);
        let (fcfg, ..) = fuse_conv_family(std::slice::from_ref(&cfg), &[w], &[b]).unwrap();
        assert_eq!(fcfg, cfg);
    }

    #[test]
    fn fused_conv_matches_three_serial_convs() {
        let cfg = ConvConfig {
            in_channels: 2,
            out_channels: 3,
            kernel: vec![3, 3],
            stride: 1,
            padding: 1,
            groups: 1,
            transposed: false,
        };
        let mut rng = StreamRng::new(8);
        let b_models = 3;
        let ws: Vec<Tensor> =
            (0..b_models).map(|_| rand(&cfg.weight_shape(), &mut rng)).collect();
        let bs: Vec<Tensor> = (0..b_models).map(|_| rand(&[3], &mut rng)).collect();
        let xs: Vec<Tensor> = (0..b_models).map(|_| rand(&[2, 2, 5, 5], &mut rng)).collect();
        let (fcfg, fw, fb) =
            fuse_conv_family(&vec![cfg.clone(); b_models], &ws, &bs).unwrap();
        let xrefs: Vec<&Tensor> = xs.iter().collect();
        let fused_x = Tensor::concat(&xrefs, 1).unwrap();
        let fused_y = grouped_conv_forward(&fused_x, &fw.value, &fb.value, &fcfg).unwrap();
        for m in 0..b_models {
            let serial = grouped_conv_forward(&xs[m], &ws[m], &bs[m], &cfg).unwrap();
            let slice = fused_y.narrow(1, m * 3, 3).unwrap();
            assert!(serial.max_abs_diff(&slice) <= 1e-12);
        }
    }

    #[test]
    fn infusible_config_field_named() {
        let a = ConvConfig {
            in_channels: 2,
            out_channels: 3,
            kernel: vec![3, 3],
            stride: 1,
            padding: 1,
            groups: 1,
            transposed: false,
        };
        let b = ConvConfig { out_channels: 4, ..a.clone() };
        let mut rng = StreamRng::new(9);
        let ws = vec![rand(&a.weight_shape(), &mut rng), rand(&b.weight_shape(), &mut rng)];
        let bs = vec![rand(&[3], &mut rng), rand(&[4], &mut rng)];
        match fuse_conv_family(&[a, b], &ws, &bs) {
            Err(Error::Infusible { field, .. }) => assert_eq!(field, "out_channels"),
            other => panic!("expected infusible error, got {other:?}"),
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let cfg = ConvConfig {
            in_channels: 3,
            out_channels: 4,
            kernel: vec![3, 3],
            stride: 1,
            padding: 0,
            groups: 2,
            transposed: false,
        };
        assert!(cfg.validate().is_err());
    }
}
