//! 2d pooling. Pooling is per-channel, so the fused form over [N, B*C, H, W]
//! is the serial operator with a wider channel axis; nothing else changes.

use crate::error::{Error, Result};
use crate::ops::counter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum PoolKind {
    /// kernel window + stride over padded input
    Max2d { kernel: usize, stride: usize, padding: usize },
    /// target output size per spatial axis
    AdaptiveAvg2d { output: (usize, usize) },
}

#[derive(Clone, Debug)]
pub struct PoolSaved {
    /// For max pooling: flat input index of each output's argmax.
    pub argmax: Vec<usize>,
}

pub fn pool_output_shape(kind: &PoolKind, input: &[usize]) -> Result<Vec<usize>> {
    if input.len() != 4 {
        return Err(Error::dim(format!("pool expects [N,C,H,W], got {input:?}")));
    }
    let (h, w) = (input[2], input[3]);
    match kind {
        PoolKind::Max2d { kernel, stride, padding } => {
            if *kernel == 0 || *stride == 0 {
                return Err(Error::config("pool kernel and stride must be positive"));
            }
            let hp = h + 2 * padding;
            let wp = w + 2 * padding;
            if hp < *kernel || wp < *kernel {
                return Err(Error::dim(format!(
                    "pool window {kernel} larger than padded input {hp}x{wp}"
                )));
            }
            Ok(vec![
                input[0],
                input[1],
                (hp - kernel) / stride + 1,
                (wp - kernel) / stride + 1,
            ])
        }
        PoolKind::AdaptiveAvg2d { output } => {
            if output.0 == 0 || output.1 == 0 || output.0 > h || output.1 > w {
                return Err(Error::dim(format!(
                    "adaptive output {output:?} incompatible with input {h}x{w}"
                )));
            }
            Ok(vec![input[0], input[1], output.0, output.1])
        }
    }
}

/// Adaptive region [start, end) for output cell i of `out` cells over `n`.
fn adaptive_span(i: usize, out: usize, n: usize) -> (usize, usize) {
    let start = (i * n) / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

pub fn fused_pool(kind: &PoolKind, x: &Tensor) -> Result<(Tensor, PoolSaved)> {
    let out_shape = pool_output_shape(kind, x.shape())?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let mut y = vec![0.0; out_shape.iter().product()];
    let mut argmax = Vec::new();
    match kind {
        PoolKind::Max2d { kernel, stride, padding } => {
            counter::bump("maxpool2d");
            argmax = vec![0usize; y.len()];
            let p = *padding as isize;
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for dh in 0..*kernel {
                                let ih = (oh * stride) as isize - p + dh as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for dw in 0..*kernel {
                                    let iw = (ow * stride) as isize - p + dw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + ih as usize) * w + iw as usize;
                                    // strict > keeps the first maximum: ties are deterministic
                                    if xd[xi] > best {
                                        best = xd[xi];
                                        best_idx = xi;
                                    }
                                }
                            }
                            let yi = ((ni * c + ci) * ho + oh) * wo + ow;
                            y[yi] = best;
                            argmax[yi] = best_idx;
                        }
                    }
                }
            }
        }
        PoolKind::AdaptiveAvg2d { output } => {
            counter::bump("adaptive_avg_pool2d");
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        let (h0, h1) = adaptive_span(oh, output.0, h);
                        for ow in 0..wo {
                            let (w0, w1) = adaptive_span(ow, output.1, w);
                            let mut acc = 0.0;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    acc += xd[((ni * c + ci) * h + ih) * w + iw];
                                }
                            }
                            let count = ((h1 - h0) * (w1 - w0)) as f64;
                            y[((ni * c + ci) * ho + oh) * wo + ow] = acc / count;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(out_shape, y)?, PoolSaved { argmax }))
}

pub fn pool_backward(
    kind: &PoolKind,
    grad_y: &Tensor,
    input_shape: &[usize],
    saved: &PoolSaved,
) -> Tensor {
    let mut gx = vec![0.0; input_shape.iter().product()];
    match kind {
        PoolKind::Max2d { .. } => {
            for (yi, &xi) in saved.argmax.iter().enumerate() {
                gx[xi] += grad_y.data()[yi];
            }
        }
        PoolKind::AdaptiveAvg2d { output } => {
            let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
            let (ho, wo) = (output.0, output.1);
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        let (h0, h1) = adaptive_span(oh, ho, h);
                        for ow in 0..wo {
                            let (w0, w1) = adaptive_span(ow, wo, w);
                            let count = ((h1 - h0) * (w1 - w0)) as f64;
                            let g = grad_y.data()[((ni * c + ci) * ho + oh) * wo + ow] / count;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    gx[((ni * c + ci) * h + ih) * w + iw] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn adaptive_one_by_one_is_channel_mean() {
        let mut rng = StreamRng::new(51);
        let x = Tensor::rand_uniform(&[2, 3, 4, 4], 1.0, &mut rng);
        let (y, _) = fused_pool(&PoolKind::AdaptiveAvg2d { output: (1, 1) }, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..16 {
                    acc += x.data()[(n * 3 + c) * 16 + i];
                }
                assert!((y.data()[n * 3 + c] - acc / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_over_known_grid() {
        // window-scan oracle on a hand-laid 4x4 grid
        #[rustfmt::skip]
        let vals = vec![
            1., 2., 5., 3.,
            0., 4., 1., 1.,
            9., 2., 0., 7.,
            3., 8., 6., 2.,
        ];
        let x = Tensor::new(vec![1, 1, 4, 4], vals).unwrap();
        let (y, _) =
            fused_pool(&PoolKind::Max2d { kernel: 2, stride: 2, padding: 0 }, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4., 5., 9., 7.]);
    }

    #[test]
    fn fused_equals_channel_concat_of_serial_exactly() {
        let mut rng = StreamRng::new(52);
        for kind in [
            PoolKind::Max2d { kernel: 2, stride: 1, padding: 0 },
            PoolKind::AdaptiveAvg2d { output: (2, 2) },
        ] {
            let xs: Vec<Tensor> =
                (0..3).map(|_| Tensor::rand_uniform(&[2, 2, 5, 5], 1.0, &mut rng)).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            let fx = Tensor::concat(&refs, 1).unwrap();
            let (fy, _) = fused_pool(&kind, &fx).unwrap();
            for m in 0..3 {
                let (sy, _) = fused_pool(&kind, &xs[m]).unwrap();
                let slice = fy.narrow(1, m * 2, 2).unwrap();
                assert!(sy.max_abs_diff(&slice) == 0.0);
            }
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let kind = PoolKind::Max2d { kernel: 5, stride: 1, padding: 0 };
        assert!(fused_pool(&kind, &x).is_err());
    }
}
