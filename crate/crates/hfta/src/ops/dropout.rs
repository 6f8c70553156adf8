//! Dropout with a per-model seeding discipline.
//!
//! Eval mode is the identity. In training mode, model b's mask is drawn
//! from the stream rng.split("dropout").split_index(node).split_index(b)
//! .split_index(step), walking the SERIAL element order of that model.
//! Because the fused op derives each model's mask from the same stream the
//! serial run would use, training-mode dropout is exactly equivalent under
//! fusion, not just distributionally.

use crate::error::{Error, Result};
use crate::ops::layout::{write_model_block, FusedLayout};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    /// Independent per-element masking.
    Plain,
    /// Whole-channel masking on [N, C, H, W].
    Channel2d,
}

pub fn validate_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout p must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Keep/scale mask for one serial tensor; survivors scale by 1/(1-p).
pub fn dropout_mask_serial(
    kind: DropoutKind,
    shape: &[usize],
    p: f64,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    validate_p(p)?;
    let scale = 1.0 / (1.0 - p);
    let numel: usize = shape.iter().product();
    let mut mask = vec![0.0; numel];
    match kind {
        DropoutKind::Plain => {
            for m in mask.iter_mut() {
                *m = if rng.uniform() >= p { scale } else { 0.0 };
            }
        }
        DropoutKind::Channel2d => {
            if shape.len() != 4 {
                return Err(Error::dim(format!(
                    "channel dropout expects [N,C,H,W], got {shape:?}"
                )));
            }
            let (n, c) = (shape[0], shape[1]);
            let spatial = shape[2] * shape[3];
            for ni in 0..n {
                for ci in 0..c {
                    let v = if rng.uniform() >= p { scale } else { 0.0 };
                    let base = (ni * c + ci) * spatial;
                    mask[base..base + spatial].fill(v);
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), mask)
}

/// Mask for a fused tensor of B models under `layout`, where model b's mask
/// bits are drawn from `stream_for(b)` in serial element order.
pub fn fused_dropout_mask(
    kind: DropoutKind,
    fused_shape: &[usize],
    layout: FusedLayout,
    b: usize,
    p: f64,
    stream_for: impl Fn(usize) -> StreamRng,
) -> Result<Tensor> {
    validate_p(p)?;
    let serial = layout.serial_shape(fused_shape, b)?;
    let mut out = Tensor::zeros(fused_shape);
    for bi in 0..b {
        let mut rng = stream_for(bi);
        let m = dropout_mask_serial(kind, &serial, p, &mut rng)?;
        write_model_block(&mut out, &m, layout, b, bi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::layout::extract_model;

    #[test]
    fn p_zero_is_identity_mask() {
        let mut rng = StreamRng::new(71);
        let m = dropout_mask_serial(DropoutKind::Plain, &[3, 4], 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p_out_of_range_rejected() {
        assert!(validate_p(1.0).is_err());
        assert!(validate_p(-0.1).is_err());
        assert!(validate_p(0.0).is_ok());
        assert!(validate_p(0.99).is_ok());
    }

    #[test]
    fn channel_mask_zeroes_whole_channels() {
        let mut rng = StreamRng::new(72);
        let m = dropout_mask_serial(DropoutKind::Channel2d, &[2, 5, 3, 3], 0.5, &mut rng).unwrap();
        for n in 0..2 {
            for c in 0..5 {
                let base = (n * 5 + c) * 9;
                let first = m.data()[base];
                assert!(m.data()[base..base + 9].iter().all(|&v| v == first));
            }
        }
    }

    #[test]
    fn sample_mean_preserved_within_three_sigma() {
        // Monte-Carlo oracle: E[mask] = 1, so mean(out) ~ mean(in).
        // With x = 1 and p = 0.5 each element is 2*Bernoulli(0.5):
        // var = 1, sigma_mean = 1/sqrt(n).
        let n = 100_000;
        let mut rng = StreamRng::new(73);
        let m = dropout_mask_serial(DropoutKind::Plain, &[n], 0.5, &mut rng).unwrap();
        let mean = m.sum() / n as f64;
        let sigma = 1.0 / (n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn fused_mask_blocks_equal_serial_masks_per_stream() {
        let root = StreamRng::new(74).split("dropout");
        let b = 3;
        let serial_shape = [2usize, 4, 3, 3];
        for layout in [FusedLayout::ChannelFolded, FusedLayout::ModelLeading] {
            let fused_shape = layout.fused_shape(&serial_shape, b).unwrap();
            let fm = fused_dropout_mask(
                DropoutKind::Channel2d,
                &fused_shape,
                layout,
                b,
                0.4,
                |bi| root.split_index(bi as u64),
            )
            .unwrap();
            for bi in 0..b {
                let mut rng = root.split_index(bi as u64);
                let sm =
                    dropout_mask_serial(DropoutKind::Channel2d, &serial_shape, 0.4, &mut rng)
                        .unwrap();
                let block = extract_model(&fm, layout, b, bi).unwrap();
                assert_eq!(block, sm);
            }
        }
    }
}
