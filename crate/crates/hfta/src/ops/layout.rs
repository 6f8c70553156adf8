//! Fused activation layouts and the adapters between them.
//!
//! The fused operator families use heterogeneous shapes: convolution-family
//! ops fold models into the channel axis [N, B*C, ...], linear-family ops
//! keep an explicit leading model axis [B, N, ...], and the featureless
//! batch-norm form uses a mid model axis [N, B, C]. Adapters are bijective
//! element permutations; channel_folded and model_mid share memory layout,
//! so that adapter is a pure reshape.

use crate::error::{Error, Result};
use crate::ops::counter;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FusedLayout {
    /// [N, B*C, spatial...]; model b owns channel block b.
    ChannelFolded,
    /// [B, N, feature/channel...]; model b owns leading slice b.
    ModelLeading,
    /// [N, B, C, spatial...]; explicit mid model axis.
    ModelMid,
}

impl FusedLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel_folded" => Ok(FusedLayout::ChannelFolded),
            "model_leading" => Ok(FusedLayout::ModelLeading),
            "model_mid" => Ok(FusedLayout::ModelMid),
            other => Err(Error::config(format!("unknown layout `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusedLayout::ChannelFolded => "channel_folded",
            FusedLayout::ModelLeading => "model_leading",
            FusedLayout::ModelMid => "model_mid",
        }
    }

    /// The per-model (serial) shape implied by a fused shape under this layout.
    pub fn serial_shape(&self, fused: &[usize], b: usize) -> Result<Vec<usize>> {
        match self {
            FusedLayout::ChannelFolded => {
                if fused.len() < 2 {
                    return Err(Error::dim(format!(
                        "channel_folded needs rank >= 2, got {fused:?}"
                    )));
                }
                if !fused[1].is_multiple_of(b) {
                    return Err(Error::dim(format!(
                        "channel axis {} not divisible by B={b}",
                        fused[1]
                    )));
                }
                let mut s = fused.to_vec();
                s[1] = fused[1] / b;
                Ok(s)
            }
            FusedLayout::ModelLeading => {
                if fused.is_empty() || fused[0] != b {
                    return Err(Error::dim(format!(
                        "model_leading expects leading extent {b}, got {fused:?}"
                    )));
                }
                Ok(fused[1..].to_vec())
            }
            FusedLayout::ModelMid => {
                if fused.len() < 3 || fused[1] != b {
                    return Err(Error::dim(format!(
                        "model_mid expects [N, {b}, C, ...], got {fused:?}"
                    )));
                }
                let mut s = vec![fused[0]];
                s.extend_from_slice(&fused[2..]);
                Ok(s)
            }
        }
    }

    /// The fused shape for B models of the given serial shape.
    pub fn fused_shape(&self, serial: &[usize], b: usize) -> Result<Vec<usize>> {
        match self {
            FusedLayout::ChannelFolded => {
                if serial.len() < 2 {
                    return Err(Error::dim(format!(
                        "channel_folded needs serial rank >= 2, got {serial:?}"
                    )));
                }
                let mut s = serial.to_vec();
                s[1] *= b;
                Ok(s)
            }
            FusedLayout::ModelLeading => {
                let mut s = vec![b];
                s.extend_from_slice(serial);
                Ok(s)
            }
            FusedLayout::ModelMid => {
                if serial.len() < 2 {
                    return Err(Error::dim(format!(
                        "model_mid needs serial rank >= 2, got {serial:?}"
                    )));
                }
                let mut s = vec![serial[0], b];
                s.extend_from_slice(&serial[1..]);
                Ok(s)
            }
        }
    }

    /// Flat fused index of serial element `serial_flat` of model `bi`, given
    /// serial dims split as (n, rest) with rest = serial_numel / n_extent.
    fn fused_index(&self, bi: usize, serial_flat: usize, n_ext: usize, rest: usize, b: usize) -> usize {
        match self {
            // [N, B, C, S] and [N, B*C, S] share memory layout
            FusedLayout::ChannelFolded | FusedLayout::ModelMid => {
                let n = serial_flat / rest;
                let r = serial_flat % rest;
                (n * b + bi) * rest + r
            }
            FusedLayout::ModelLeading => bi * (n_ext * rest) + serial_flat,
        }
    }
}

/// The permutation taking each fused element of `from` to its position in
/// `to`, as a vector `perm` with `out[perm[i]] = in[i]`... exposed for the
/// oracle tests; `layout_adapt` applies it directly.
pub fn layout_adapt_indices(
    from: FusedLayout,
    to: FusedLayout,
    serial: &[usize],
    b: usize,
) -> Result<Vec<usize>> {
    let n_ext = serial[0];
    let numel: usize = serial.iter().product();
    let rest = numel / n_ext;
    let mut perm = vec![0usize; numel * b];
    for bi in 0..b {
        for sf in 0..numel {
            let src = from.fused_index(bi, sf, n_ext, rest, b);
            let dst = to.fused_index(bi, sf, n_ext, rest, b);
            perm[src] = dst;
        }
    }
    Ok(perm)
}

/// Re-lay a fused tensor from one layout to another. Bijective; adapting
/// back round-trips bitwise.
pub fn layout_adapt(x: &Tensor, from: FusedLayout, to: FusedLayout, b: usize) -> Result<Tensor> {
    let serial = from.serial_shape(x.shape(), b)?;
    let out_shape = to.fused_shape(&serial, b)?;
    counter::bump("layout_adapt");
    if from == to {
        return Ok(x.clone());
    }
    // same memory layout: reshape only
    if matches!(
        (from, to),
        (FusedLayout::ChannelFolded, FusedLayout::ModelMid)
            | (FusedLayout::ModelMid, FusedLayout::ChannelFolded)
    ) {
        return x.reshape(&out_shape);
    }
    let n_ext = serial[0];
    let numel: usize = serial.iter().product();
    let rest = numel / n_ext;
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    // contiguous per-(model, n) blocks of `rest` elements move as units
    for bi in 0..b {
        for n in 0..n_ext {
            let sf = n * rest;
            let src = from.fused_index(bi, sf, n_ext, rest, b);
            let dst = to.fused_index(bi, sf, n_ext, rest, b);
            out[dst..dst + rest].copy_from_slice(&xd[src..src + rest]);
        }
    }
    Tensor::new(out_shape, out)
}

/// Extract model `bi`'s serial tensor from a fused tensor.
pub fn extract_model(x: &Tensor, layout: FusedLayout, b: usize, bi: usize) -> Result<Tensor> {
    let serial = layout.serial_shape(x.shape(), b)?;
    match layout {
        FusedLayout::ChannelFolded => x.narrow(1, bi * serial[1], serial[1]),
        FusedLayout::ModelLeading => Ok(x.narrow(0, bi, 1)?.reshape(&serial)?),
        FusedLayout::ModelMid => Ok(x.narrow(1, bi, 1)?.reshape(&serial)?),
    }
}

/// Assemble B serial tensors into a fused tensor under `layout`.
pub fn stack_models(xs: &[&Tensor], layout: FusedLayout) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::EmptyFusion("no tensors to stack".into()));
    }
    let serial = xs[0].shape().to_vec();
    for x in xs {
        if x.shape() != serial.as_slice() {
            return Err(Error::dim(format!(
                "ragged serial shapes: {:?} vs {:?}",
                serial,
                x.shape()
            )));
        }
    }
    match layout {
        FusedLayout::ChannelFolded => Tensor::concat(xs, 1),
        FusedLayout::ModelLeading => {
            let mut shape = vec![1];
            shape.extend_from_slice(&serial);
            let reshaped: Vec<Tensor> =
                xs.iter().map(|x| x.reshape(&shape)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = reshaped.iter().collect();
            Tensor::concat(&refs, 0)
        }
        FusedLayout::ModelMid => {
            let mut shape = vec![serial[0], 1];
            shape.extend_from_slice(&serial[1..]);
            let reshaped: Vec<Tensor> =
                xs.iter().map(|x| x.reshape(&shape)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = reshaped.iter().collect();
            Tensor::concat(&refs, 1)
        }
    }
}

/// Write one model's serial tensor into its slice of a fused tensor.
pub fn write_model_block(
    out: &mut Tensor,
    serial: &Tensor,
    layout: FusedLayout,
    b: usize,
    bi: usize,
) {
    let sshape = serial.shape().to_vec();
    let n_ext = sshape[0];
    let rest: usize = sshape[1..].iter().product();
    let od = out.data_mut();
    let sd = serial.data();
    match layout {
        FusedLayout::ModelLeading => {
            let base = bi * n_ext * rest;
            od[base..base + n_ext * rest].copy_from_slice(sd);
        }
        FusedLayout::ChannelFolded | FusedLayout::ModelMid => {
            for n in 0..n_ext {
                let dst = (n * b + bi) * rest;
                od[dst..dst + rest].copy_from_slice(&sd[n * rest..(n + 1) * rest]);
            }
        }
    }
}

/// Flatten: serial [N, C, spatial...] -> [N, C*prod(spatial)]; fused
/// channel_folded [N, B*C, spatial...] -> model_leading [B, N, C*prod(spatial)].
pub fn flatten_fused(x: &Tensor, b: usize) -> Result<Tensor> {
    let serial = FusedLayout::ChannelFolded.serial_shape(x.shape(), b)?;
    let ml = layout_adapt(x, FusedLayout::ChannelFolded, FusedLayout::ModelLeading, b)?;
    let feat: usize = serial[1..].iter().product();
    ml.reshape(&[b, serial[0], feat])
}
