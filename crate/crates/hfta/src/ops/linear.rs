//! Matrix products: serial `matmul` and the batched `baddbmm` that realizes
//! B fused linear layers in one invocation.
//!
//! Fused linear keeps an explicit model axis: inputs [B, N, Fx], weights
//! [B, Fx, Fy], bias [B, 1, Fy] broadcast over rows. Slice b of the batched
//! product is computed with the same inner loop as the serial product, so
//! fused and serial agree bitwise.

use crate::error::{Error, Result};
use crate::ops::{counter, FusedParameter};
use crate::tensor::Tensor;

/// Standard matrix product [M,K] x [K,N] -> [M,N].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::dim(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    counter::bump("matmul");
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of matmul: (dA, dB) = (dY Bᵀ, Aᵀ dY).
pub fn matmul_backward(grad_y: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let gy = grad_y.data();
    let ad = a.data();
    let bd = b.data();
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += gy[i * n + j] * bd[p * n + j];
            }
            ga[i * k + p] = acc;
        }
    }
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..m {
                acc += ad[i * k + p] * gy[i * n + j];
            }
            gb[p * n + j] = acc;
        }
    }
    (
        Tensor::new(vec![m, k], ga).unwrap(),
        Tensor::new(vec![k, n], gb).unwrap(),
    )
}

/// out[b] = x[b] . w[b] + bias[b], bias broadcast over the row axis.
pub fn baddbmm(bias: &Tensor, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 || w.shape().len() != 3 || bias.shape().len() != 3 {
        return Err(Error::dim(format!(
            "baddbmm expects rank-3 tensors, got bias {:?}, x {:?}, w {:?}",
            bias.shape(),
            x.shape(),
            w.shape()
        )));
    }
    let (b, n, fx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fy = w.shape()[2];
    if w.shape()[0] != b || bias.shape()[0] != b {
        return Err(Error::dim(format!(
            "baddbmm batch extents disagree: bias {:?}, x {:?}, w {:?}",
            bias.shape(),
            x.shape(),
            w.shape()
        )));
    }
    if w.shape()[1] != fx {
        return Err(Error::dim(format!(
            "baddbmm inner dimensions disagree: x {:?} vs w {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if bias.shape()[1] != 1 || bias.shape()[2] != fy {
        return Err(Error::dim(format!(
            "baddbmm bias must be [B, 1, Fy] = [{b}, 1, {fy}], got {:?}",
            bias.shape()
        )));
    }
    counter::bump("baddbmm");
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    let mut out = vec![0.0; b * n * fy];
    // i-p-j order keeps weight access stride-1; each out[i,j] still sums
    // over p in ascending order, so results match the naive loop bitwise
    for bi in 0..b {
        for i in 0..n {
            let row = &mut out[(bi * n + i) * fy..(bi * n + i + 1) * fy];
            for p in 0..fx {
                let a = xd[(bi * n + i) * fx + p];
                let wrow = &wd[(bi * fx + p) * fy..(bi * fx + p + 1) * fy];
                for j in 0..fy {
                    row[j] += a * wrow[j];
                }
            }
            let brow = &bd[bi * fy..(bi + 1) * fy];
            for j in 0..fy {
                row[j] += brow[j];
            }
        }
    }
    Tensor::new(vec![b, n, fy], out)
}

/// Gradients of baddbmm w.r.t. (bias, x, w).
pub fn baddbmm_backward(
    grad_y: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, n, fx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fy = w.shape()[2];
    let gy = grad_y.data();
    let xd = x.data();
    let wd = w.data();
    let mut gbias = vec![0.0; b * fy];
    let mut gx = vec![0.0; b * n * fx];
    let mut gw = vec![0.0; b * fx * fy];
    for bi in 0..b {
        for i in 0..n {
            for j in 0..fy {
                gbias[bi * fy + j] += gy[(bi * n + i) * fy + j];
            }
        }
        for i in 0..n {
            for p in 0..fx {
                let mut acc = 0.0;
                for j in 0..fy {
                    acc += gy[(bi * n + i) * fy + j] * wd[(bi * fx + p) * fy + j];
                }
                gx[(bi * n + i) * fx + p] = acc;
            }
        }
        // p-i-j order: gw rows and gy rows are both walked stride-1; each
        // gw[p,j] sums over i ascending, matching the naive order bitwise
        for p in 0..fx {
            let grow = &mut gw[(bi * fx + p) * fy..(bi * fx + p + 1) * fy];
            for i in 0..n {
                let a = xd[(bi * n + i) * fx + p];
                let gyrow = &gy[(bi * n + i) * fy..(bi * n + i + 1) * fy];
                for j in 0..fy {
                    grow[j] += a * gyrow[j];
                }
            }
        }
    }
    (
        Tensor::new(vec![b, 1, fy], gbias).unwrap(),
        Tensor::new(vec![b, n, fx], gx).unwrap(),
        Tensor::new(vec![b, fx, fy], gw).unwrap(),
    )
}

/// Fuse B linear layers (weights [Fx,Fy], biases [Fy]) into baddbmm operands:
/// weight [B,Fx,Fy] and bias [B,1,Fy].
pub fn fuse_linear(
    weights: &[Tensor],
    biases: &[Tensor],
) -> Result<(FusedParameter, FusedParameter)> {
    if weights.is_empty() {
        return Err(Error::EmptyFusion("no linear weights".into()));
    }
    if weights.len() != biases.len() {
        return Err(Error::Fusion(format!(
            "{} weights but {} biases",
            weights.len(),
            biases.len()
        )));
    }
    for w in weights {
        if w.shape().len() != 2 {
            return Err(Error::dim(format!("linear weight must be rank 2, got {:?}", w.shape())));
        }
        if w.shape() != weights[0].shape() {
            return Err(Error::Infusible {
                field: "weight shape".into(),
                detail: format!("{:?} vs {:?}", weights[0].shape(), w.shape()),
            });
        }
    }
    let fy = weights[0].shape()[1];
    for bias in biases {
        if bias.shape() != [fy] {
            return Err(Error::Infusible {
                field: "bias shape".into(),
                detail: format!("expected [{fy}], got {:?}", bias.shape()),
            });
        }
    }
    let w = FusedParameter::stack(weights)?;
    let b_col: Vec<Tensor> = biases
        .iter()
        .map(|b| b.reshape(&[1, fy]))
        .collect::<Result<_>>()?;
    let bias = FusedParameter::stack(&b_col)?;
    Ok((w, bias))
}
