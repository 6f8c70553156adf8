//! Loss functions in serial and inter-model fused forms.
//!
//! The fused loss of B models with mean reduction is the mean of the
//! per-model losses; driving backward from that value alone would shrink
//! every model's gradient by 1/B, so the value used for backward is scaled
//! by B. With sum (or no) reduction the per-model gradients are already
//! intact and no scaling is applied. The fused combiner sums per-model loss
//! scalars directly, so each model's backward path is bit-identical to its
//! serial run.

use crate::error::{Error, Result};
use crate::ops::counter;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
    None,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            "none" => Ok(Reduction::None),
            other => Err(Error::config(format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
    Bce,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::config(format!("unknown loss `{other}`"))),
        }
    }
}

fn reduce(per_element: Vec<f64>, reduction: Reduction, shape: &[usize]) -> Tensor {
    match reduction {
        Reduction::Mean => {
            let n = per_element.len() as f64;
            Tensor::scalar(per_element.iter().sum::<f64>() / n)
        }
        Reduction::Sum => Tensor::scalar(per_element.iter().sum()),
        Reduction::None => Tensor::new(shape.to_vec(), per_element).unwrap(),
    }
}

/// Per-element (or per-row for cross-entropy) losses before reduction.
fn per_element(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    match kind {
        LossKind::Mse => {
            if pred.shape() != target.shape() {
                return Err(Error::dim(format!(
                    "mse shapes differ: {:?} vs {:?}",
                    pred.shape(),
                    target.shape()
                )));
            }
            let v = pred
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(&p, &t)| (p - t) * (p - t))
                .collect();
            Ok((v, pred.shape().to_vec()))
        }
        LossKind::Bce => {
            if pred.shape() != target.shape() {
                return Err(Error::dim(format!(
                    "bce shapes differ: {:?} vs {:?}",
                    pred.shape(),
                    target.shape()
                )));
            }
            let v = pred
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(&p, &t)| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .collect();
            Ok((v, pred.shape().to_vec()))
        }
        LossKind::CrossEntropy => {
            if pred.shape().len() != 2 {
                return Err(Error::dim(format!(
                    "cross_entropy expects logits [N, K], got {:?}",
                    pred.shape()
                )));
            }
            let (n, k) = (pred.shape()[0], pred.shape()[1]);
            if target.numel() != n {
                return Err(Error::dim(format!(
                    "cross_entropy expects {n} targets, got {}",
                    target.numel()
                )));
            }
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let row = &pred.data()[i * k..(i + 1) * k];
                let t = target.data()[i];
                if t.fract() != 0.0 || t < 0.0 || t as usize >= k {
                    return Err(Error::Range(format!(
                        "class index {t} out of range for {k} classes"
                    )));
                }
                // log-sum-exp stabilized negative log-likelihood
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
                v.push(lse - row[t as usize]);
            }
            Ok((v, vec![n]))
        }
    }
}

pub fn loss_forward(
    kind: LossKind,
    pred: &Tensor,
    target: &Tensor,
    reduction: Reduction,
) -> Result<Tensor> {
    counter::bump(match kind {
        LossKind::Mse => "mse",
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::Bce => "bce",
    });
    let (v, shape) = per_element(kind, pred, target)?;
    Ok(reduce(v, reduction, &shape))
}

/// Gradient of the reduced loss w.r.t. pred, given the upstream gradient
/// (a scalar for mean/sum, elementwise for none).
pub fn loss_backward(
    kind: LossKind,
    grad_out: &Tensor,
    pred: &Tensor,
    target: &Tensor,
    reduction: Reduction,
) -> Tensor {
    let count = match kind {
        LossKind::CrossEntropy => pred.shape()[0],
        _ => pred.numel(),
    } as f64;
    let upstream = |i: usize| -> f64 {
        match reduction {
            Reduction::Mean => grad_out.data()[0] / count,
            Reduction::Sum => grad_out.data()[0],
            Reduction::None => grad_out.data()[i],
        }
    };
    match kind {
        LossKind::Mse => {
            let mut g = vec![0.0; pred.numel()];
            for (i, gv) in g.iter_mut().enumerate() {
                *gv = upstream(i) * 2.0 * (pred.data()[i] - target.data()[i]);
            }
            Tensor::new(pred.shape().to_vec(), g).unwrap()
        }
        LossKind::Bce => {
            let mut g = vec![0.0; pred.numel()];
            for (i, gv) in g.iter_mut().enumerate() {
                let p = pred.data()[i].clamp(1e-12, 1.0 - 1e-12);
                let t = target.data()[i];
                *gv = upstream(i) * (-(t / p) + (1.0 - t) / (1.0 - p));
            }
            Tensor::new(pred.shape().to_vec(), g).unwrap()
        }
        LossKind::CrossEntropy => {
            let (n, k) = (pred.shape()[0], pred.shape()[1]);
            let mut g = vec![0.0; n * k];
            for i in 0..n {
                let row = &pred.data()[i * k..(i + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                let t = target.data()[i] as usize;
                let up = upstream(i);
                for j in 0..k {
                    let softmax = (row[j] - m).exp() / denom;
                    g[i * k + j] = up * (softmax - if j == t { 1.0 } else { 0.0 });
                }
            }
            Tensor::new(pred.shape().to_vec(), g).unwrap()
        }
    }
}

/// The two scalars of a fused loss: `raw` is the reduced value (mean or sum
/// of per-model losses), `scaled` is the value to drive backward from.
pub struct FusedLossValue {
    pub raw: VarId,
    pub scaled: VarId,
    pub model_count: usize,
    /// Per-model loss scalars, in model order (reporting surface).
    pub per_model: Vec<VarId>,
}

/// Fuse the losses of B models. Each member of `per_model_preds` is model
/// b's prediction handle; the per-model loss is computed exactly as the
/// serial run would, then combined:
/// mean reduction: raw = (1/B) * sum(l_b), scaled = sum(l_b) = B * raw;
/// sum reduction:  raw = scaled = sum(l_b);
/// none:           raw = scaled = per-element losses stacked as [B, ...].
pub fn fused_loss(
    tape: &mut Tape,
    per_model_preds: &[VarId],
    per_model_targets: &[&Tensor],
    kind: LossKind,
    reduction: Reduction,
) -> Result<FusedLossValue> {
    let b = per_model_preds.len();
    if b == 0 {
        return Err(Error::EmptyFusion("fused loss over zero models".into()));
    }
    if per_model_targets.len() != b {
        return Err(Error::dim(format!(
            "{b} predictions but {} targets",
            per_model_targets.len()
        )));
    }
    // reduction=none: per-element losses stacked behind a leading model
    // axis; the caller reduces, and no scaling rule applies
    if reduction == Reduction::None {
        let mut per_model = Vec::with_capacity(b);
        let mut stacked = Vec::with_capacity(b);
        for (pred, target) in per_model_preds.iter().zip(per_model_targets) {
            let l = tape.loss(kind, *pred, target, Reduction::None)?;
            per_model.push(l);
            let mut shape = vec![1];
            shape.extend_from_slice(tape.value(l).shape());
            stacked.push(tape.reshape(l, &shape)?);
        }
        let raw = tape.concat(&stacked, 0)?;
        return Ok(FusedLossValue { raw, scaled: raw, model_count: b, per_model });
    }
    let inner = match reduction {
        Reduction::Mean => Reduction::Mean,
        _ => Reduction::Sum,
    };
    let mut per_model = Vec::with_capacity(b);
    for (pred, target) in per_model_preds.iter().zip(per_model_targets) {
        per_model.push(tape.loss(kind, *pred, target, inner)?);
    }
    let total = tape.sum_vars(&per_model)?;
    let (raw, scaled) = match reduction {
        Reduction::Mean => (tape.scale(total, 1.0 / b as f64), total),
        _ => (total, total),
    };
    Ok(FusedLossValue { raw, scaled, model_count: b, per_model })
}

/// Per-model losses of a model-leading fused prediction [B, N, ...] against
/// per-model targets; convenience over `fused_loss` for the executor.
pub fn fused_loss_model_leading(
    tape: &mut Tape,
    fused_pred: VarId,
    targets: &[Tensor],
    kind: LossKind,
    reduction: Reduction,
) -> Result<FusedLossValue> {
    let b = targets.len();
    let shape = tape.value(fused_pred).shape().to_vec();
    if shape.is_empty() || shape[0] != b {
        return Err(Error::dim(format!(
            "fused prediction {shape:?} does not lead with B={b}"
        )));
    }
    let serial_shape = shape[1..].to_vec();
    let mut preds = Vec::with_capacity(b);
    for bi in 0..b {
        let slice = tape.narrow(fused_pred, 0, bi, 1)?;
        preds.push(tape.reshape(slice, &serial_shape)?);
    }
    let trefs: Vec<&Tensor> = targets.iter().collect();
    fused_loss(tape, &preds, &trefs, kind, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let l = loss_forward(LossKind::Mse, &x, &x, Reduction::Mean).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 10] {
            let pred = Tensor::zeros(&[3, k]);
            let target = Tensor::from_vec(vec![0.0, (k - 1) as f64, (k / 2) as f64]);
            let l = loss_forward(LossKind::CrossEntropy, &pred, &target, Reduction::Mean).unwrap();
            assert!((l.item().unwrap() - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_half_against_one_is_ln_two() {
        let pred = Tensor::from_vec(vec![0.5]);
        let target = Tensor::from_vec(vec![1.0]);
        let l = loss_forward(LossKind::Bce, &pred, &target, Reduction::Mean).unwrap();
        assert!((l.item().unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_class_out_of_range_rejected() {
        let pred = Tensor::zeros(&[1, 3]);
        let target = Tensor::from_vec(vec![3.0]);
        assert!(matches!(
            loss_forward(LossKind::CrossEntropy, &pred, &target, Reduction::Mean),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn fused_mean_single_model_scaled_equals_raw() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let target = Tensor::from_vec(vec![0.0, 0.0]);
        let fl = fused_loss(&mut tape, &[pred], &[&target], LossKind::Mse, Reduction::Mean).unwrap();
        assert_eq!(fl.model_count, 1);
        assert_eq!(
            tape.value(fl.raw).item().unwrap(),
            tape.value(fl.scaled).item().unwrap()
        );
        assert!((tape.value(fl.raw).item().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn fused_mean_of_unit_losses_scales_by_b() {
        // four models each with per-model loss 1.0: raw 1.0, scaled 4.0
        let mut tape = Tape::new();
        let mut preds = Vec::new();
        let target = Tensor::from_vec(vec![0.0]);
        for _ in 0..4 {
            preds.push(tape.leaf(Tensor::from_vec(vec![1.0]), true));
        }
        let targets: Vec<&Tensor> = (0..4).map(|_| &target).collect();
        let fl = fused_loss(&mut tape, &preds, &targets, LossKind::Mse, Reduction::Mean).unwrap();
        assert!((tape.value(fl.raw).item().unwrap() - 1.0).abs() < 1e-15);
        assert!((tape.value(fl.scaled).item().unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn sum_reduction_needs_no_scaling_and_matches_serial_gradients() {
        let mut rng = StreamRng::new(81);
        let b = 3;
        let preds: Vec<Tensor> =
            (0..b).map(|_| Tensor::rand_uniform(&[4], 1.0, &mut rng)).collect();
        let targets: Vec<Tensor> =
            (0..b).map(|_| Tensor::rand_uniform(&[4], 1.0, &mut rng)).collect();

        // serial gradients
        let mut serial_grads = Vec::new();
        for m in 0..b {
            let mut tape = Tape::new();
            let p = tape.leaf(preds[m].clone(), true);
            let l = tape.loss(LossKind::Mse, p, &targets[m], Reduction::Sum).unwrap();
            serial_grads.push(tape.backward(l).unwrap().take(p).unwrap());
        }

        // fused, sum reduction: backward of raw (= scaled) reproduces them
        let mut tape = Tape::new();
        let pvars: Vec<VarId> = preds.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let trefs: Vec<&Tensor> = targets.iter().collect();
        let fl = fused_loss(&mut tape, &pvars, &trefs, LossKind::Mse, Reduction::Sum).unwrap();
        assert_eq!(fl.raw, fl.scaled);
        let grads = tape.backward(fl.scaled).unwrap();
        for m in 0..b {
            let g = grads.get(pvars[m]).unwrap();
            assert!(g.max_abs_diff(&serial_grads[m]) <= 1e-12);
        }
    }

    #[test]
    fn none_reduction_stacks_per_model_losses_unscaled() {
        let mut tape = Tape::new();
        let p0 = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let p1 = tape.leaf(Tensor::from_vec(vec![3.0, 5.0]), true);
        let target = Tensor::from_vec(vec![0.0, 0.0]);
        let fl =
            fused_loss(&mut tape, &[p0, p1], &[&target, &target], LossKind::Mse, Reduction::None)
                .unwrap();
        assert_eq!(fl.raw, fl.scaled);
        let v = tape.value(fl.raw);
        assert_eq!(v.shape(), &[2, 2]);
        assert_eq!(v.data(), &[1.0, 4.0, 9.0, 25.0]);
    }

    #[test]
    fn regularized_losses_follow_the_same_scaling_rule() {
        // l_b = mse_b + lambda * sum(w_b^2): the reconstruction holds for
        // any loss, regularization included
        let mut rng = StreamRng::new(83);
        let b = 3;
        let lambda = 0.05;
        let ws: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[4], 1.0, &mut rng)).collect();
        let target = Tensor::rand_uniform(&[4], 1.0, &mut rng);

        let serial: Vec<Tensor> = (0..b)
            .map(|m| {
                let mut tape = Tape::new();
                let w = tape.leaf(ws[m].clone(), true);
                let data_loss = tape.loss(LossKind::Mse, w, &target, Reduction::Mean).unwrap();
                let sq = tape.mul(w, w).unwrap();
                let sum_sq = tape.sum_all(sq);
                let reg = tape.scale(sum_sq, lambda);
                let total = tape.add(data_loss, reg).unwrap();
                tape.backward(total).unwrap().take(w).unwrap()
            })
            .collect();

        let mut tape = Tape::new();
        let wvars: Vec<VarId> = ws.iter().map(|w| tape.leaf(w.clone(), true)).collect();
        let per_model: Vec<VarId> = wvars
            .iter()
            .map(|&w| {
                let data_loss = tape.loss(LossKind::Mse, w, &target, Reduction::Mean).unwrap();
                let sq = tape.mul(w, w).unwrap();
                let sum_sq = tape.sum_all(sq);
                let reg = tape.scale(sum_sq, lambda);
                tape.add(data_loss, reg).unwrap()
            })
            .collect();
        // mean-reduced fused loss of the regularized per-model losses,
        // scaled by B for backward
        let total = tape.sum_vars(&per_model).unwrap();
        let grads = tape.backward(total).unwrap();
        for m in 0..b {
            let g = grads.get(wvars[m]).unwrap();
            assert!(g.max_abs_diff(&serial[m]) <= 1e-12);
        }
    }

    #[test]
    fn empty_fusion_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            fused_loss(&mut tape, &[], &[], LossKind::Mse, Reduction::Mean),
            Err(Error::EmptyFusion(_))
        ));
    }
}
