//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A tape is created per training step and consumed by `backward`. Nodes
//! hold the forward value, the input handles, and a backward rule that maps
//! the upstream gradient to per-input gradients; topological order is append
//! order, so the backward traversal is a single reverse sweep. First-order
//! gradients only.

use crate::error::{Error, Result};
use crate::losses::{self, LossKind, Reduction};
use crate::ops::conv::{grouped_conv_backward, grouped_conv_forward, ConvConfig};
use crate::ops::embedding::{embedding_backward, embedding_forward_offset, EmbeddingConfig};
use crate::ops::layout::{flatten_fused, layout_adapt, FusedLayout};
use crate::ops::linear::{baddbmm, baddbmm_backward, matmul, matmul_backward};
use crate::ops::norm::{
    batchnorm_backward, batchnorm_forward, layernorm_backward, layernorm_forward,
    BatchNormConfig, BatchNormState, LayerNormConfig,
};
use crate::ops::pool::{fused_pool, pool_backward, PoolKind};
use crate::ops::{counter, Activation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    inputs: Vec<VarId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape handle, produced by `Tape::backward`.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf value. Leaves with `requires_grad` receive gradients
    /// of identical shape after `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(Node { value, requires_grad, is_leaf: true, inputs: vec![], backward: None })
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    fn push(&mut self, node: Node) -> VarId {
        self.nodes.push(node);
        VarId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor,
        inputs: Vec<VarId>,
        backward: BackwardFn,
    ) -> VarId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            inputs,
            backward: requires_grad.then_some(backward),
        })
    }

    // ---- arithmetic ------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        counter::bump("add");
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(|gy| vec![Some(gy.clone()), Some(gy.clone())]),
        ))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.mul(&bv)?;
        counter::bump("mul");
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |gy| {
                vec![Some(gy.mul(&bv).unwrap()), Some(gy.mul(&av).unwrap())]
            }),
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let value = kind.forward(&xv);
        let yv = value.clone();
        self.push_op(
            value,
            vec![x],
            Box::new(move |gy| {
                let mut g = gy.clone();
                for (i, gv) in g.data_mut().iter_mut().enumerate() {
                    *gv *= kind.grad(xv.data()[i], yv.data()[i]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let value = self.value(x).scale(c);
        self.push_op(value, vec![x], Box::new(move |gy| vec![Some(gy.scale(c))]))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(
            value,
            vec![x],
            Box::new(move |gy| {
                let g = gy.data()[0];
                vec![Some(Tensor::full(&shape, g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of scalar variables; the fused-loss combiner.
    pub fn sum_vars(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::EmptyFusion("sum of zero variables".into()));
        }
        for &x in xs {
            if !self.value(x).is_scalar() {
                return Err(Error::Contract("sum_vars expects scalars".into()));
            }
        }
        let total: f64 = xs.iter().map(|&x| self.value(x).data()[0]).sum();
        let n = xs.len();
        Ok(self.push_op(
            Tensor::scalar(total),
            xs.to_vec(),
            Box::new(move |gy| vec![Some(gy.clone()); n]),
        ))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let old_shape = self.value(x).shape().to_vec();
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| vec![Some(gy.reshape(&old_shape).unwrap())]),
        ))
    }

    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let full = self.value(x).shape()[axis];
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| vec![Some(gy.pad_into(axis, start, full).unwrap())]),
        ))
    }

    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> Result<VarId> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let value = Tensor::concat(&tensors, axis)?;
        counter::bump("concat");
        Ok(self.push_op(
            value,
            xs.to_vec(),
            Box::new(move |gy| {
                gy.split(axis, &extents).unwrap().into_iter().map(Some).collect()
            }),
        ))
    }

    pub fn split(&mut self, x: VarId, axis: usize, extents: &[usize]) -> Result<Vec<VarId>> {
        let total: usize = extents.iter().sum();
        if total != self.value(x).shape()[axis] {
            return Err(Error::dim(format!(
                "split extents {extents:?} do not sum to axis extent {}",
                self.value(x).shape()[axis]
            )));
        }
        counter::bump("split");
        let mut out = Vec::with_capacity(extents.len());
        let mut start = 0;
        for &e in extents {
            out.push(self.narrow(x, axis, start, e)?);
            start += e;
        }
        Ok(out)
    }

    pub fn layout_adapt(
        &mut self,
        x: VarId,
        from: FusedLayout,
        to: FusedLayout,
        b: usize,
    ) -> Result<VarId> {
        let value = layout_adapt(self.value(x), from, to, b)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| vec![Some(layout_adapt(gy, to, from, b).unwrap())]),
        ))
    }

    /// Fused flatten: channel_folded [N, B*C, s...] -> model_leading [B, N, C*s].
    pub fn flatten_fused(&mut self, x: VarId, b: usize) -> Result<VarId> {
        let in_shape = self.value(x).shape().to_vec();
        let value = flatten_fused(self.value(x), b)?;
        let serial = FusedLayout::ChannelFolded.serial_shape(&in_shape, b)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| {
                let mut ml_shape = vec![b];
                ml_shape.extend_from_slice(&serial);
                let g = gy.reshape(&ml_shape).unwrap();
                let g = layout_adapt(&g, FusedLayout::ModelLeading, FusedLayout::ChannelFolded, b)
                    .unwrap();
                vec![Some(g)]
            }),
        ))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = matmul(&av, &bv)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |gy| {
                let (ga, gb) = matmul_backward(gy, &av, &bv);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn baddbmm(&mut self, bias: VarId, x: VarId, w: VarId) -> Result<VarId> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let value = baddbmm(self.value(bias), &xv, &wv)?;
        Ok(self.push_op(
            value,
            vec![bias, x, w],
            Box::new(move |gy| {
                let (gbias, gx, gw) = baddbmm_backward(gy, &xv, &wv);
                vec![Some(gbias), Some(gx), Some(gw)]
            }),
        ))
    }

    // ---- neural-net ops ----------------------------------------------------

    pub fn conv(&mut self, x: VarId, w: VarId, b: VarId, cfg: &ConvConfig) -> Result<VarId> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let value = grouped_conv_forward(&xv, &wv, self.value(b), cfg)?;
        let cfg = cfg.clone();
        Ok(self.push_op(
            value,
            vec![x, w, b],
            Box::new(move |gy| {
                let (gx, gw, gb) = grouped_conv_backward(gy, &xv, &wv, &cfg).unwrap();
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// Returns the output handle and, in training mode, the updated running
    /// statistics for the caller to store.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        state: &BatchNormState,
        cfg: &BatchNormConfig,
        training: bool,
    ) -> Result<(VarId, Option<BatchNormState>)> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (value, saved, new_state) =
            batchnorm_forward(&xv, &wv, self.value(b), state, cfg, training)?;
        let id = self.push_op(
            value,
            vec![x, w, b],
            Box::new(move |gy| {
                let (gx, gw, gb) = batchnorm_backward(gy, &xv, &wv, &saved);
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        );
        Ok((id, new_state))
    }

    pub fn layernorm(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        cfg: &LayerNormConfig,
    ) -> Result<VarId> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let b_shape = self.value(b).shape().to_vec();
        let (value, saved) = layernorm_forward(&xv, &wv, self.value(b), cfg)?;
        let cfg = cfg.clone();
        Ok(self.push_op(
            value,
            vec![x, w, b],
            Box::new(move |gy| {
                let (gx, gw, gb) =
                    layernorm_backward(gy, &xv, &wv, &b_shape, &saved, &cfg).unwrap();
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    pub fn embedding(
        &mut self,
        indices: &Tensor,
        table: VarId,
        cfg: &EmbeddingConfig,
        offset: usize,
        serial_rows: usize,
    ) -> Result<VarId> {
        let value = embedding_forward_offset(indices, self.value(table), cfg, offset, serial_rows)?;
        let table_shape = self.value(table).shape().to_vec();
        let idx = indices.clone();
        Ok(self.push_op(
            value,
            vec![table],
            Box::new(move |gy| {
                vec![Some(embedding_backward(gy, &idx, &table_shape, offset))]
            }),
        ))
    }

    pub fn pool(&mut self, kind: &PoolKind, x: VarId) -> Result<VarId> {
        let in_shape = self.value(x).shape().to_vec();
        let (value, saved) = fused_pool(kind, self.value(x))?;
        let kind = kind.clone();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| vec![Some(pool_backward(&kind, gy, &in_shape, &saved))]),
        ))
    }

    /// Training-mode dropout: multiply by a precomputed keep/scale mask.
    pub fn dropout(&mut self, x: VarId, mask: Tensor) -> Result<VarId> {
        counter::bump("dropout");
        let value = self.value(x).mul(&mask)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |gy| vec![Some(gy.mul(&mask).unwrap())]),
        ))
    }

    // ---- losses -------------------------------------------------------------

    pub fn loss(
        &mut self,
        kind: LossKind,
        pred: VarId,
        target: &Tensor,
        reduction: Reduction,
    ) -> Result<VarId> {
        let pv = self.value(pred).clone();
        let value = losses::loss_forward(kind, &pv, target, reduction)?;
        let tv = target.clone();
        Ok(self.push_op(
            value,
            vec![pred],
            Box::new(move |gy| {
                vec![Some(losses::loss_backward(kind, gy, &pv, &tv, reduction))]
            }),
        ))
    }

    /// Fused loss over a fused prediction in one invocation: model b's loss
    /// is computed on its slice exactly as the serial kernel would, and the
    /// returned scalar is the SUM of per-model losses (the backward-driving
    /// value: B x the mean-reduced fused loss). Gradients per slice are
    /// bit-identical to the serial runs.
    pub fn fused_loss_scaled(
        &mut self,
        pred: VarId,
        layout: Option<FusedLayout>,
        b: usize,
        targets: &[Tensor],
        kind: LossKind,
        reduction: Reduction,
    ) -> Result<(VarId, Vec<f64>)> {
        if targets.len() != b {
            return Err(Error::dim(format!("{} targets for B={b}", targets.len())));
        }
        let inner = match reduction {
            Reduction::Mean => Reduction::Mean,
            _ => Reduction::Sum,
        };
        let pv = self.value(pred).clone();
        let slices: Vec<Tensor> = match layout {
            None => vec![pv.clone()],
            Some(l) => (0..b)
                .map(|m| crate::ops::layout::extract_model(&pv, l, b, m))
                .collect::<Result<_>>()?,
        };
        let mut per_model = Vec::with_capacity(b);
        for (slice, target) in slices.iter().zip(targets) {
            per_model.push(losses::loss_forward(kind, slice, target, inner)?.item()?);
        }
        let scaled_val: f64 = per_model.iter().sum();
        let targets = targets.to_vec();
        let out = self.push_op(
            Tensor::scalar(scaled_val),
            vec![pred],
            Box::new(move |gy| {
                let mut g = Tensor::zeros(pv.shape());
                for (m, (slice, target)) in slices.iter().zip(&targets).enumerate() {
                    let gm = losses::loss_backward(kind, gy, slice, target, inner);
                    match layout {
                        None => g = gm,
                        Some(l) => {
                            crate::ops::layout::write_model_block(&mut g, &gm, l, slices.len(), m)
                        }
                    }
                }
                vec![Some(g)]
            }),
        );
        Ok((out, per_model))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; every
    /// requires-grad leaf receives a gradient of its value's shape.
    pub fn backward(self, loss: VarId) -> Result<GradMap> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape("loss handle is not on this tape".into()))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, shape is {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Tape(
                "loss is detached: no differentiable path to any leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(gy) = grads[i].as_ref() else { continue };
            let Some(backward) = node.backward.as_ref() else { continue };
            let input_grads = backward(gy);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[input.0] = Some(g),
                }
            }
        }
        // leaves disconnected from the loss still get a full (zero) gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradMap { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_loss_gives_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn requires_grad_propagates_through_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        assert!(tape.requires_grad(y));
        let z = tape.add(c, c).unwrap();
        assert!(!tape.requires_grad(z));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(5.0));
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn two_disjoint_models_have_independent_gradients() {
        // gradients of model A's params must not depend on model B's data
        let run = |b_data: f64| {
            let mut tape = Tape::new();
            let wa = tape.leaf(Tensor::from_vec(vec![2.0]), true);
            let wb = tape.leaf(Tensor::from_vec(vec![3.0]), true);
            let xa = tape.constant(Tensor::from_vec(vec![5.0]));
            let xb = tape.constant(Tensor::from_vec(vec![b_data]));
            let ya = tape.mul(wa, xa).unwrap();
            let yb = tape.mul(wb, xb).unwrap();
            let la = tape.sum_all(ya);
            let lb = tape.sum_all(yb);
            let total = tape.sum_vars(&[la, lb]).unwrap();
            let grads = tape.backward(total).unwrap();
            (grads.get(wa).unwrap().data()[0], grads.get(wb).unwrap().data()[0])
        };
        let (ga1, gb1) = run(7.0);
        let (ga2, gb2) = run(11.0);
        assert_eq!(ga1, ga2); // model A untouched by model B's data
        assert_eq!(ga1, 5.0);
        assert_eq!(gb1, 7.0);
        assert_eq!(gb2, 11.0);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::from_vec(vec![1.0]), true);
        let unused = tape.leaf(Tensor::from_vec(vec![9.0, 9.0]), true);
        let l = tape.sum_all(used);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn split_concat_identity_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap(), true);
        let parts = tape.split(x, 1, &[1, 2, 1]).unwrap();
        let back = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let s = tape.sum_all(back);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 8]);
    }
}
