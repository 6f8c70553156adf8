//! Graph execution: deterministic parameter initialization and a tape-based
//! forward pass for both serial and fused graphs.
//!
//! Initialization is per-model seeded: fused slice b is drawn from the same
//! stream as serial model b's job, so the fused parameters are bit-identical
//! to the serial ones by construction. Execution maps each node onto tape
//! ops; the fused path issues one kernel invocation per layer regardless of
//! the model count.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::conv::ConvConfig;
use crate::ops::dropout::{dropout_mask_serial, fused_dropout_mask, DropoutKind};
use crate::ops::embedding::EmbeddingConfig;
use crate::ops::layout::FusedLayout;
use crate::ops::norm::{BatchNormConfig, BatchNormState, LayerNormConfig};
use crate::ops::pool::PoolKind;
use crate::ops::{Activation, FusedParameter};
use crate::rng::StreamRng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::{GraphSpec, NodeSpec, OpKind};

/// Trainable tensors and auxiliary state for one node.
#[derive(Clone, Debug, Default)]
pub struct NodeParams {
    pub tensors: BTreeMap<&'static str, FusedParameter>,
    pub bn_state: Option<BatchNormState>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub nodes: BTreeMap<String, NodeParams>,
}

/// `id` -> (base id for seeding, model index override for replicas).
fn seed_identity(id: &str) -> (&str, Option<usize>) {
    match id.rsplit_once('@') {
        Some((base, m)) => match m.parse::<usize>() {
            Ok(m) => (base, Some(m)),
            Err(_) => (id, None),
        },
        None => (id, None),
    }
}

fn init_stream(root: &StreamRng, base_id: &str, model: usize) -> StreamRng {
    root.split("init").split(base_id).split_index(model as u64)
}

/// Serial (per-model) parameters for one node kind, drawn from `rng`.
fn init_serial_node(kind: &OpKind, rng: &mut StreamRng) -> NodeParams {
    let mut p = NodeParams::default();
    match kind {
        OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => {
            let transposed = matches!(kind, OpKind::ConvT2d(_));
            let cfg = c.conv_config(transposed);
            let fan_in = (cfg.weight_shape()[1] * cfg.kernel.iter().product::<usize>()) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let w = Tensor::rand_uniform(&cfg.weight_shape(), bound, rng);
            let bias = Tensor::rand_uniform(&cfg.bias_shape(), bound, rng);
            let per_model = w.shape()[0];
            p.tensors.insert("weight", FusedParameter::new(w, 1, 0, per_model).unwrap());
            p.tensors
                .insert("bias", FusedParameter::new(bias, 1, 0, cfg.out_channels).unwrap());
        }
        OpKind::Linear { in_features, out_features, .. } => {
            let bound = 1.0 / (*in_features as f64).sqrt();
            let w = Tensor::rand_uniform(&[*in_features, *out_features], bound, rng);
            let bias = Tensor::rand_uniform(&[*out_features], bound, rng);
            p.tensors.insert(
                "weight",
                FusedParameter::new(w.reshape(&[1, *in_features, *out_features]).unwrap(), 1, 0, 1)
                    .unwrap(),
            );
            p.tensors.insert(
                "bias",
                FusedParameter::new(bias.reshape(&[1, 1, *out_features]).unwrap(), 1, 0, 1)
                    .unwrap(),
            );
        }
        OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
            let serial_c = c.num_features / c.b.max(1);
            p.tensors.insert(
                "weight",
                FusedParameter::new(Tensor::ones(&[serial_c]), 1, 0, serial_c).unwrap(),
            );
            p.tensors.insert(
                "bias",
                FusedParameter::new(Tensor::zeros(&[serial_c]), 1, 0, serial_c).unwrap(),
            );
            p.bn_state = Some(BatchNormState::new(serial_c));
        }
        OpKind::LayerNorm { normalized_shape, .. } => {
            p.tensors.insert(
                "weight",
                FusedParameter::new(
                    Tensor::ones(normalized_shape),
                    1,
                    0,
                    normalized_shape[0],
                )
                .unwrap(),
            );
            p.tensors.insert(
                "bias",
                FusedParameter::new(
                    Tensor::zeros(normalized_shape),
                    1,
                    0,
                    normalized_shape[0],
                )
                .unwrap(),
            );
        }
        OpKind::Embedding { num_embeddings, embedding_dim, b } => {
            let rows = num_embeddings / (*b).max(1);
            let t = Tensor::rand_normal(&[rows, *embedding_dim], 0.0, 1.0, rng);
            p.tensors.insert("table", FusedParameter::new(t, 1, 0, rows).unwrap());
        }
        _ => {}
    }
    p
}

/// The per-model (serial) view of a possibly-fused node config.
pub fn serial_view(kind: &OpKind) -> OpKind {
    match kind {
        OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => {
            let s = super::ConvNodeCfg {
                in_channels: c.in_channels / c.b,
                out_channels: c.out_channels / c.b,
                kernel: c.kernel.clone(),
                stride: c.stride,
                padding: c.padding,
                groups: c.groups / c.b,
                b: 1,
            };
            match kind {
                OpKind::Conv2d(_) => OpKind::Conv2d(s),
                OpKind::Conv1d(_) => OpKind::Conv1d(s),
                _ => OpKind::ConvT2d(s),
            }
        }
        OpKind::Linear { in_features, out_features, .. } => {
            OpKind::Linear { in_features: *in_features, out_features: *out_features, b: 1 }
        }
        OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
            let s = super::BatchNormNodeCfg {
                num_features: c.num_features / c.b,
                eps: c.eps,
                momentum: c.momentum,
                b: 1,
            };
            if matches!(kind, OpKind::BatchNorm1d(_)) {
                OpKind::BatchNorm1d(s)
            } else {
                OpKind::BatchNorm2d(s)
            }
        }
        OpKind::LayerNorm { normalized_shape, eps, .. } => {
            OpKind::LayerNorm { normalized_shape: normalized_shape.clone(), eps: *eps, b: 1 }
        }
        OpKind::Embedding { num_embeddings, embedding_dim, b } => OpKind::Embedding {
            num_embeddings: num_embeddings / b,
            embedding_dim: *embedding_dim,
            b: 1,
        },
        other => other.clone(),
    }
}

fn node_b(kind: &OpKind) -> usize {
    match kind {
        OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => c.b,
        OpKind::Linear { b, .. }
        | OpKind::LayerNorm { b, .. }
        | OpKind::Embedding { b, .. }
        | OpKind::Flatten { b }
        | OpKind::Dropout { b, .. }
        | OpKind::Dropout2d { b, .. } => *b,
        OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => c.b,
        _ => 1,
    }
}

/// Fuse B per-model NodeParams into the fused node's parameters, following
/// each family's concatenation recipe.
fn fuse_node_params(kind: &OpKind, per_model: Vec<NodeParams>) -> Result<NodeParams> {
    let b = per_model.len();
    let mut out = NodeParams::default();
    match kind {
        OpKind::Conv2d(_) | OpKind::Conv1d(_) | OpKind::ConvT2d(_) => {
            let ws: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["weight"].value.clone()).collect();
            let bs: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["bias"].value.clone()).collect();
            out.tensors.insert("weight", FusedParameter::fuse(&ws, 0)?);
            out.tensors.insert("bias", FusedParameter::fuse(&bs, 0)?);
        }
        OpKind::Linear { .. } => {
            let ws: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["weight"].value.clone()).collect();
            let bs: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["bias"].value.clone()).collect();
            let wrefs: Vec<&Tensor> = ws.iter().collect();
            let brefs: Vec<&Tensor> = bs.iter().collect();
            out.tensors
                .insert("weight", FusedParameter::new(Tensor::concat(&wrefs, 0)?, b, 0, 1)?);
            out.tensors
                .insert("bias", FusedParameter::new(Tensor::concat(&brefs, 0)?, b, 0, 1)?);
        }
        OpKind::BatchNorm1d(_) | OpKind::BatchNorm2d(_) => {
            let ws: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["weight"].value.clone()).collect();
            let bs: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["bias"].value.clone()).collect();
            out.tensors.insert("weight", FusedParameter::fuse(&ws, 0)?);
            out.tensors.insert("bias", FusedParameter::fuse(&bs, 0)?);
            let rms: Vec<&Tensor> =
                per_model.iter().map(|p| &p.bn_state.as_ref().unwrap().running_mean).collect();
            let rvs: Vec<&Tensor> =
                per_model.iter().map(|p| &p.bn_state.as_ref().unwrap().running_var).collect();
            out.bn_state = Some(BatchNormState {
                running_mean: Tensor::concat(&rms, 0)?,
                running_var: Tensor::concat(&rvs, 0)?,
            });
        }
        OpKind::LayerNorm { normalized_shape, .. } => {
            let mut shape = vec![1usize, 1];
            shape.extend_from_slice(normalized_shape);
            let ws: Vec<Tensor> = per_model
                .iter()
                .map(|p| p.tensors["weight"].value.reshape(&shape))
                .collect::<Result<_>>()?;
            let bs: Vec<Tensor> = per_model
                .iter()
                .map(|p| p.tensors["bias"].value.reshape(&shape))
                .collect::<Result<_>>()?;
            let wrefs: Vec<&Tensor> = ws.iter().collect();
            let brefs: Vec<&Tensor> = bs.iter().collect();
            out.tensors
                .insert("weight", FusedParameter::new(Tensor::concat(&wrefs, 0)?, b, 0, 1)?);
            out.tensors
                .insert("bias", FusedParameter::new(Tensor::concat(&brefs, 0)?, b, 0, 1)?);
        }
        OpKind::Embedding { .. } => {
            let ts: Vec<Tensor> =
                per_model.iter().map(|p| p.tensors["table"].value.clone()).collect();
            out.tensors.insert("table", FusedParameter::fuse(&ts, 0)?);
        }
        _ => {}
    }
    Ok(out)
}

impl ParamStore {
    /// Initialize parameters for a graph. Serial graphs draw model
    /// `model_index`'s streams; fused nodes draw per-model streams and
    /// concatenate, so slice b always equals serial model b's init.
    pub fn init(spec: &GraphSpec, root: &StreamRng, model_index: usize) -> Result<Self> {
        Self::init_with(spec, root, model_index, false)
    }

    /// As `init`, but with `uniform` every model slot draws model
    /// `model_index`'s stream: all fused slices start from the same weights
    /// (the hyperparameter-tuning regime, where only the settings differ).
    pub fn init_with(
        spec: &GraphSpec,
        root: &StreamRng,
        model_index: usize,
        uniform: bool,
    ) -> Result<Self> {
        let mut store = ParamStore::default();
        for n in &spec.nodes {
            let b = node_b(&n.kind);
            let (base, replica) = seed_identity(&n.id);
            let params = if b > 1 {
                let serial_kind = serial_view(&n.kind);
                let per_model: Vec<NodeParams> = (0..b)
                    .map(|m| {
                        let slot = if uniform { model_index } else { m };
                        let mut rng = init_stream(root, base, slot);
                        init_serial_node(&serial_kind, &mut rng)
                    })
                    .collect();
                fuse_node_params(&n.kind, per_model)?
            } else {
                let model = if uniform { model_index } else { replica.unwrap_or(model_index) };
                let mut rng = init_stream(root, base, model);
                init_serial_node(&n.kind, &mut rng)
            };
            if !params.tensors.is_empty() || params.bn_state.is_some() {
                store.nodes.insert(n.id.clone(), params);
            }
        }
        Ok(store)
    }

    pub fn trainable_count(&self) -> usize {
        self.nodes.values().map(|n| n.tensors.values().map(|p| p.value.numel()).sum::<usize>()).sum()
    }

    fn get(&self, node: &str, name: &str) -> Result<&FusedParameter> {
        self.nodes
            .get(node)
            .and_then(|n| n.tensors.get(name))
            .ok_or_else(|| Error::State(format!("missing parameter `{name}` for node `{node}`")))
    }
}

/// Input feed for one graph input: one shared batch for all models, or one
/// batch per model.
#[derive(Clone, Debug)]
pub enum JobInput {
    Shared(Tensor),
    PerModel(Vec<Tensor>),
}

#[derive(Clone, Copy, Debug)]
#[derive(Default)]
pub struct ExecOptions {
    pub training: bool,
    pub step: u64,
    /// The model identity of a serial job (stream selection); fused nodes
    /// use their own per-model indices.
    pub model_index: usize,
}


/// A trainable parameter bound to its tape handle for this step.
pub struct ParamBinding {
    pub node: String,
    pub name: &'static str,
    pub var: VarId,
}

pub struct Execution {
    pub tape: Tape,
    pub outputs: Vec<VarId>,
    pub bindings: Vec<ParamBinding>,
}

enum NodeValue {
    One(VarId),
    Many(Vec<VarId>),
}

fn dropout_stream(root: &StreamRng, base: &str, model: usize, step: u64) -> StreamRng {
    root.split("dropout").split(base).split_index(model as u64).split_index(step)
}

fn stack_on_tape(tape: &mut Tape, vars: &[VarId], layout: FusedLayout) -> Result<VarId> {
    let serial = tape.value(vars[0]).shape().to_vec();
    match layout {
        FusedLayout::ChannelFolded => tape.concat(vars, 1),
        FusedLayout::ModelLeading => {
            let mut shape = vec![1];
            shape.extend_from_slice(&serial);
            let reshaped: Vec<VarId> = vars
                .iter()
                .map(|&v| tape.reshape(v, &shape))
                .collect::<Result<_>>()?;
            tape.concat(&reshaped, 0)
        }
        FusedLayout::ModelMid => {
            let mut shape = vec![serial[0], 1];
            shape.extend_from_slice(&serial[1..]);
            let reshaped: Vec<VarId> = vars
                .iter()
                .map(|&v| tape.reshape(v, &shape))
                .collect::<Result<_>>()?;
            tape.concat(&reshaped, 1)
        }
    }
}

fn extract_on_tape(
    tape: &mut Tape,
    fused: VarId,
    layout: FusedLayout,
    b: usize,
    index: usize,
) -> Result<VarId> {
    let serial = layout.serial_shape(tape.value(fused).shape(), b)?;
    match layout {
        FusedLayout::ChannelFolded => tape.narrow(fused, 1, index * serial[1], serial[1]),
        FusedLayout::ModelLeading => {
            let s = tape.narrow(fused, 0, index, 1)?;
            tape.reshape(s, &serial)
        }
        FusedLayout::ModelMid => {
            let s = tape.narrow(fused, 1, index, 1)?;
            tape.reshape(s, &serial)
        }
    }
}

/// Run one forward pass of `spec`, building the tape. Batch-norm running
/// statistics in `store` are updated in place when training.
pub fn execute(
    spec: &GraphSpec,
    store: &mut ParamStore,
    inputs: &BTreeMap<String, JobInput>,
    root: &StreamRng,
    opts: ExecOptions,
) -> Result<Execution> {
    let order = spec.topo_order()?;
    let mut tape = Tape::new();
    let mut values: BTreeMap<&str, NodeValue> = BTreeMap::new();
    let mut bindings = Vec::new();

    let bind =
        |tape: &mut Tape, bindings: &mut Vec<ParamBinding>, store: &ParamStore, node: &str, name: &'static str| -> Result<VarId> {
            let p = store.get(node, name)?;
            let var = tape.leaf(p.value.clone(), true);
            bindings.push(ParamBinding { node: node.to_string(), name, var });
            Ok(var)
        };

    for i in order {
        let n: &NodeSpec = &spec.nodes[i];
        let single_input = |values: &BTreeMap<&str, NodeValue>| -> Result<VarId> {
            match values.get(n.inputs[0].as_str()) {
                Some(NodeValue::One(v)) => Ok(*v),
                Some(NodeValue::Many(_)) => Err(Error::Contract(format!(
                    "node `{}` expects a single tensor input",
                    n.id
                ))),
                None => Err(Error::Validation(format!(
                    "node `{}`: input `{}` not evaluated",
                    n.id, n.inputs[0]
                ))),
            }
        };
        let value = match &n.kind {
            OpKind::Input { shape } => match inputs.get(&n.id) {
                Some(JobInput::Shared(t)) => {
                    if t.shape() != shape.as_slice() {
                        return Err(Error::dim(format!(
                            "input `{}` expects shape {shape:?}, got {:?}",
                            n.id,
                            t.shape()
                        )));
                    }
                    NodeValue::One(tape.constant(t.clone()))
                }
                Some(JobInput::PerModel(ts)) => NodeValue::Many(
                    ts.iter().map(|t| tape.constant(t.clone())).collect(),
                ),
                None => {
                    return Err(Error::Contract(format!("no feed for input `{}`", n.id)))
                }
            },
            OpKind::Replicate { b, layout } => {
                let vars: Vec<VarId> = match values.get(n.inputs[0].as_str()) {
                    Some(NodeValue::One(v)) => vec![*v; *b],
                    Some(NodeValue::Many(vs)) => {
                        if vs.len() != *b {
                            return Err(Error::dim(format!(
                                "node `{}`: {} per-model inputs for B={b}",
                                n.id,
                                vs.len()
                            )));
                        }
                        vs.clone()
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "node `{}`: input not evaluated",
                            n.id
                        )))
                    }
                };
                NodeValue::One(stack_on_tape(&mut tape, &vars, *layout)?)
            }
            OpKind::Split { layout, b, index } => {
                let x = single_input(&values)?;
                NodeValue::One(extract_on_tape(&mut tape, x, *layout, *b, *index)?)
            }
            OpKind::Concat { layout } => {
                let vars: Vec<VarId> = n
                    .inputs
                    .iter()
                    .map(|i| match values.get(i.as_str()) {
                        Some(NodeValue::One(v)) => Ok(*v),
                        _ => Err(Error::Validation(format!(
                            "node `{}`: input `{i}` not a single tensor",
                            n.id
                        ))),
                    })
                    .collect::<Result<_>>()?;
                NodeValue::One(stack_on_tape(&mut tape, &vars, *layout)?)
            }
            OpKind::LayoutAdapt { from, to, b } => {
                let x = single_input(&values)?;
                NodeValue::One(tape.layout_adapt(x, *from, *to, *b)?)
            }
            OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => {
                let x = single_input(&values)?;
                let transposed = matches!(n.kind, OpKind::ConvT2d(_));
                let cfg: ConvConfig = c.conv_config(transposed);
                let w = bind(&mut tape, &mut bindings, store, &n.id, "weight")?;
                let bvar = bind(&mut tape, &mut bindings, store, &n.id, "bias")?;
                NodeValue::One(tape.conv(x, w, bvar, &cfg)?)
            }
            OpKind::Linear { in_features, out_features, b } => {
                let x = single_input(&values)?;
                let w = bind(&mut tape, &mut bindings, store, &n.id, "weight")?;
                let bias = bind(&mut tape, &mut bindings, store, &n.id, "bias")?;
                if *b == 1 {
                    let rows = tape.value(x).shape()[0];
                    let x3 = tape.reshape(x, &[1, rows, *in_features])?;
                    let y = tape.baddbmm(bias, x3, w)?;
                    NodeValue::One(tape.reshape(y, &[rows, *out_features])?)
                } else {
                    NodeValue::One(tape.baddbmm(bias, x, w)?)
                }
            }
            OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
                let x = single_input(&values)?;
                let cfg = BatchNormConfig {
                    num_features: c.num_features,
                    eps: c.eps,
                    momentum: c.momentum,
                };
                let w = bind(&mut tape, &mut bindings, store, &n.id, "weight")?;
                let bvar = bind(&mut tape, &mut bindings, store, &n.id, "bias")?;
                let state = store
                    .nodes
                    .get(&n.id)
                    .and_then(|p| p.bn_state.clone())
                    .ok_or_else(|| {
                        Error::State(format!("missing batchnorm state for `{}`", n.id))
                    })?;
                let (y, new_state) =
                    tape.batchnorm(x, w, bvar, &state, &cfg, opts.training)?;
                if let Some(s) = new_state {
                    store.nodes.get_mut(&n.id).unwrap().bn_state = Some(s);
                }
                NodeValue::One(y)
            }
            OpKind::LayerNorm { normalized_shape, eps, .. } => {
                let x = single_input(&values)?;
                let cfg = LayerNormConfig {
                    normalized_shape: normalized_shape.clone(),
                    eps: *eps,
                };
                let w = bind(&mut tape, &mut bindings, store, &n.id, "weight")?;
                let bvar = bind(&mut tape, &mut bindings, store, &n.id, "bias")?;
                NodeValue::One(tape.layernorm(x, w, bvar, &cfg)?)
            }
            OpKind::Embedding { num_embeddings, embedding_dim, b } => {
                let x = single_input(&values)?;
                let indices = tape.value(x).clone();
                let table = bind(&mut tape, &mut bindings, store, &n.id, "table")?;
                let cfg = EmbeddingConfig {
                    num_embeddings: *num_embeddings,
                    embedding_dim: *embedding_dim,
                };
                if *b == 1 {
                    NodeValue::One(tape.embedding(&indices, table, &cfg, 0, *num_embeddings)?)
                } else {
                    // validate against the serial range, then offset model
                    // slice m by m * serial_rows into the stacked table
                    let serial_rows = num_embeddings / b;
                    let per_model = indices.numel() / b;
                    let mut shifted = indices.clone();
                    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
                        if v.fract() != 0.0 || *v < 0.0 || *v >= serial_rows as f64 {
                            return Err(Error::Range(format!(
                                "embedding index {v} out of range 0..{serial_rows}"
                            )));
                        }
                        *v += (i / per_model * serial_rows) as f64;
                    }
                    NodeValue::One(tape.embedding(
                        &shifted,
                        table,
                        &cfg,
                        0,
                        *num_embeddings,
                    )?)
                }
            }
            OpKind::MaxPool2d { kernel, stride, padding } => {
                let x = single_input(&values)?;
                let kind =
                    PoolKind::Max2d { kernel: *kernel, stride: *stride, padding: *padding };
                NodeValue::One(tape.pool(&kind, x)?)
            }
            OpKind::AdaptiveAvgPool2d { output_size } => {
                let x = single_input(&values)?;
                let kind =
                    PoolKind::AdaptiveAvg2d { output: (output_size[0], output_size[1]) };
                NodeValue::One(tape.pool(&kind, x)?)
            }
            OpKind::Dropout { p, b, layout } => {
                let x = single_input(&values)?;
                if !opts.training || *p == 0.0 {
                    crate::ops::dropout::validate_p(*p)?;
                    NodeValue::One(x)
                } else {
                    let (base, replica) = seed_identity(&n.id);
                    let shape = tape.value(x).shape().to_vec();
                    let mask = if *b == 1 {
                        let model = replica.unwrap_or(opts.model_index);
                        let mut rng = dropout_stream(root, base, model, opts.step);
                        dropout_mask_serial(DropoutKind::Plain, &shape, *p, &mut rng)?
                    } else {
                        fused_dropout_mask(DropoutKind::Plain, &shape, *layout, *b, *p, |m| {
                            dropout_stream(root, base, m, opts.step)
                        })?
                    };
                    NodeValue::One(tape.dropout(x, mask)?)
                }
            }
            OpKind::Dropout2d { p, b } => {
                let x = single_input(&values)?;
                if !opts.training || *p == 0.0 {
                    crate::ops::dropout::validate_p(*p)?;
                    NodeValue::One(x)
                } else {
                    let (base, replica) = seed_identity(&n.id);
                    let shape = tape.value(x).shape().to_vec();
                    let mask = if *b == 1 {
                        let model = replica.unwrap_or(opts.model_index);
                        let mut rng = dropout_stream(root, base, model, opts.step);
                        dropout_mask_serial(DropoutKind::Channel2d, &shape, *p, &mut rng)?
                    } else {
                        fused_dropout_mask(
                            DropoutKind::Channel2d,
                            &shape,
                            FusedLayout::ChannelFolded,
                            *b,
                            *p,
                            |m| dropout_stream(root, base, m, opts.step),
                        )?
                    };
                    NodeValue::One(tape.dropout(x, mask)?)
                }
            }
            OpKind::Relu => NodeValue::One({
                let x = single_input(&values)?;
                tape.activation(Activation::Relu, x)
            }),
            OpKind::Relu6 => NodeValue::One({
                let x = single_input(&values)?;
                tape.activation(Activation::Relu6, x)
            }),
            OpKind::LeakyRelu { negative_slope } => NodeValue::One({
                let x = single_input(&values)?;
                tape.activation(Activation::LeakyRelu(*negative_slope), x)
            }),
            OpKind::Tanh => NodeValue::One({
                let x = single_input(&values)?;
                tape.activation(Activation::Tanh, x)
            }),
            OpKind::Flatten { b } => {
                let x = single_input(&values)?;
                if *b == 1 {
                    let shape = tape.value(x).shape().to_vec();
                    let feat: usize = shape[1..].iter().product();
                    NodeValue::One(tape.reshape(x, &[shape[0], feat])?)
                } else {
                    NodeValue::One(tape.flatten_fused(x, *b)?)
                }
            }
        };
        values.insert(n.id.as_str(), value);
    }

    let mut outputs = Vec::new();
    for o in &spec.outputs {
        match values.get(o.as_str()) {
            Some(NodeValue::One(v)) => outputs.push(*v),
            Some(NodeValue::Many(vs)) => outputs.extend(vs.iter().copied()),
            None => return Err(Error::Validation(format!("output `{o}` not evaluated"))),
        }
    }
    Ok(Execution { tape, outputs, bindings })
}

/// Collect the fused parameters referenced by `bindings`, in binding order,
/// for handing to an optimizer.
pub fn collect_params(store: &ParamStore, bindings: &[ParamBinding]) -> Vec<FusedParameter> {
    bindings
        .iter()
        .map(|b| store.nodes[&b.node].tensors[b.name].clone())
        .collect()
}

/// Write optimizer-updated parameters back into the store.
pub fn write_back_params(
    store: &mut ParamStore,
    bindings: &[ParamBinding],
    params: Vec<FusedParameter>,
) {
    for (b, p) in bindings.iter().zip(params) {
        store.nodes.get_mut(&b.node).unwrap().tensors.insert(b.name, p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::load_graph;

    fn tiny_graph() -> GraphSpec {
        load_graph(
            br#"{
            "name": "tiny", "inputs": ["x"], "outputs": ["act"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [2, 3]}, "inputs": []},
                {"id": "fc", "kind": "Linear", "config": {"in_features": 3, "out_features": 4}, "inputs": ["x"]},
                {"id": "act", "kind": "ReLU", "config": {}, "inputs": ["fc"]}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_model() {
        let g = tiny_graph();
        let root = StreamRng::new(9);
        let a = ParamStore::init(&g, &root, 0).unwrap();
        let b = ParamStore::init(&g, &root, 0).unwrap();
        assert_eq!(
            a.nodes["fc"].tensors["weight"].value,
            b.nodes["fc"].tensors["weight"].value
        );
        let c = ParamStore::init(&g, &root, 1).unwrap();
        assert!(
            a.nodes["fc"].tensors["weight"]
                .value
                .max_abs_diff(&c.nodes["fc"].tensors["weight"].value)
                > 0.0
        );
    }

    #[test]
    fn fused_params_conserve_count_and_reproduce_serial_shapes() {
        // no parameter is duplicated or lost by fusion, and slicing the
        // fused store reproduces each input graph's parameter shapes
        for name in crate::zoo::ALL {
            let entry = crate::zoo::by_name(name).unwrap();
            let b = 3;
            let specs = vec![entry.spec.clone(); b];
            let fused = crate::planner::fuse::fuse_graphs(
                &specs,
                &crate::planner::fuse::FusePlan::fuse_all(),
            )
            .unwrap();
            let root = StreamRng::new(1);
            let fused_store = ParamStore::init(&fused, &root, 0).unwrap();
            let serial_store = ParamStore::init(&entry.spec, &root, 0).unwrap();
            assert_eq!(
                fused_store.trainable_count(),
                b * serial_store.trainable_count(),
                "{name}: fused parameter count != sum of serial counts"
            );
            for (node, params) in &serial_store.nodes {
                for (pname, serial_p) in &params.tensors {
                    let fused_p = &fused_store.nodes[node].tensors[pname];
                    assert_eq!(fused_p.model_count, b);
                    for m in 0..b {
                        assert_eq!(
                            fused_p.slice(m).unwrap().shape(),
                            serial_p.slice(0).unwrap().shape(),
                            "{name}:{node}.{pname} slice {m}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn per_model_batches_feed_each_slice() {
        // the shared-batch default replicates one input; the per-model
        // option feeds every slice its own batch
        let g = tiny_graph();
        let specs = vec![g.clone(), g.clone()];
        let fused =
            crate::planner::fuse::fuse_graphs(&specs, &crate::planner::fuse::FusePlan::fuse_all())
                .unwrap();
        let root = StreamRng::new(12);
        let mut store = ParamStore::init(&fused, &root, 0).unwrap();
        let mut rng = StreamRng::new(13);
        let xs: Vec<Tensor> =
            (0..2).map(|_| Tensor::rand_uniform(&[2, 3], 1.0, &mut rng)).collect();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), JobInput::PerModel(xs.clone()));
        let exec = execute(&fused, &mut store, &inputs, &root, ExecOptions::default()).unwrap();
        let out = exec.tape.value(exec.outputs[0]);
        for m in 0..2 {
            // serial model m on its own batch
            let mut sstore = ParamStore::init(&g, &root, m).unwrap();
            let mut sinputs = BTreeMap::new();
            sinputs.insert("x".to_string(), JobInput::Shared(xs[m].clone()));
            let sexec =
                execute(&g, &mut sstore, &sinputs, &root, ExecOptions::default()).unwrap();
            let slice = out.narrow(0, m, 1).unwrap().reshape(&[2, 4]).unwrap();
            assert!(slice.max_abs_diff(sexec.tape.value(sexec.outputs[0])) == 0.0);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let g = load_graph(
            br#"{
            "name": "drop", "inputs": ["x"], "outputs": ["d"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [3, 4]}, "inputs": []},
                {"id": "d", "kind": "Dropout", "config": {"p": 0.7}, "inputs": ["x"]}
            ]}"#,
        )
        .unwrap();
        let root = StreamRng::new(2);
        let mut store = ParamStore::init(&g, &root, 0).unwrap();
        let x = Tensor::rand_uniform(&[3, 4], 1.0, &mut StreamRng::new(3));
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), JobInput::Shared(x.clone()));
        let eval = execute(&g, &mut store, &inputs, &root, ExecOptions::default()).unwrap();
        assert_eq!(eval.tape.value(eval.outputs[0]), &x);
        let train = execute(
            &g,
            &mut store,
            &inputs,
            &root,
            ExecOptions { training: true, step: 0, model_index: 0 },
        )
        .unwrap();
        assert!(train.tape.value(train.outputs[0]).max_abs_diff(&x) > 0.0);
    }

    #[test]
    fn forward_runs_and_binds_params() {
        let g = tiny_graph();
        let root = StreamRng::new(10);
        let mut store = ParamStore::init(&g, &root, 0).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), JobInput::Shared(Tensor::ones(&[2, 3])));
        let exec = execute(&g, &mut store, &inputs, &root, ExecOptions::default()).unwrap();
        assert_eq!(exec.outputs.len(), 1);
        assert_eq!(exec.tape.value(exec.outputs[0]).shape(), &[2, 4]);
        assert_eq!(exec.bindings.len(), 2);
    }
}
