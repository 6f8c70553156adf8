//! Graph-level model descriptions and the horizontal-fusion rewriter.
//!
//! A `GraphSpec` is an ordered DAG of operator nodes with configurations;
//! it exists in serial form (one model) and fused form (B models). The
//! planner validates that B serial graphs are fusible, then rewrites them
//! into one fused graph, inserting layout adapters at family boundaries and
//! replicating blocks excluded from fusion.

pub mod exec;
pub mod fuse;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::ConvConfig;
use crate::ops::layout::FusedLayout;
use crate::ops::pool::{pool_output_shape, PoolKind};

/// Operator kinds with their configurations. Serial graphs leave `b` at 1;
/// the planner sets `b` on fused nodes and rewrites channel extents per the
/// fusion rules (conv and batch-norm configs carry fused totals, linear and
/// layer-norm configs stay per-model with an explicit model axis).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input { shape: Vec<usize> },
    Conv2d(ConvNodeCfg),
    Conv1d(ConvNodeCfg),
    ConvT2d(ConvNodeCfg),
    Linear { in_features: usize, out_features: usize, b: usize },
    BatchNorm1d(BatchNormNodeCfg),
    BatchNorm2d(BatchNormNodeCfg),
    LayerNorm { normalized_shape: Vec<usize>, eps: f64, b: usize },
    Embedding { num_embeddings: usize, embedding_dim: usize, b: usize },
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    AdaptiveAvgPool2d { output_size: [usize; 2] },
    Dropout { p: f64, b: usize, layout: FusedLayout },
    Dropout2d { p: f64, b: usize },
    Relu,
    Relu6,
    LeakyRelu { negative_slope: f64 },
    Tanh,
    Flatten { b: usize },
    // plumbing emitted by the planner for fused graphs
    Replicate { b: usize, layout: FusedLayout },
    LayoutAdapt { from: FusedLayout, to: FusedLayout, b: usize },
    Split { layout: FusedLayout, b: usize, index: usize },
    Concat { layout: FusedLayout },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNodeCfg {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub b: usize,
}

impl ConvNodeCfg {
    pub fn conv_config(&self, transposed: bool) -> ConvConfig {
        ConvConfig {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel.clone(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            transposed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormNodeCfg {
    pub num_features: usize,
    pub eps: f64,
    pub momentum: f64,
    pub b: usize,
}

impl OpKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "Input",
            OpKind::Conv2d(_) => "Conv2d",
            OpKind::Conv1d(_) => "Conv1d",
            OpKind::ConvT2d(_) => "ConvT2d",
            OpKind::Linear { .. } => "Linear",
            OpKind::BatchNorm1d(_) => "BatchNorm1d",
            OpKind::BatchNorm2d(_) => "BatchNorm2d",
            OpKind::LayerNorm { .. } => "LayerNorm",
            OpKind::Embedding { .. } => "Embedding",
            OpKind::MaxPool2d { .. } => "MaxPool2d",
            OpKind::AdaptiveAvgPool2d { .. } => "AdaptiveAvgPool2d",
            OpKind::Dropout { .. } => "Dropout",
            OpKind::Dropout2d { .. } => "Dropout2d",
            OpKind::Relu => "ReLU",
            OpKind::Relu6 => "ReLU6",
            OpKind::LeakyRelu { .. } => "LeakyReLU",
            OpKind::Tanh => "Tanh",
            OpKind::Flatten { .. } => "Flatten",
            OpKind::Replicate { .. } => "Replicate",
            OpKind::LayoutAdapt { .. } => "LayoutAdapt",
            OpKind::Split { .. } => "Split",
            OpKind::Concat { .. } => "Concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub name: String,
    pub nodes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub blocks: Vec<BlockSpec>,
    pub nodes: Vec<NodeSpec>,
}

// ---- JSON schema ------------------------------------------------------------
// Top level: {"name", "inputs", "outputs", "blocks", "nodes":
//   [{"id", "kind", "config": {...}, "inputs": [ids]}]}; unknown keys rejected.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    name: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<BlockSpec>,
    nodes: Vec<RawNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    kind: String,
    #[serde(default = "empty_config")]
    config: serde_json::Value,
    #[serde(default)]
    inputs: Vec<String>,
}

fn empty_config() -> serde_json::Value {
    serde_json::Value::Object(serde_json::Map::new())
}

const fn one() -> usize {
    1
}

fn is_one(b: &usize) -> bool {
    *b == 1
}

fn default_layout() -> String {
    "model_leading".into()
}

fn is_default_layout(s: &str) -> bool {
    s == "model_leading"
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvJson {
    in_channels: usize,
    out_channels: usize,
    kernel: Vec<usize>,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    #[serde(default = "one")]
    groups: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearJson {
    in_features: usize,
    out_features: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchNormJson {
    num_features: usize,
    #[serde(default = "default_bn_eps")]
    eps: f64,
    #[serde(default = "default_bn_momentum")]
    momentum: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerNormJson {
    normalized_shape: Vec<usize>,
    #[serde(default = "default_bn_eps")]
    eps: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingJson {
    num_embeddings: usize,
    embedding_dim: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaxPoolJson {
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptivePoolJson {
    output_size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DropoutJson {
    p: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
    #[serde(default = "default_layout", skip_serializing_if = "is_default_layout")]
    layout: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dropout2dJson {
    p: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeakyJson {
    #[serde(default = "default_slope")]
    negative_slope: f64,
}

fn default_slope() -> f64 {
    0.01
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlattenJson {
    #[serde(default = "one", skip_serializing_if = "is_one")]
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplicateJson {
    b: usize,
    layout: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutAdaptJson {
    from: String,
    to: String,
    b: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitJson {
    layout: String,
    b: usize,
    index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConcatJson {
    layout: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputJson {
    shape: Vec<usize>,
}

fn schema_err(node: &str, e: impl std::fmt::Display) -> Error {
    Error::Schema { node: node.into(), detail: e.to_string() }
}

fn parse_kind(node: &RawNode) -> Result<OpKind> {
    let id = node.id.as_str();
    let cfg = node.config.clone();
    let from_value = |v: serde_json::Value| -> serde_json::Value { v };
    let kind = match node.kind.as_str() {
        "Input" => {
            let c: InputJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Input { shape: c.shape }
        }
        "Conv2d" | "Conv1d" | "ConvT2d" => {
            let c: ConvJson =
                serde_json::from_value(from_value(cfg)).map_err(|e| schema_err(id, e))?;
            let cc = ConvNodeCfg {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                groups: c.groups,
                b: c.b,
            };
            match node.kind.as_str() {
                "Conv2d" => OpKind::Conv2d(cc),
                "Conv1d" => OpKind::Conv1d(cc),
                _ => OpKind::ConvT2d(cc),
            }
        }
        "Linear" => {
            let c: LinearJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Linear { in_features: c.in_features, out_features: c.out_features, b: c.b }
        }
        "BatchNorm1d" | "BatchNorm2d" => {
            let c: BatchNormJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            let bc = BatchNormNodeCfg {
                num_features: c.num_features,
                eps: c.eps,
                momentum: c.momentum,
                b: c.b,
            };
            if node.kind == "BatchNorm1d" {
                OpKind::BatchNorm1d(bc)
            } else {
                OpKind::BatchNorm2d(bc)
            }
        }
        "LayerNorm" => {
            let c: LayerNormJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::LayerNorm { normalized_shape: c.normalized_shape, eps: c.eps, b: c.b }
        }
        "Embedding" => {
            let c: EmbeddingJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Embedding {
                num_embeddings: c.num_embeddings,
                embedding_dim: c.embedding_dim,
                b: c.b,
            }
        }
        "MaxPool2d" => {
            let c: MaxPoolJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::MaxPool2d { kernel: c.kernel, stride: c.stride, padding: c.padding }
        }
        "AdaptiveAvgPool2d" => {
            let c: AdaptivePoolJson =
                serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::AdaptiveAvgPool2d { output_size: c.output_size }
        }
        "Dropout" => {
            let c: DropoutJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Dropout {
                p: c.p,
                b: c.b,
                layout: FusedLayout::parse(&c.layout).map_err(|e| schema_err(id, e))?,
            }
        }
        "Dropout2d" => {
            let c: Dropout2dJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Dropout2d { p: c.p, b: c.b }
        }
        "ReLU" => OpKind::Relu,
        "ReLU6" => OpKind::Relu6,
        "LeakyReLU" => {
            let c: LeakyJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::LeakyRelu { negative_slope: c.negative_slope }
        }
        "Tanh" => OpKind::Tanh,
        "Flatten" => {
            let c: FlattenJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Flatten { b: c.b }
        }
        "Replicate" => {
            let c: ReplicateJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Replicate {
                b: c.b,
                layout: FusedLayout::parse(&c.layout).map_err(|e| schema_err(id, e))?,
            }
        }
        "LayoutAdapt" => {
            let c: LayoutAdaptJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::LayoutAdapt {
                from: FusedLayout::parse(&c.from).map_err(|e| schema_err(id, e))?,
                to: FusedLayout::parse(&c.to).map_err(|e| schema_err(id, e))?,
                b: c.b,
            }
        }
        "Split" => {
            let c: SplitJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Split {
                layout: FusedLayout::parse(&c.layout).map_err(|e| schema_err(id, e))?,
                b: c.b,
                index: c.index,
            }
        }
        "Concat" => {
            let c: ConcatJson = serde_json::from_value(cfg).map_err(|e| schema_err(id, e))?;
            OpKind::Concat { layout: FusedLayout::parse(&c.layout).map_err(|e| schema_err(id, e))? }
        }
        other => {
            return Err(Error::Schema {
                node: id.into(),
                detail: format!("unknown op kind `{other}`"),
            })
        }
    };
    Ok(kind)
}

pub fn config_to_json(kind: &OpKind) -> serde_json::Value {
    let v = |r: serde_json::Result<serde_json::Value>| r.expect("config serializes");
    match kind {
        OpKind::Input { shape } => v(serde_json::to_value(InputJson { shape: shape.clone() })),
        OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => {
            v(serde_json::to_value(ConvJson {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel.clone(),
                stride: c.stride,
                padding: c.padding,
                groups: c.groups,
                b: c.b,
            }))
        }
        OpKind::Linear { in_features, out_features, b } => v(serde_json::to_value(LinearJson {
            in_features: *in_features,
            out_features: *out_features,
            b: *b,
        })),
        OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
            v(serde_json::to_value(BatchNormJson {
                num_features: c.num_features,
                eps: c.eps,
                momentum: c.momentum,
                b: c.b,
            }))
        }
        OpKind::LayerNorm { normalized_shape, eps, b } => {
            v(serde_json::to_value(LayerNormJson {
                normalized_shape: normalized_shape.clone(),
                eps: *eps,
                b: *b,
            }))
        }
        OpKind::Embedding { num_embeddings, embedding_dim, b } => {
            v(serde_json::to_value(EmbeddingJson {
                num_embeddings: *num_embeddings,
                embedding_dim: *embedding_dim,
                b: *b,
            }))
        }
        OpKind::MaxPool2d { kernel, stride, padding } => v(serde_json::to_value(MaxPoolJson {
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
        })),
        OpKind::AdaptiveAvgPool2d { output_size } => {
            v(serde_json::to_value(AdaptivePoolJson { output_size: *output_size }))
        }
        OpKind::Dropout { p, b, layout } => v(serde_json::to_value(DropoutJson {
            p: *p,
            b: *b,
            layout: layout.name().into(),
        })),
        OpKind::Dropout2d { p, b } => v(serde_json::to_value(Dropout2dJson { p: *p, b: *b })),
        OpKind::Relu | OpKind::Relu6 | OpKind::Tanh => empty_config(),
        OpKind::LeakyRelu { negative_slope } => {
            v(serde_json::to_value(LeakyJson { negative_slope: *negative_slope }))
        }
        OpKind::Flatten { b } => v(serde_json::to_value(FlattenJson { b: *b })),
        OpKind::Replicate { b, layout } => v(serde_json::to_value(ReplicateJson {
            b: *b,
            layout: layout.name().into(),
        })),
        OpKind::LayoutAdapt { from, to, b } => v(serde_json::to_value(LayoutAdaptJson {
            from: from.name().into(),
            to: to.name().into(),
            b: *b,
        })),
        OpKind::Split { layout, b, index } => v(serde_json::to_value(SplitJson {
            layout: layout.name().into(),
            b: *b,
            index: *index,
        })),
        OpKind::Concat { layout } => {
            v(serde_json::to_value(ConcatJson { layout: layout.name().into() }))
        }
    }
}

/// Parse a graph document; validates structure and shape inference.
pub fn load_graph(bytes: &[u8]) -> Result<GraphSpec> {
    let raw: RawGraph = serde_json::from_slice(bytes)?;
    let nodes = raw
        .nodes
        .iter()
        .map(|n| {
            Ok(NodeSpec { id: n.id.clone(), kind: parse_kind(n)?, inputs: n.inputs.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = GraphSpec {
        name: raw.name,
        inputs: raw.inputs,
        outputs: raw.outputs,
        blocks: raw.blocks,
        nodes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Serialize a graph document; load(save(g)) == g up to key ordering.
pub fn save_graph(spec: &GraphSpec) -> Result<Vec<u8>> {
    let raw = RawGraph {
        name: spec.name.clone(),
        inputs: spec.inputs.clone(),
        outputs: spec.outputs.clone(),
        blocks: spec.blocks.clone(),
        nodes: spec
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id.clone(),
                kind: n.kind.kind_name().into(),
                config: config_to_json(&n.kind),
                inputs: n.inputs.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_vec_pretty(&raw)?)
}

impl GraphSpec {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Block label of a node; unlabeled nodes share the default block "".
    pub fn block_of(&self, id: &str) -> &str {
        for b in &self.blocks {
            if b.nodes.iter().any(|n| n == id) {
                return &b.name;
            }
        }
        ""
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.blocks.iter().map(|b| b.name.clone()).collect();
        // inputs are data sources, not ops; they never form a block
        if self
            .nodes
            .iter()
            .any(|n| !matches!(n.kind, OpKind::Input { .. }) && self.block_of(&n.id).is_empty())
        {
            names.push(String::new());
        }
        names
    }

    /// Structural validation: unique ids, known references, acyclic,
    /// inputs consistent, shape inference succeeds end-to-end.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Validation(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &self.nodes {
            for i in &n.inputs {
                if !ids.contains(i.as_str()) {
                    return Err(Error::Validation(format!(
                        "node `{}` references unknown input `{i}`",
                        n.id
                    )));
                }
            }
            let is_input = matches!(n.kind, OpKind::Input { .. });
            let listed = self.inputs.iter().any(|i| i == &n.id);
            if is_input != listed {
                return Err(Error::Validation(format!(
                    "node `{}`: Input nodes and the graph `inputs` list must agree",
                    n.id
                )));
            }
            if is_input && !n.inputs.is_empty() {
                return Err(Error::Validation(format!(
                    "input node `{}` cannot have inputs",
                    n.id
                )));
            }
        }
        for o in &self.outputs {
            if !ids.contains(o.as_str()) {
                return Err(Error::Validation(format!("unknown output id `{o}`")));
            }
        }
        for b in &self.blocks {
            for nid in &b.nodes {
                if !ids.contains(nid.as_str()) {
                    return Err(Error::Validation(format!(
                        "block `{}` references unknown node `{nid}`",
                        b.name
                    )));
                }
            }
        }
        self.topo_order()?;
        self.infer_shapes()?;
        Ok(())
    }

    /// Topological order of node indices; cycles are a validation error.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: BTreeMap<&str, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for input in &n.inputs {
                let j = index[input.as_str()];
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
        let mut ready: Vec<usize> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        ready.reverse(); // pop() visits in declaration order
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    // keep declaration order stable among newly ready nodes
                    let pos = ready
                        .iter()
                        .position(|&r| r < c)
                        .unwrap_or(ready.len());
                    ready.insert(pos, c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Validation(format!(
                "graph `{}` contains a cycle",
                self.name
            )));
        }
        Ok(order)
    }

    /// Deterministic shape inference over the whole graph.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let order = self.topo_order()?;
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for i in order {
            let n = &self.nodes[i];
            let input_shape = |k: usize| -> Result<&Vec<usize>> {
                let id = n.inputs.get(k).ok_or_else(|| {
                    Error::Validation(format!("node `{}` is missing input {k}", n.id))
                })?;
                shapes.get(id).ok_or_else(|| {
                    Error::Validation(format!("node `{}`: input `{id}` not inferred", n.id))
                })
            };
            let out = match &n.kind {
                OpKind::Input { shape } => shape.clone(),
                OpKind::Conv2d(c) => {
                    c.conv_config(false).output_shape(input_shape(0)?).map_err(|e| {
                        Error::Validation(format!("node `{}`: {e}", n.id))
                    })?
                }
                OpKind::Conv1d(c) => {
                    c.conv_config(false).output_shape(input_shape(0)?).map_err(|e| {
                        Error::Validation(format!("node `{}`: {e}", n.id))
                    })?
                }
                OpKind::ConvT2d(c) => {
                    c.conv_config(true).output_shape(input_shape(0)?).map_err(|e| {
                        Error::Validation(format!("node `{}`: {e}", n.id))
                    })?
                }
                OpKind::Linear { in_features, out_features, b } => {
                    let s = input_shape(0)?;
                    let expect: Vec<usize> = if *b == 1 {
                        vec![s.first().copied().unwrap_or(0), *in_features]
                    } else {
                        vec![*b, s.get(1).copied().unwrap_or(0), *in_features]
                    };
                    if s != &expect {
                        return Err(Error::Validation(format!(
                            "node `{}`: linear input {s:?}, expected {expect:?}",
                            n.id
                        )));
                    }
                    let mut out = s.clone();
                    *out.last_mut().unwrap() = *out_features;
                    out
                }
                OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
                    let s = input_shape(0)?;
                    if s.len() < 2 || s[1] != c.num_features {
                        return Err(Error::Validation(format!(
                            "node `{}`: batchnorm over {} channels got input {s:?}",
                            n.id, c.num_features
                        )));
                    }
                    s.clone()
                }
                OpKind::LayerNorm { normalized_shape, b, .. } => {
                    let s = input_shape(0)?;
                    let nr = normalized_shape.len();
                    if s.len() < nr + 1 || &s[s.len() - nr..] != normalized_shape.as_slice() {
                        return Err(Error::Validation(format!(
                            "node `{}`: layernorm {normalized_shape:?} got input {s:?}",
                            n.id
                        )));
                    }
                    if *b > 1 && s[0] != *b {
                        return Err(Error::Validation(format!(
                            "node `{}`: fused layernorm expects model-leading input, got {s:?}",
                            n.id
                        )));
                    }
                    s.clone()
                }
                OpKind::Embedding { embedding_dim, .. } => {
                    let mut out = input_shape(0)?.clone();
                    out.push(*embedding_dim);
                    out
                }
                OpKind::MaxPool2d { kernel, stride, padding } => pool_output_shape(
                    &PoolKind::Max2d { kernel: *kernel, stride: *stride, padding: *padding },
                    input_shape(0)?,
                )
                .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?,
                OpKind::AdaptiveAvgPool2d { output_size } => pool_output_shape(
                    &PoolKind::AdaptiveAvg2d { output: (output_size[0], output_size[1]) },
                    input_shape(0)?,
                )
                .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?,
                OpKind::Dropout { .. }
                | OpKind::Dropout2d { .. }
                | OpKind::Relu
                | OpKind::Relu6
                | OpKind::LeakyRelu { .. }
                | OpKind::Tanh => input_shape(0)?.clone(),
                OpKind::Flatten { b } => {
                    let s = input_shape(0)?;
                    if *b == 1 {
                        if s.len() < 2 {
                            return Err(Error::Validation(format!(
                                "node `{}`: flatten needs rank >= 2, got {s:?}",
                                n.id
                            )));
                        }
                        vec![s[0], s[1..].iter().product()]
                    } else {
                        let serial = FusedLayout::ChannelFolded
                            .serial_shape(s, *b)
                            .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?;
                        vec![*b, serial[0], serial[1..].iter().product()]
                    }
                }
                OpKind::Replicate { b, layout } => layout
                    .fused_shape(input_shape(0)?, *b)
                    .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?,
                OpKind::LayoutAdapt { from, to, b } => {
                    let serial = from
                        .serial_shape(input_shape(0)?, *b)
                        .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?;
                    to.fused_shape(&serial, *b)
                        .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?
                }
                OpKind::Split { layout, b, .. } => layout
                    .serial_shape(input_shape(0)?, *b)
                    .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?,
                OpKind::Concat { layout } => {
                    let first = input_shape(0)?.clone();
                    for k in 1..n.inputs.len() {
                        if input_shape(k)? != &first {
                            return Err(Error::Validation(format!(
                                "node `{}`: concat inputs disagree on shape",
                                n.id
                            )));
                        }
                    }
                    layout
                        .fused_shape(&first, n.inputs.len())
                        .map_err(|e| Error::Validation(format!("node `{}`: {e}", n.id)))?
                }
            };
            shapes.insert(n.id.clone(), out);
        }
        Ok(shapes)
    }

    /// Named parameter shapes per node (the parameter shape manifest).
    pub fn param_shapes(kind: &OpKind) -> Vec<(&'static str, Vec<usize>)> {
        match kind {
            OpKind::Conv2d(c) | OpKind::Conv1d(c) => {
                let cfg = c.conv_config(false);
                vec![("weight", cfg.weight_shape()), ("bias", cfg.bias_shape())]
            }
            OpKind::ConvT2d(c) => {
                let cfg = c.conv_config(true);
                vec![("weight", cfg.weight_shape()), ("bias", cfg.bias_shape())]
            }
            OpKind::Linear { in_features, out_features, b } => vec![
                ("weight", vec![*b, *in_features, *out_features]),
                ("bias", vec![*b, 1, *out_features]),
            ],
            OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => vec![
                ("weight", vec![c.num_features]),
                ("bias", vec![c.num_features]),
            ],
            OpKind::LayerNorm { normalized_shape, b, .. } => {
                if *b == 1 {
                    vec![
                        ("weight", normalized_shape.clone()),
                        ("bias", normalized_shape.clone()),
                    ]
                } else {
                    let mut s = vec![*b, 1];
                    s.extend_from_slice(normalized_shape);
                    vec![("weight", s.clone()), ("bias", s)]
                }
            }
            OpKind::Embedding { num_embeddings, embedding_dim, .. } => {
                vec![("table", vec![*num_embeddings, *embedding_dim])]
            }
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_linear_graph() -> &'static str {
        r#"{
            "name": "tiny",
            "inputs": ["x"],
            "outputs": ["fc"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [4, 3]}, "inputs": []},
                {"id": "fc", "kind": "Linear", "config": {"in_features": 3, "out_features": 2}, "inputs": ["x"]}
            ]
        }"#
    }

    #[test]
    fn minimal_graph_round_trips() {
        let g = load_graph(minimal_linear_graph().as_bytes()).unwrap();
        let bytes = save_graph(&g).unwrap();
        let g2 = load_graph(&bytes).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn unknown_kind_is_schema_error_naming_node() {
        let doc = r#"{
            "name": "bad", "inputs": ["x"], "outputs": ["c"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [1, 2, 3, 3, 3]}, "inputs": []},
                {"id": "c", "kind": "Conv5d", "config": {}, "inputs": ["x"]}
            ]
        }"#;
        match load_graph(doc.as_bytes()) {
            Err(Error::Schema { node, detail }) => {
                assert_eq!(node, "c");
                assert!(detail.contains("Conv5d"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = r#"{
            "name": "bad", "inputs": ["x"], "outputs": ["x"], "surprise": 1,
            "nodes": [{"id": "x", "kind": "Input", "config": {"shape": [1]}, "inputs": []}]
        }"#;
        assert!(load_graph(doc.as_bytes()).is_err());
        let doc2 = r#"{
            "name": "bad", "inputs": ["x"], "outputs": ["fc"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [4, 3]}, "inputs": []},
                {"id": "fc", "kind": "Linear", "config": {"in_features": 3, "out_features": 2, "bias": true}, "inputs": ["x"]}
            ]
        }"#;
        assert!(matches!(load_graph(doc2.as_bytes()), Err(Error::Schema { .. })));
    }

    #[test]
    fn cyclic_graph_rejected() {
        let doc = r#"{
            "name": "loop", "inputs": [], "outputs": ["a"],
            "nodes": [
                {"id": "a", "kind": "ReLU", "config": {}, "inputs": ["b"]},
                {"id": "b", "kind": "ReLU", "config": {}, "inputs": ["a"]}
            ]
        }"#;
        match load_graph(doc.as_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("cycle"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn shape_inference_runs_end_to_end() {
        let g = load_graph(minimal_linear_graph().as_bytes()).unwrap();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes["fc"], vec![4, 2]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = r#"{
            "name": "dup", "inputs": ["x"], "outputs": ["x"],
            "nodes": [
                {"id": "x", "kind": "Input", "config": {"shape": [1]}, "inputs": []},
                {"id": "x", "kind": "ReLU", "config": {}, "inputs": []}
            ]
        }"#;
        assert!(load_graph(doc.as_bytes()).is_err());
    }
}
