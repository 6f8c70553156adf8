//! Fusibility checking and the graph rewrite that fuses B model graphs into
//! one, with per-block partial fusion.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::layout::FusedLayout;

use super::{config_to_json, GraphSpec, NodeSpec, OpKind};

#[derive(Clone, Debug)]
pub struct NodeReport {
    pub position: usize,
    pub id: String,
    pub fusible: bool,
    pub first_diff: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FusibilityReport {
    /// Set when the graphs cannot even be aligned node-by-node.
    pub structural: Option<String>,
    pub nodes: Vec<NodeReport>,
    pub fusible: bool,
}

impl fmt::Display for FusibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = &self.structural {
            writeln!(f, "structural mismatch: {s}")?;
        }
        for n in &self.nodes {
            match &n.first_diff {
                None => writeln!(f, "  [{:>3}] {:<24} fusible", n.position, n.id)?,
                Some(d) => writeln!(
                    f,
                    "  [{:>3}] {:<24} INFUSIBLE (field `{d}`)",
                    n.position, n.id
                )?,
            }
        }
        writeln!(f, "overall: {}", if self.fusible { "fusible" } else { "infusible" })
    }
}

/// First differing config field between two nodes of the same kind, by
/// sorted key order.
fn config_diff(a: &OpKind, b: &OpKind) -> Option<String> {
    let va = config_to_json(a);
    let vb = config_to_json(b);
    let (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) = (&va, &vb) else {
        return (va != vb).then(|| "config".to_string());
    };
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        if ma.get(k) != mb.get(k) {
            return Some(k.clone());
        }
    }
    None
}

/// Compare B graphs node-by-node; the report lists, per node position,
/// whether the position is fusible and the first differing field.
pub fn check_fusible(specs: &[GraphSpec]) -> FusibilityReport {
    if specs.is_empty() {
        return FusibilityReport {
            structural: Some("no graphs given".into()),
            nodes: vec![],
            fusible: false,
        };
    }
    let first = &specs[0];
    for (m, s) in specs.iter().enumerate().skip(1) {
        if s.nodes.len() != first.nodes.len() {
            return FusibilityReport {
                structural: Some(format!(
                    "graph 0 has {} nodes, graph {m} has {}",
                    first.nodes.len(),
                    s.nodes.len()
                )),
                nodes: vec![],
                fusible: false,
            };
        }
        let blocks_a: Vec<_> = first.blocks.iter().collect();
        let blocks_b: Vec<_> = s.blocks.iter().collect();
        if blocks_a.len() != blocks_b.len()
            || blocks_a.iter().zip(&blocks_b).any(|(x, y)| x != y)
        {
            return FusibilityReport {
                structural: Some(format!("graph {m} declares a different block partition")),
                nodes: vec![],
                fusible: false,
            };
        }
    }
    let mut nodes = Vec::with_capacity(first.nodes.len());
    let mut all = true;
    for (pos, n0) in first.nodes.iter().enumerate() {
        let mut diff: Option<String> = None;
        for s in &specs[1..] {
            let n = &s.nodes[pos];
            if n.id != n0.id {
                diff = Some("id".into());
            } else if n.inputs != n0.inputs {
                diff = Some("inputs".into());
            } else if n.kind.kind_name() != n0.kind.kind_name() {
                diff = Some("kind".into());
            } else {
                diff = config_diff(&n0.kind, &n.kind);
            }
            if diff.is_some() {
                break;
            }
        }
        all &= diff.is_none();
        nodes.push(NodeReport {
            position: pos,
            id: n0.id.clone(),
            fusible: diff.is_none(),
            first_diff: diff,
        });
    }
    FusibilityReport { structural: None, nodes, fusible: all }
}

/// A fusion plan: the model count and which labeled blocks to fuse.
/// Blocks absent from the map are fused. Adapter insertion points and the
/// per-node parameter concatenation recipe follow from the rewrite itself.
#[derive(Clone, Debug, Default)]
pub struct FusePlan {
    pub fuse_blocks: BTreeMap<String, bool>,
}

impl FusePlan {
    pub fn fuse_all() -> Self {
        FusePlan::default()
    }

    pub fn unfuse(mut self, block: &str) -> Self {
        self.fuse_blocks.insert(block.to_string(), false);
        self
    }

    pub fn is_fused(&self, block: &str) -> bool {
        self.fuse_blocks.get(block).copied().unwrap_or(true)
    }
}

/// Required (input, output) layouts per fused op family; `None` means the
/// op is layout-polymorphic and passes its input layout through.
fn required_layouts(kind: &OpKind) -> Option<(FusedLayout, FusedLayout)> {
    use FusedLayout::{ChannelFolded as CF, ModelLeading as ML};
    match kind {
        OpKind::Conv2d(_)
        | OpKind::Conv1d(_)
        | OpKind::ConvT2d(_)
        | OpKind::BatchNorm1d(_)
        | OpKind::BatchNorm2d(_)
        | OpKind::MaxPool2d { .. }
        | OpKind::AdaptiveAvgPool2d { .. }
        | OpKind::Dropout2d { .. } => Some((CF, CF)),
        OpKind::Linear { .. } | OpKind::LayerNorm { .. } | OpKind::Embedding { .. } => {
            Some((ML, ML))
        }
        OpKind::Flatten { .. } => Some((CF, ML)),
        _ => None,
    }
}

/// The fused configuration of one serial node for B models: convolution and
/// batch-norm extents fold B into channels/groups, linear and layer-norm
/// keep per-model extents behind an explicit model axis.
fn fuse_node_config(kind: &OpKind, b: usize, input_layout: FusedLayout) -> OpKind {
    match kind {
        OpKind::Conv2d(c) => OpKind::Conv2d(fuse_conv_cfg(c, b)),
        OpKind::Conv1d(c) => OpKind::Conv1d(fuse_conv_cfg(c, b)),
        OpKind::ConvT2d(c) => OpKind::ConvT2d(fuse_conv_cfg(c, b)),
        OpKind::Linear { in_features, out_features, .. } => {
            OpKind::Linear { in_features: *in_features, out_features: *out_features, b }
        }
        OpKind::BatchNorm1d(c) => OpKind::BatchNorm1d(fuse_bn_cfg(c, b)),
        OpKind::BatchNorm2d(c) => OpKind::BatchNorm2d(fuse_bn_cfg(c, b)),
        OpKind::LayerNorm { normalized_shape, eps, .. } => {
            OpKind::LayerNorm { normalized_shape: normalized_shape.clone(), eps: *eps, b }
        }
        OpKind::Embedding { num_embeddings, embedding_dim, .. } => OpKind::Embedding {
            num_embeddings: b * num_embeddings,
            embedding_dim: *embedding_dim,
            b,
        },
        OpKind::Dropout { p, .. } => OpKind::Dropout { p: *p, b, layout: input_layout },
        OpKind::Dropout2d { p, .. } => OpKind::Dropout2d { p: *p, b },
        OpKind::Flatten { .. } => OpKind::Flatten { b },
        other => other.clone(),
    }
}

fn fuse_conv_cfg(c: &super::ConvNodeCfg, b: usize) -> super::ConvNodeCfg {
    super::ConvNodeCfg {
        in_channels: b * c.in_channels,
        out_channels: b * c.out_channels,
        kernel: c.kernel.clone(),
        stride: c.stride,
        padding: c.padding,
        groups: b * c.groups,
        b,
    }
}

fn fuse_bn_cfg(c: &super::BatchNormNodeCfg, b: usize) -> super::BatchNormNodeCfg {
    super::BatchNormNodeCfg {
        num_features: b * c.num_features,
        eps: c.eps,
        momentum: c.momentum,
        b,
    }
}

/// How one serial value is represented inside the fused graph.
#[derive(Clone, Debug)]
enum Rep {
    /// The shared graph input, not yet replicated.
    SharedInput(String),
    /// One fused tensor under a layout.
    Fused { id: String, layout: FusedLayout },
    /// B per-model tensors (unfused region).
    PerModel(Vec<String>),
}

/// Rewrite B serial graphs into one fused graph per `plan`. Fused blocks
/// become single wide nodes (with layout adapters at family boundaries);
/// unfused blocks are replicated per model with split/concat bridges.
pub fn fuse_graphs(specs: &[GraphSpec], plan: &FusePlan) -> Result<GraphSpec> {
    if specs.is_empty() {
        return Err(Error::EmptyFusion("no graphs to fuse".into()));
    }
    let b = specs.len();
    let report = check_fusible(specs);
    if let Some(s) = &report.structural {
        return Err(Error::Plan { msg: s.clone(), report: report.to_string() });
    }
    let first = &specs[0];
    // every node of a block marked fused must be fusible
    for n in &report.nodes {
        let block = first.block_of(&n.id);
        if plan.is_fused(block) && !n.fusible {
            return Err(Error::Plan {
                msg: format!(
                    "block `{block}` is marked fused but node `{}` differs across models",
                    n.id
                ),
                report: report.to_string(),
            });
        }
    }

    if b == 1 {
        let mut out = first.clone();
        out.name = format!("{}_fused_b1", first.name);
        return Ok(out);
    }

    // consumer-driven layout preferences: a layout-polymorphic node should
    // produce whatever its first layout-constrained (transitive) consumer
    // wants, so entry restacks land directly in the right layout
    let mut wanted: BTreeMap<&str, FusedLayout> = BTreeMap::new();
    for i in (0..first.nodes.len()).rev() {
        let n = &first.nodes[i];
        let want_in = match required_layouts(&n.kind) {
            Some((in_l, _)) => in_l,
            None => wanted.get(n.id.as_str()).copied().unwrap_or(FusedLayout::ModelLeading),
        };
        for input in &n.inputs {
            wanted.entry(input.as_str()).or_insert(want_in);
        }
    }

    let mut nodes: Vec<NodeSpec> = Vec::new();
    let mut rep: BTreeMap<String, Rep> = BTreeMap::new();
    let mut adapter_cache: BTreeMap<(String, FusedLayout), String> = BTreeMap::new();

    let ensure_fused = |nodes: &mut Vec<NodeSpec>,
                            cache: &mut BTreeMap<(String, FusedLayout), String>,
                            r: &Rep,
                            want: FusedLayout|
     -> String {
        match r {
            Rep::SharedInput(id) => {
                let key = (id.clone(), want);
                if let Some(existing) = cache.get(&key) {
                    return existing.clone();
                }
                let rid = format!("{id}__rep_{}", want.name());
                nodes.push(NodeSpec {
                    id: rid.clone(),
                    kind: OpKind::Replicate { b, layout: want },
                    inputs: vec![id.clone()],
                });
                cache.insert(key, rid.clone());
                rid
            }
            Rep::Fused { id, layout } => {
                if *layout == want {
                    return id.clone();
                }
                let key = (id.clone(), want);
                if let Some(existing) = cache.get(&key) {
                    return existing.clone();
                }
                let aid = format!("{id}__to_{}", want.name());
                nodes.push(NodeSpec {
                    id: aid.clone(),
                    kind: OpKind::LayoutAdapt { from: *layout, to: want, b },
                    inputs: vec![id.clone()],
                });
                cache.insert(key, aid.clone());
                aid
            }
            Rep::PerModel(ids) => {
                let key = (ids.join("+"), want);
                if let Some(existing) = cache.get(&key) {
                    return existing.clone();
                }
                let cid = format!("{}__restack_{}", ids[0].replace('@', "_"), want.name());
                nodes.push(NodeSpec {
                    id: cid.clone(),
                    kind: OpKind::Concat { layout: want },
                    inputs: ids.clone(),
                });
                cache.insert(key, cid.clone());
                cid
            }
        }
    };

    let ensure_per_model = |nodes: &mut Vec<NodeSpec>, r: &Rep| -> Vec<String> {
        match r {
            Rep::SharedInput(id) => vec![id.clone(); b],
            Rep::PerModel(ids) => ids.clone(),
            Rep::Fused { id, layout } => (0..b)
                .map(|m| {
                    let sid = format!("{id}__split{m}");
                    if nodes.iter().all(|n| n.id != sid) {
                        nodes.push(NodeSpec {
                            id: sid.clone(),
                            kind: OpKind::Split { layout: *layout, b, index: m },
                            inputs: vec![id.clone()],
                        });
                    }
                    sid
                })
                .collect(),
        }
    };

    for (pos, n0) in first.nodes.iter().enumerate() {
        if let OpKind::Input { .. } = n0.kind {
            nodes.push(n0.clone());
            rep.insert(n0.id.clone(), Rep::SharedInput(n0.id.clone()));
            continue;
        }
        let block = first.block_of(&n0.id);
        let in_rep = rep
            .get(&n0.inputs[0])
            .cloned()
            .ok_or_else(|| Error::Validation(format!("node `{}` input not planned", n0.id)))?;
        if plan.is_fused(block) {
            match required_layouts(&n0.kind) {
                Some((want_in, out_layout)) => {
                    let input =
                        ensure_fused(&mut nodes, &mut adapter_cache, &in_rep, want_in);
                    nodes.push(NodeSpec {
                        id: n0.id.clone(),
                        kind: fuse_node_config(&n0.kind, b, want_in),
                        inputs: vec![input],
                    });
                    rep.insert(
                        n0.id.clone(),
                        Rep::Fused { id: n0.id.clone(), layout: out_layout },
                    );
                }
                None => {
                    // layout-polymorphic: keep the input's fused layout, or
                    // restack straight into the downstream-preferred layout
                    let layout = match &in_rep {
                        Rep::Fused { layout, .. } => *layout,
                        _ => wanted
                            .get(n0.id.as_str())
                            .copied()
                            .unwrap_or(FusedLayout::ModelLeading),
                    };
                    let input = ensure_fused(&mut nodes, &mut adapter_cache, &in_rep, layout);
                    nodes.push(NodeSpec {
                        id: n0.id.clone(),
                        kind: fuse_node_config(&n0.kind, b, layout),
                        inputs: vec![input],
                    });
                    rep.insert(n0.id.clone(), Rep::Fused { id: n0.id.clone(), layout });
                }
            }
        } else {
            let per_model_inputs = ensure_per_model(&mut nodes, &in_rep);
            let mut ids = Vec::with_capacity(b);
            for (m, input) in per_model_inputs.iter().enumerate() {
                let id = format!("{}@{m}", n0.id);
                nodes.push(NodeSpec {
                    id: id.clone(),
                    kind: specs[m].nodes[pos].kind.clone(),
                    inputs: vec![input.clone()],
                });
                ids.push(id);
            }
            rep.insert(n0.id.clone(), Rep::PerModel(ids));
        }
    }

    let mut outputs = Vec::new();
    for o in &first.outputs {
        match rep.get(o) {
            Some(Rep::Fused { id, .. }) => outputs.push(id.clone()),
            Some(Rep::PerModel(ids)) => outputs.extend(ids.iter().cloned()),
            Some(Rep::SharedInput(id)) => outputs.push(id.clone()),
            None => return Err(Error::Validation(format!("output `{o}` not planned"))),
        }
    }

    let fused = GraphSpec {
        name: format!("{}_fused_b{b}", first.name),
        inputs: first.inputs.clone(),
        outputs,
        blocks: vec![],
        nodes,
    };
    fused.validate()?;
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::load_graph;

    fn mlp(widths: &[usize]) -> GraphSpec {
        let mut doc = String::from(
            r#"{"name": "mlp", "inputs": ["x"], "outputs": ["out"], "nodes": ["#,
        );
        doc.push_str(&format!(
            r#"{{"id": "x", "kind": "Input", "config": {{"shape": [4, {}]}}, "inputs": []}}"#,
            widths[0]
        ));
        for i in 0..widths.len() - 1 {
            doc.push_str(&format!(
                r#", {{"id": "fc{i}", "kind": "Linear", "config": {{"in_features": {}, "out_features": {}}}, "inputs": ["{}"]}}"#,
                widths[i],
                widths[i + 1],
                if i == 0 { "x".into() } else { format!("relu{}", i - 1) }
            ));
            if i < widths.len() - 2 {
                doc.push_str(&format!(
                    r#", {{"id": "relu{i}", "kind": "ReLU", "config": {{}}, "inputs": ["fc{i}"]}}"#
                ));
            }
        }
        let last = widths.len() - 2;
        doc.push_str(&format!(
            r#", {{"id": "out", "kind": "ReLU", "config": {{}}, "inputs": ["fc{last}"]}}]}}"#
        ));
        load_graph(doc.as_bytes()).unwrap()
    }

    #[test]
    fn identical_specs_are_fusible() {
        let g = mlp(&[3, 5, 2]);
        let report = check_fusible(&[g.clone(), g.clone(), g]);
        assert!(report.fusible);
        assert!(report.nodes.iter().all(|n| n.fusible));
    }

    #[test]
    fn single_graph_is_trivially_fusible() {
        let g = mlp(&[3, 5, 2]);
        assert!(check_fusible(&[g]).fusible);
    }

    #[test]
    fn differing_width_flags_field() {
        let a = mlp(&[3, 5, 2]);
        let b = mlp(&[3, 6, 2]);
        let report = check_fusible(&[a, b]);
        assert!(!report.fusible);
        let bad: Vec<&NodeReport> = report.nodes.iter().filter(|n| !n.fusible).collect();
        assert_eq!(bad.len(), 2); // fc0 out_features and fc1 in_features
        assert_eq!(bad[0].first_diff.as_deref(), Some("out_features"));
    }

    #[test]
    fn node_count_mismatch_is_structural_not_panic() {
        let a = mlp(&[3, 5, 2]);
        let b = mlp(&[3, 5, 5, 2]);
        let report = check_fusible(&[a, b]);
        assert!(!report.fusible);
        assert!(report.structural.is_some());
    }

    #[test]
    fn fully_fused_mlp_node_count_independent_of_b() {
        let g = mlp(&[3, 4, 4, 2]);
        let f2 = fuse_graphs(&vec![g.clone(); 2], &FusePlan::fuse_all()).unwrap();
        let f5 = fuse_graphs(&vec![g.clone(); 5], &FusePlan::fuse_all()).unwrap();
        assert_eq!(f2.nodes.len(), f5.nodes.len());
        // 3 fused linear nodes survive, plus input/replicate/activations
        let linears = f2.nodes.iter().filter(|n| n.kind.kind_name() == "Linear").count();
        assert_eq!(linears, 3);
    }

    #[test]
    fn plan_on_infusible_block_is_plan_error_with_report() {
        let a = mlp(&[3, 5, 2]);
        let b = mlp(&[3, 6, 2]);
        match fuse_graphs(&[a, b], &FusePlan::fuse_all()) {
            Err(Error::Plan { report, .. }) => assert!(report.contains("INFUSIBLE")),
            other => panic!("expected plan error, got {other:?}"),
        }
    }

    #[test]
    fn b1_fusion_is_identity_rewrite() {
        let g = mlp(&[3, 5, 2]);
        let f = fuse_graphs(std::slice::from_ref(&g), &FusePlan::fuse_all()).unwrap();
        assert_eq!(f.nodes, g.nodes);
        assert_eq!(f.outputs, g.outputs);
    }
}
