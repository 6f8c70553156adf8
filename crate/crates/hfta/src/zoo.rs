//! The model zoo: small fixtures that train end-to-end in seconds on a CPU,
//! used by the equivalence suites, the benchmark harness and the tuner.

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::planner::{load_graph, GraphSpec};

#[derive(Clone, Debug)]
pub struct ModelZooEntry {
    pub name: &'static str,
    pub spec: GraphSpec,
    pub data: DataSpec,
    pub loss: LossKind,
    pub default_batch: usize,
}

/// Three linear layers with relu in between; model-leading fused layout
/// throughout.
pub fn mlp3() -> ModelZooEntry {
    let doc = br#"{
        "name": "mlp3",
        "inputs": ["x"],
        "outputs": ["fc2"],
        "blocks": [
            {"name": "stem", "nodes": ["fc0", "relu0"]},
            {"name": "mid", "nodes": ["fc1", "relu1"]},
            {"name": "head", "nodes": ["fc2"]}
        ],
        "nodes": [
            {"id": "x", "kind": "Input", "config": {"shape": [16, 32]}, "inputs": []},
            {"id": "fc0", "kind": "Linear", "config": {"in_features": 32, "out_features": 64}, "inputs": ["x"]},
            {"id": "relu0", "kind": "ReLU", "config": {}, "inputs": ["fc0"]},
            {"id": "fc1", "kind": "Linear", "config": {"in_features": 64, "out_features": 64}, "inputs": ["relu0"]},
            {"id": "relu1", "kind": "ReLU", "config": {}, "inputs": ["fc1"]},
            {"id": "fc2", "kind": "Linear", "config": {"in_features": 64, "out_features": 10}, "inputs": ["relu1"]}
        ]
    }"#;
    ModelZooEntry {
        name: "mlp3",
        spec: load_graph(doc).expect("mlp3 fixture is valid"),
        data: DataSpec::Classification { feature_shape: vec![32], classes: 10 },
        loss: LossKind::CrossEntropy,
        default_batch: 16,
    }
}

/// conv-bn-relu-pool x2 + linear on 10-class synthetic images; four labeled
/// blocks for partial-fusion studies.
pub fn minicnn() -> ModelZooEntry {
    let doc = br#"{
        "name": "minicnn",
        "inputs": ["x"],
        "outputs": ["fc"],
        "blocks": [
            {"name": "stem", "nodes": ["conv0", "bn0", "relu0", "pool0"]},
            {"name": "body", "nodes": ["conv1", "bn1"]},
            {"name": "tail", "nodes": ["relu1", "pool1"]},
            {"name": "head", "nodes": ["flat", "fc"]}
        ],
        "nodes": [
            {"id": "x", "kind": "Input", "config": {"shape": [8, 3, 16, 16]}, "inputs": []},
            {"id": "conv0", "kind": "Conv2d", "config": {"in_channels": 3, "out_channels": 8, "kernel": [3, 3], "stride": 1, "padding": 1, "groups": 1}, "inputs": ["x"]},
            {"id": "bn0", "kind": "BatchNorm2d", "config": {"num_features": 8}, "inputs": ["conv0"]},
            {"id": "relu0", "kind": "ReLU", "config": {}, "inputs": ["bn0"]},
            {"id": "pool0", "kind": "MaxPool2d", "config": {"kernel": 2, "stride": 2}, "inputs": ["relu0"]},
            {"id": "conv1", "kind": "Conv2d", "config": {"in_channels": 8, "out_channels": 16, "kernel": [3, 3], "stride": 1, "padding": 1, "groups": 1}, "inputs": ["pool0"]},
            {"id": "bn1", "kind": "BatchNorm2d", "config": {"num_features": 16}, "inputs": ["conv1"]},
            {"id": "relu1", "kind": "ReLU", "config": {}, "inputs": ["bn1"]},
            {"id": "pool1", "kind": "MaxPool2d", "config": {"kernel": 2, "stride": 2}, "inputs": ["relu1"]},
            {"id": "flat", "kind": "Flatten", "config": {}, "inputs": ["pool1"]},
            {"id": "fc", "kind": "Linear", "config": {"in_features": 256, "out_features": 10}, "inputs": ["flat"]}
        ]
    }"#;
    ModelZooEntry {
        name: "minicnn",
        spec: load_graph(doc).expect("minicnn fixture is valid"),
        data: DataSpec::Classification { feature_shape: vec![3, 16, 16], classes: 10 },
        loss: LossKind::CrossEntropy,
        default_batch: 8,
    }
}

/// Two transposed convolutions with batch norm and tanh: a miniature
/// generator trained by regression against a fixed teacher.
pub fn minigan_g() -> ModelZooEntry {
    let doc = br#"{
        "name": "minigan_g",
        "inputs": ["z"],
        "outputs": ["img"],
        "blocks": [
            {"name": "up0", "nodes": ["convt0", "bn0", "relu0"]},
            {"name": "up1", "nodes": ["convt1", "img"]}
        ],
        "nodes": [
            {"id": "z", "kind": "Input", "config": {"shape": [8, 8, 1, 1]}, "inputs": []},
            {"id": "convt0", "kind": "ConvT2d", "config": {"in_channels": 8, "out_channels": 16, "kernel": [4, 4], "stride": 2, "padding": 1, "groups": 1}, "inputs": ["z"]},
            {"id": "bn0", "kind": "BatchNorm2d", "config": {"num_features": 16}, "inputs": ["convt0"]},
            {"id": "relu0", "kind": "ReLU", "config": {}, "inputs": ["bn0"]},
            {"id": "convt1", "kind": "ConvT2d", "config": {"in_channels": 16, "out_channels": 3, "kernel": [4, 4], "stride": 2, "padding": 1, "groups": 1}, "inputs": ["relu0"]},
            {"id": "img", "kind": "Tanh", "config": {}, "inputs": ["convt1"]}
        ]
    }"#;
    ModelZooEntry {
        name: "minigan_g",
        spec: load_graph(doc).expect("minigan_g fixture is valid"),
        data: DataSpec::Regression { in_shape: vec![8, 1, 1], out_shape: vec![3, 4, 4] },
        loss: LossKind::Mse,
        default_batch: 8,
    }
}

pub fn by_name(name: &str) -> Result<ModelZooEntry> {
    match name {
        "mlp3" => Ok(mlp3()),
        "minicnn" => Ok(minicnn()),
        "minigan_g" => Ok(minigan_g()),
        other => Err(Error::config(format!(
            "unknown model `{other}` (zoo: mlp3, minicnn, minigan_g)"
        ))),
    }
}

pub const ALL: [&str; 3] = ["mlp3", "minicnn", "minigan_g"];
