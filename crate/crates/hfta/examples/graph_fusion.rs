//! Rewrite four copies of the minicnn graph into one fused graph and show
//! the node-level transformation: grouped convolutions with 4x groups,
//! widened batch norms, model-leading linear layers and the inserted
//! replication/flatten plumbing.

use hfta::planner::fuse::{check_fusible, fuse_graphs, FusePlan};
use hfta::planner::{config_to_json, save_graph};
use hfta::zoo;

fn main() {
    let entry = zoo::minicnn();
    let b = 4;
    let specs = vec![entry.spec.clone(); b];

    let report = check_fusible(&specs);
    print!("{report}");

    let fused = fuse_graphs(&specs, &FusePlan::fuse_all()).unwrap();
    println!("\nserial graph: {} nodes; fused graph: {} nodes (independent of B)", entry.spec.nodes.len(), fused.nodes.len());
    println!("\nfused nodes:");
    for n in &fused.nodes {
        println!("  {:<28} {:<12} {}", n.id, n.kind.kind_name(), config_to_json(&n.kind));
    }

    let shapes = fused.infer_shapes().unwrap();
    println!("\nfused output shape: {:?}", shapes[fused.outputs[0].as_str()]);

    let bytes = save_graph(&fused).unwrap();
    println!("fused graph document: {} bytes of JSON", bytes.len());
}
