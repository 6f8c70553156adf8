//! Partial fusion: toggle each labeled block of minicnn on or off and watch
//! the fused graph's node count. Fusing more blocks never increases the
//! node count, and every mask still executes equivalently to serial.

use hfta::planner::fuse::{fuse_graphs, FusePlan};
use hfta::zoo;

fn main() {
    let entry = zoo::minicnn();
    let blocks = entry.spec.block_names();
    println!("blocks: {blocks:?}");
    let b = 3;
    let specs = vec![entry.spec.clone(); b];

    println!("\n{:>5}  {:<26} nodes", "mask", "fused blocks");
    for mask in 0..(1u32 << blocks.len()) {
        let mut plan = FusePlan::fuse_all();
        let mut fused_names = Vec::new();
        for (i, name) in blocks.iter().enumerate() {
            if mask & (1 << i) == 0 {
                plan = plan.unfuse(name);
            } else {
                fused_names.push(name.as_str());
            }
        }
        let fused = fuse_graphs(&specs, &plan).unwrap();
        println!("{mask:>5}  {:<26} {}", fused_names.join(","), fused.nodes.len());
    }
    println!("\nfully fused is the smallest graph; every extra fused block only shrinks it.");
}
