//! Aggregate training throughput of B models sharing one device: serial
//! back-to-back jobs, a concurrent worker pool, and one fused job.

use hfta::bench::{fused_invocation_counts, run_bench, BenchMode, BenchOptions};
use hfta::zoo;

fn main() {
    let entry = zoo::mlp3();
    let opts = BenchOptions { steps: 40, warmup: 5, ..Default::default() };
    let modes = [BenchMode::Serial, BenchMode::Concurrent, BenchMode::Fused];
    let records = run_bench(&entry, &modes, &[1, 2, 4, 8], &opts).unwrap();

    println!("{:<8} {:<11} {:>3} {:>14} {:>11}", "model", "mode", "B", "samples/sec", "normalized");
    for r in &records {
        println!(
            "{:<8} {:<11} {:>3} {:>14.0} {:>11}",
            r.model,
            r.mode.name(),
            r.b,
            r.samples_per_second,
            r.normalized_throughput.map(|v| format!("{v:.3}")).unwrap_or_default()
        );
    }

    // fused kernel invocations per step do not depend on B
    let c2 = fused_invocation_counts(&entry, 2, 0).unwrap();
    let c8 = fused_invocation_counts(&entry, 8, 0).unwrap();
    println!("\nkernel invocations per fused training step:");
    println!("{:<12} {:>6} {:>6}", "kernel", "B=2", "B=8");
    for (k, v) in &c2 {
        println!("{k:<12} {v:>6} {:>6}", c8.get(k).copied().unwrap_or(0));
    }
}
