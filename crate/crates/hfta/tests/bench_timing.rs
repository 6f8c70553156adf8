//! Wall-clock-sensitive benchmark invariants. Ignored by default because
//! they need a quiet machine and exclusive use of it; run with
//! `cargo test --test bench_timing -- --ignored --test-threads=1`.

use hfta::bench::{run_bench, BenchMode, BenchOptions};
use hfta::zoo;

/// Doubling the warm-up window changes wall_seconds but the post-warm-up
/// throughput stays within +-10%.
#[test]
#[ignore = "timing-sensitive; run alone on a quiet machine"]
fn warmup_exclusion_holds_throughput_steady() {
    let entry = zoo::mlp3();
    let run = |warmup: u64| {
        let opts = BenchOptions { steps: 200, warmup, ..BenchOptions::default() };
        run_bench(&entry, &[BenchMode::Fused], &[4], &opts).unwrap().remove(0)
    };
    let short = run(10);
    let long = run(20);
    assert!(long.wall_seconds > short.wall_seconds, "longer warm-up means longer wall");
    let ratio = long.samples_per_second / short.samples_per_second;
    assert!(
        (0.9..=1.1).contains(&ratio),
        "throughput moved {ratio:.3}x when warm-up doubled"
    );
}

/// At B=1 the fused job is the serial job plus replication plumbing; their
/// throughputs agree within 20%.
#[test]
#[ignore = "timing-sensitive; run alone on a quiet machine"]
fn single_model_fusion_overhead_is_bounded() {
    let entry = zoo::mlp3();
    let opts = BenchOptions { steps: 300, warmup: 20, ..BenchOptions::default() };
    let records =
        run_bench(&entry, &[BenchMode::Serial, BenchMode::Fused], &[1], &opts).unwrap();
    let ratio = records[1].samples_per_second / records[0].samples_per_second;
    assert!(
        (0.8..=1.25).contains(&ratio),
        "B=1 fused/serial throughput ratio {ratio:.3} outside the 20% overhead bound"
    );
}
