//! Fusion-aware hyperparameter tuning: the same random-search workload runs
//! under the serial and the hfta scheduler. Results are identical; the cost
//! in device-seconds is not.

use hfta::cli::ZooEvaluator;
use hfta::hfht::algorithms::{hyperband_schedule, RandomSearch};
use hfta::hfht::tune::{tune, SchedulerKind, TuneOptions};
use hfta::hfht::{Domain, HyperParamDef, ParamValue};
use hfta::rng::StreamRng;
use hfta::zoo;

fn defs() -> Vec<HyperParamDef> {
    vec![
        HyperParamDef {
            name: "lr".into(),
            fusible: true,
            domain: Domain::Continuous { lo: 0.0001, hi: 0.01 },
        },
        HyperParamDef {
            name: "weight_decay".into(),
            fusible: true,
            domain: Domain::Continuous { lo: 0.0, hi: 0.1 },
        },
        HyperParamDef {
            name: "batch_size".into(),
            fusible: false,
            domain: Domain::Discrete { choices: vec![ParamValue::Num(8.0), ParamValue::Num(16.0)] },
        },
    ]
}

fn main() {
    let defs = defs();
    println!("random search over 12 sets, 8 epochs each, on mlp3:");
    for scheduler in [SchedulerKind::Serial, SchedulerKind::Hfta] {
        let evaluator = ZooEvaluator::new(zoo::mlp3(), 9);
        let mut alg = RandomSearch::new(&defs, 12, 8.0, StreamRng::new(9).split("hfht")).unwrap();
        let opts = TuneOptions { scheduler, max_b: 16, concurrency: 2 };
        let out = tune(&mut alg, &defs, &evaluator, &opts).unwrap();
        let best = out.best.unwrap();
        println!(
            "  {:<10} best metric {:.4} (lr {:.5}) jobs {} cost {:.3} device-seconds",
            scheduler.name(),
            best.metric.unwrap(),
            best.set.get_f64("lr").unwrap(),
            out.iterations.iter().map(|i| i.jobs).sum::<usize>(),
            out.total_cost_device_seconds,
        );
    }

    println!("\nhyperband bracket schedule for R=81, eta=3:");
    for b in hyperband_schedule(81, 3, 0).unwrap() {
        let rounds: Vec<String> =
            b.rounds.iter().map(|r| format!("{}x{:.0}ep", r.n_i, r.r_i)).collect();
        println!("  bracket s={}: n={:<3} r={:<4} rounds: {}", b.s, b.n, b.r, rounds.join(" -> "));
    }
}
