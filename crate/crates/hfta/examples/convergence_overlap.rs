//! Train minicnn with three learning rates, fused and serially, and show
//! the per-iteration loss curves coincide exactly: fusing B training jobs
//! has no effect on convergence.

use hfta::train::{train_fused, train_serial, JobConfig, TrainSettings};
use hfta::zoo;

fn main() {
    let entry = zoo::minicnn();
    let lrs = [0.0005, 0.001, 0.002];
    let cfg = JobConfig { steps: 60, batch: 8, iters_per_epoch: 50, seed: 3, ..Default::default() };
    let settings: Vec<TrainSettings> =
        lrs.iter().map(|&lr| TrainSettings { lr, ..TrainSettings::default() }).collect();

    println!("training {} fused models ...", lrs.len());
    let fused = train_fused(&entry, &settings, &cfg).unwrap();

    let mut worst = 0.0f64;
    for (m, s) in settings.iter().enumerate() {
        println!("training serial model {m} (lr {}) ...", s.lr);
        let serial = train_serial(&entry, s, m, &cfg).unwrap();
        for step in 0..cfg.steps as usize {
            worst = worst
                .max((fused.per_step_losses[step][m] - serial.per_step_losses[step][0]).abs());
        }
        let show = |i: usize| fused.per_step_losses[i][m];
        println!(
            "  lr {:<7} loss: {:.4} -> {:.4} -> {:.4}  (iterations 0, {}, {})",
            s.lr,
            show(0),
            show(cfg.steps as usize / 2),
            show(cfg.steps as usize - 1),
            cfg.steps / 2,
            cfg.steps - 1
        );
    }
    println!("\nmax per-iteration |fused loss - serial loss| over all models: {worst:.3e}");
}
