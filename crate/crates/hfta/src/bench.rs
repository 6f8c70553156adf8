//! Throughput benchmarking: serial back-to-back jobs, a concurrent worker
//! pool, and one fused job, all over the same zoo model. Throughput is
//! per-device training samples per second, measured after a warm-up window;
//! the serial mode of each (model, B) pair is the normalization baseline.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::hfht::tune::default_concurrency;
use crate::ops::counter;
use crate::train::{FusedTrainer, JobConfig, SerialTrainer, TrainSettings};
use crate::zoo::ModelZooEntry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Serial,
    Concurrent,
    Fused,
}

impl BenchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(BenchMode::Serial),
            "concurrent" => Ok(BenchMode::Concurrent),
            "fused" => Ok(BenchMode::Fused),
            other => Err(Error::config(format!("unknown bench mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::Serial => "serial",
            BenchMode::Concurrent => "concurrent",
            BenchMode::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub model: String,
    pub mode: BenchMode,
    pub b: usize,
    pub steps: u64,
    /// Wall clock of the whole run including warm-up.
    pub wall_seconds: f64,
    /// Post-warm-up samples / post-warm-up seconds, summed over models.
    pub samples_per_second: f64,
    /// Relative to the serial mode at the same (model, B); 1.0 for serial.
    pub normalized_throughput: Option<f64>,
    pub seed: u64,
    pub status: &'static str,
}

pub const CSV_HEADER: &str =
    "model,mode,B,steps,wall_seconds,samples_per_second,normalized_throughput,seed,status";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.model,
            self.mode.name(),
            self.b,
            self.steps,
            self.wall_seconds,
            self.samples_per_second,
            self.normalized_throughput.map(|v| v.to_string()).unwrap_or_default(),
            self.seed,
            self.status
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub steps: u64,
    pub warmup: u64,
    pub batch: usize,
    pub seed: u64,
    /// Rough working-set cap; runs whose estimate exceeds it report "oom".
    pub mem_limit_mb: Option<usize>,
    pub concurrency: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            steps: 30,
            warmup: 5,
            batch: 0, // 0 = the model's default batch
            seed: 0,
            mem_limit_mb: None,
            concurrency: default_concurrency(),
        }
    }
}

fn job_config(entry: &ModelZooEntry, opts: &BenchOptions) -> JobConfig {
    JobConfig {
        steps: opts.steps,
        batch: if opts.batch == 0 { entry.default_batch } else { opts.batch },
        iters_per_epoch: u64::MAX / 2, // scheduler off during benchmarking
        seed: opts.seed,
        val_batch: 8,
        uniform_init: false,
    }
}

/// Rough per-job working set: parameters, gradients, optimizer state plus
/// tape-saved activations, all f64.
fn estimated_bytes(entry: &ModelZooEntry, b: usize, batch: usize) -> Result<usize> {
    let shapes = entry.spec.infer_shapes()?;
    let default_batch = entry
        .spec
        .infer_shapes()?
        .get(entry.spec.inputs[0].as_str())
        .map(|s| s[0])
        .unwrap_or(1);
    let activations: usize = shapes.values().map(|s| s.iter().product::<usize>()).sum();
    let activations = activations * batch / default_batch.max(1);
    let params: usize = entry
        .spec
        .nodes
        .iter()
        .flat_map(|n| crate::planner::GraphSpec::param_shapes(&n.kind))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    // activations are saved twice on the tape (value + saved input),
    // parameters carry grad + two moment buffers
    Ok(8 * b * (3 * activations + 4 * params))
}

fn run_fused(entry: &ModelZooEntry, b: usize, opts: &BenchOptions) -> Result<(f64, f64, u64)> {
    let cfg = job_config(entry, opts);
    let settings = vec![TrainSettings::default(); b];
    let started = Instant::now();
    let mut trainer = FusedTrainer::new(entry, &settings, &cfg)?;
    for step in 0..opts.warmup {
        trainer.step(step)?;
    }
    let measure_start = Instant::now();
    for step in opts.warmup..opts.warmup + opts.steps {
        trainer.step(step)?;
    }
    let measured = measure_start.elapsed().as_secs_f64();
    let wall = started.elapsed().as_secs_f64();
    let samples = opts.steps * cfg.batch as u64 * b as u64;
    Ok((wall, samples as f64 / measured, samples))
}

fn run_serial(entry: &ModelZooEntry, b: usize, opts: &BenchOptions) -> Result<(f64, f64, u64)> {
    let cfg = job_config(entry, opts);
    let started = Instant::now();
    let mut measured_total = 0.0;
    for model in 0..b {
        let mut trainer = SerialTrainer::new(entry, &TrainSettings::default(), model, &cfg)?;
        for step in 0..opts.warmup {
            trainer.step(step)?;
        }
        let t0 = Instant::now();
        for step in opts.warmup..opts.warmup + opts.steps {
            trainer.step(step)?;
        }
        measured_total += t0.elapsed().as_secs_f64();
    }
    let wall = started.elapsed().as_secs_f64();
    let samples = opts.steps * cfg.batch as u64 * b as u64;
    Ok((wall, samples as f64 / measured_total, samples))
}

fn run_concurrent(entry: &ModelZooEntry, b: usize, opts: &BenchOptions) -> Result<(f64, f64, u64)> {
    let cfg = job_config(entry, opts);
    let started = Instant::now();
    let measure_start = Instant::now();
    let width = opts.concurrency.clamp(1, b);
    let queue = std::sync::Mutex::new((0..b).collect::<std::collections::VecDeque<usize>>());
    let failures = std::sync::Mutex::new(Vec::<String>::new());
    std::thread::scope(|scope| {
        for _ in 0..width {
            scope.spawn(|| loop {
                let model = { queue.lock().unwrap().pop_front() };
                let Some(model) = model else { break };
                let run = || -> Result<()> {
                    let mut trainer =
                        SerialTrainer::new(entry, &TrainSettings::default(), model, &cfg)?;
                    for step in 0..opts.warmup + opts.steps {
                        trainer.step(step)?;
                    }
                    Ok(())
                };
                if let Err(e) = run() {
                    failures.lock().unwrap().push(e.to_string());
                }
            });
        }
    });
    if let Some(e) = failures.into_inner().unwrap().pop() {
        return Err(Error::State(format!("concurrent job failed: {e}")));
    }
    // the pool overlaps jobs: the measured window is the makespan
    let measured = measure_start.elapsed().as_secs_f64();
    let wall = started.elapsed().as_secs_f64();
    let samples = opts.steps * cfg.batch as u64 * b as u64;
    Ok((wall, samples as f64 / measured, samples))
}

/// Benchmark a model over (mode, B) combinations; serial rows normalize the
/// other modes at the same B.
pub fn run_bench(
    entry: &ModelZooEntry,
    modes: &[BenchMode],
    b_list: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &b in b_list {
        if b == 0 {
            return Err(Error::config("B must be at least 1"));
        }
        let batch = if opts.batch == 0 { entry.default_batch } else { opts.batch };
        let mut serial_sps: Option<f64> = None;
        for &mode in modes {
            if let Some(limit_mb) = opts.mem_limit_mb {
                let est = estimated_bytes(entry, b, batch)?;
                if est > limit_mb * 1024 * 1024 {
                    records.push(BenchRecord {
                        model: entry.name.to_string(),
                        mode,
                        b,
                        steps: opts.steps,
                        wall_seconds: 0.0,
                        samples_per_second: 0.0,
                        normalized_throughput: None,
                        seed: opts.seed,
                        status: "oom",
                    });
                    continue;
                }
            }
            let (wall, sps, _) = match mode {
                BenchMode::Serial => run_serial(entry, b, opts)?,
                BenchMode::Concurrent => run_concurrent(entry, b, opts)?,
                BenchMode::Fused => run_fused(entry, b, opts)?,
            };
            if mode == BenchMode::Serial {
                serial_sps = Some(sps);
            }
            let normalized = match mode {
                BenchMode::Serial => Some(1.0),
                _ => serial_sps.map(|base| sps / base),
            };
            records.push(BenchRecord {
                model: entry.name.to_string(),
                mode,
                b,
                steps: opts.steps,
                wall_seconds: wall,
                samples_per_second: sps,
                normalized_throughput: normalized,
                seed: opts.seed,
                status: "ok",
            });
        }
    }
    Ok(records)
}

/// Kernel-invocation counts of one fused training step: the fused path must
/// issue one invocation per layer regardless of B.
pub fn fused_invocation_counts(
    entry: &ModelZooEntry,
    b: usize,
    seed: u64,
) -> Result<std::collections::BTreeMap<&'static str, u64>> {
    let cfg = JobConfig { steps: 1, seed, ..job_config(entry, &BenchOptions::default()) };
    let settings = vec![TrainSettings::default(); b];
    let mut trainer = FusedTrainer::new(entry, &settings, &cfg)?;
    counter::reset();
    trainer.step(0)?;
    let counts = counter::snapshot();
    counter::reset();
    Ok(counts)
}

/// FNV-1a of a canonical config string; embedded in artifacts.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn artifact_header(seed: u64, config: &str) -> String {
    format!(
        "# hfta v{} seed={} config={}",
        env!("CARGO_PKG_VERSION"),
        seed,
        config_hash(config)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn fused_invocations_independent_of_b() {
        let entry = zoo::mlp3();
        let c2 = fused_invocation_counts(&entry, 2, 0).unwrap();
        let c5 = fused_invocation_counts(&entry, 5, 0).unwrap();
        // per-layer kernels: identical counts whatever B is
        for kernel in ["baddbmm", "relu"] {
            assert_eq!(c2.get(kernel), c5.get(kernel), "kernel {kernel}");
        }
        assert_eq!(c2["baddbmm"], 3); // one per linear layer
    }

    #[test]
    fn oom_cap_produces_status_rows() {
        let entry = zoo::mlp3();
        let opts = BenchOptions { mem_limit_mb: Some(0), ..BenchOptions::default() };
        let records =
            run_bench(&entry, &[BenchMode::Serial, BenchMode::Fused], &[2], &opts).unwrap();
        assert!(records.iter().all(|r| r.status == "oom"));
    }

    #[test]
    fn serial_normalization_is_unity() {
        let entry = zoo::mlp3();
        let opts = BenchOptions { steps: 2, warmup: 1, ..BenchOptions::default() };
        let records = run_bench(&entry, &[BenchMode::Serial], &[1], &opts).unwrap();
        assert_eq!(records[0].normalized_throughput, Some(1.0));
    }
}
