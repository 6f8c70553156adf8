//! Command-line front end: equivalence verification, throughput
//! benchmarking, graph fusion, and tuning runs.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage/config error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bench::{artifact_header, config_hash, run_bench, BenchMode, BenchOptions, CSV_HEADER};
use crate::error::{Error, Result};
use crate::hfht::config::TuneConfig;
use crate::hfht::tune::{
    default_concurrency, tune, EvalJob, Evaluator, TuneOptions,
};
use crate::hfht::{HyperParamSet, ParamValue};
use crate::planner::fuse::{check_fusible, fuse_graphs, FusePlan};
use crate::planner::{load_graph, save_graph, GraphSpec};
use crate::train::{train_fused, train_serial, JobConfig, OptimizerKind, TrainSettings};
use crate::verify::{self, ConvergenceOptions, VerifyOptions};
use crate::zoo;

#[derive(Parser)]
#[command(name = "hfta", version, about = "horizontally fused training arrays")]
pub struct Cli {
    /// Root seed for all randomness in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run the equivalence verification battery.
    Verify(VerifyArgs),
    /// Measure training throughput for serial / concurrent / fused modes.
    Bench(BenchArgs),
    /// Fuse B model graphs into one fused graph.
    Fuse(FuseArgs),
    /// Run a hyperparameter-tuning workload.
    Tune(TuneArgs),
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Run one suite: fusion | gradients | finite-diff | optim | convergence.
    #[arg(long)]
    pub suite: Option<String>,
    /// Convergence-suite iterations.
    #[arg(long, default_value_t = 200)]
    pub convergence_iters: u64,
    /// Negative control: inject an off-by-B group-count fault into the
    /// fused convolutions; the fusion suite must flag it.
    #[arg(long, default_value_t = false)]
    pub inject_fault: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Zoo model: mlp3 | minicnn | minigan_g.
    #[arg(long)]
    pub model: String,
    /// Comma-separated modes: serial,concurrent,fused.
    #[arg(long, default_value = "serial,fused")]
    pub modes: String,
    /// Comma-separated model counts.
    #[arg(long, default_value = "1,2,4,8")]
    pub b_list: String,
    /// Measured steps per run (after warm-up).
    #[arg(long, default_value_t = 30)]
    pub steps: u64,
    /// Warm-up steps excluded from throughput.
    #[arg(long, default_value_t = 5)]
    pub warmup: u64,
    /// Batch size (0 = the model's default).
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    /// Rough memory cap; estimated overruns report status "oom".
    #[arg(long)]
    pub mem_limit_mb: Option<usize>,
    /// Write CSV here (stdout otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FuseArgs {
    /// Comma-separated paths of the B serial graph documents.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    /// Optional fuse-plan JSON: {"blocks": {"<name>": true|false}}.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output path for the fused graph JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TuneArgs {
    /// Tuning config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// JSON-lines history output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Zoo model evaluated by each trial.
    #[arg(long, default_value = "mlp3")]
    pub model: String,
}

pub fn run(cli: Cli) -> i32 {
    let code = match cli.command {
        Command::Verify(args) => cmd_verify(cli.seed, args),
        Command::Bench(args) => cmd_bench(cli.seed, args).map(|_| 0),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Tune(args) => cmd_tune(cli.seed, args).map(|_| 0),
    };
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn cmd_verify(seed: u64, args: VerifyArgs) -> Result<i32> {
    let opts = VerifyOptions { inject_conv_fault: args.inject_fault, seed };
    let conv = ConvergenceOptions { iterations: args.convergence_iters, seed, ..Default::default() };
    let reports = match args.suite.as_deref() {
        None => verify::run_all(&opts),
        Some("fusion") => vec![verify::run_fusion_oracle(&opts)],
        Some("gradients") => vec![verify::run_gradient_reconstruction(&opts)],
        Some("finite-diff") => vec![verify::run_finite_difference_checks(&opts)],
        Some("optim") => vec![verify::run_optimizer_equivalence(&opts)],
        Some("convergence") => vec![verify::run_convergence_overlap(&conv)],
        Some(other) => {
            return Err(Error::config(format!(
                "unknown suite `{other}` (fusion, gradients, finite-diff, optim, convergence)"
            )))
        }
    };
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.summary());
        all_pass &= r.passed;
        if !r.passed {
            for d in r.details.iter().rev().take(5) {
                println!("    {d}");
            }
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_bench(seed: u64, args: BenchArgs) -> Result<()> {
    let entry = zoo::by_name(&args.model)?;
    let modes: Vec<BenchMode> =
        args.modes.split(',').map(BenchMode::parse).collect::<Result<_>>()?;
    let b_list: Vec<usize> = args
        .b_list
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| Error::config(format!("b-list: {e}"))))
        .collect::<Result<_>>()?;
    let opts = BenchOptions {
        steps: args.steps,
        warmup: args.warmup,
        batch: args.batch,
        seed,
        mem_limit_mb: args.mem_limit_mb,
        concurrency: default_concurrency(),
    };
    let records = run_bench(&entry, &modes, &b_list, &opts)?;
    let config = format!(
        "bench model={} modes={} b_list={:?} steps={} warmup={} batch={}",
        args.model, args.modes, b_list, args.steps, args.warmup, args.batch
    );
    let mut out = String::new();
    out.push_str(&artifact_header(seed, &config));
    out.push('\n');
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<i32> {
    if args.inputs.is_empty() {
        return Err(Error::config("fuse needs at least one --inputs path"));
    }
    let specs: Vec<GraphSpec> = args
        .inputs
        .iter()
        .map(|p| load_graph(&std::fs::read(p)?))
        .collect::<Result<_>>()?;
    let report = check_fusible(&specs);
    print!("{report}");
    let plan = match &args.plan {
        None => FusePlan::fuse_all(),
        Some(path) => {
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct PlanDoc {
                #[serde(default)]
                blocks: BTreeMap<String, bool>,
            }
            let doc: PlanDoc = serde_json::from_slice(&std::fs::read(path)?)?;
            FusePlan { fuse_blocks: doc.blocks }
        }
    };
    match fuse_graphs(&specs, &plan) {
        Ok(fused) => {
            std::fs::write(&args.out, save_graph(&fused)?)?;
            println!("wrote {} ({} nodes)", args.out.display(), fused.nodes.len());
            Ok(0)
        }
        Err(e @ Error::Plan { .. }) => {
            eprintln!("{e}");
            Ok(2)
        }
        Err(e) => Err(e),
    }
}

/// Evaluates hyperparameter sets by training a zoo model; fusible settings
/// become per-model hypervectors of one fused job.
pub struct ZooEvaluator {
    pub entry: zoo::ModelZooEntry,
    pub seed: u64,
    pub iters_per_epoch: u64,
    pub default_batch: usize,
}

const KNOWN_PARAMS: [&str; 8] = [
    "lr",
    "beta1",
    "beta2",
    "rho",
    "weight_decay",
    "lr_decay_factor",
    "lr_decay_period",
    "batch_size",
];

impl ZooEvaluator {
    pub fn new(entry: zoo::ModelZooEntry, seed: u64) -> Self {
        let default_batch = entry.default_batch;
        ZooEvaluator { entry, seed, iters_per_epoch: 8, default_batch }
    }

    pub fn check_params(&self, cfg: &TuneConfig) -> Result<()> {
        for p in &cfg.params {
            if !KNOWN_PARAMS.contains(&p.name.as_str()) {
                return Err(Error::config(format!(
                    "unknown hyperparameter `{}` (known: {KNOWN_PARAMS:?})",
                    p.name
                )));
            }
        }
        Ok(())
    }

    fn settings_of(&self, set: &HyperParamSet) -> TrainSettings {
        let mut s = TrainSettings { optimizer: OptimizerKind::Adam, ..TrainSettings::default() };
        if let Some(v) = set.get_f64("lr") {
            s.lr = v;
        }
        if let Some(v) = set.get_f64("beta1") {
            s.beta1 = v;
        }
        if let Some(v) = set.get_f64("beta2") {
            s.beta2 = v;
        }
        if let Some(v) = set.get_f64("rho") {
            s.rho = v;
            s.optimizer = OptimizerKind::Adadelta;
        }
        if let Some(v) = set.get_f64("weight_decay") {
            s.weight_decay = v;
        }
        if let Some(v) = set.get_f64("lr_decay_factor") {
            s.lr_decay_gamma = v;
        }
        if let Some(v) = set.get_f64("lr_decay_period") {
            s.lr_decay_period = Some(v as u64);
        }
        s
    }

    fn job_config(&self, members: &[HyperParamSet], epochs: f64) -> JobConfig {
        let batch = members[0]
            .get_f64("batch_size")
            .map(|v| v as usize)
            .unwrap_or(self.default_batch);
        let steps = (epochs * self.iters_per_epoch as f64).ceil().max(1.0) as u64;
        JobConfig {
            steps,
            batch,
            iters_per_epoch: self.iters_per_epoch,
            seed: self.seed,
            val_batch: 64,
            // every trial trains the same initial weights; only the
            // hyperparameters differ
            uniform_init: true,
        }
    }
}

impl Evaluator for ZooEvaluator {
    fn eval(&self, job: &EvalJob) -> Result<Vec<f64>> {
        let cfg = self.job_config(job.members, job.epochs);
        if job.fused && job.members.len() > 1 {
            let settings: Vec<TrainSettings> =
                job.members.iter().map(|s| self.settings_of(s)).collect();
            Ok(train_fused(&self.entry, &settings, &cfg)?.metrics)
        } else {
            let mut metrics = Vec::with_capacity(job.members.len());
            for s in job.members {
                let outcome = train_serial(&self.entry, &self.settings_of(s), 0, &cfg)?;
                metrics.push(outcome.metrics[0]);
            }
            Ok(metrics)
        }
    }
}

fn param_value_json(v: &ParamValue) -> serde_json::Value {
    match v {
        ParamValue::Bool(b) => serde_json::Value::Bool(*b),
        ParamValue::Num(n) => serde_json::json!(n),
        ParamValue::Str(s) => serde_json::Value::String(s.clone()),
    }
}

fn cmd_tune(seed: u64, args: TuneArgs) -> Result<()> {
    let raw = std::fs::read(&args.config)?;
    let mut cfg = TuneConfig::parse(&raw)?;
    if cfg.seed == 0 {
        cfg.seed = seed;
    }
    let entry = zoo::by_name(&args.model)?;
    let evaluator = ZooEvaluator::new(entry, cfg.seed);
    evaluator.check_params(&cfg)?;
    let mut algorithm = cfg.build_algorithm()?;
    let opts = TuneOptions {
        scheduler: cfg.scheduler_kind(),
        max_b: cfg.max_b.unwrap_or(usize::MAX),
        concurrency: default_concurrency(),
    };

    let started = Instant::now();
    let outcome = tune(algorithm.as_mut(), &cfg.params, &evaluator, &opts)?;
    let wall = started.elapsed().as_secs_f64();

    let mut file = std::fs::File::create(&args.out)?;
    let mut header = serde_json::json!({
        "header": {
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": config_hash(&String::from_utf8_lossy(&raw)),
            "algorithm": cfg.algorithm,
            "scheduler": cfg.scheduler,
            "model": args.model,
        }
    });
    if cfg.algorithm == "hyperband" {
        let schedule = crate::hfht::algorithms::hyperband_schedule(
            cfg.r.unwrap(),
            cfg.eta.unwrap(),
            cfg.skip_last.unwrap_or(0),
        )?;
        header["header"]["brackets"] = serde_json::json!(schedule
            .iter()
            .map(|b| {
                serde_json::json!({
                    "s": b.s,
                    "n": b.n,
                    "r": b.r,
                    "rounds": b.rounds.iter().map(|r| {
                        serde_json::json!({"n_i": r.n_i, "r_i": r.r_i})
                    }).collect::<Vec<_>>()
                })
            })
            .collect::<Vec<_>>());
    }
    writeln!(file, "{header}")?;
    let mut cumulative = 0.0;
    for row in &outcome.history {
        cumulative += row.record.cost_device_seconds;
        let assignments: serde_json::Map<String, serde_json::Value> = row
            .record
            .set
            .assignments
            .iter()
            .map(|(k, v)| (k.clone(), param_value_json(v)))
            .collect();
        let mut line = serde_json::json!({
            "iteration": row.iteration,
            "original_index": row.record.set.original_index,
            "set": assignments,
            "metric": row.record.metric,
            "cost_device_seconds": row.record.cost_device_seconds,
            "cumulative_device_seconds": cumulative,
        });
        if let Some(e) = &row.record.error {
            line["error"] = serde_json::Value::String(e.clone());
        }
        writeln!(file, "{line}")?;
    }

    match &outcome.best {
        Some(best) => {
            let set: Vec<String> =
                best.set.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!(
                "best: metric {} [{}] (total cost {:.3} device-seconds, wall {wall:.3}s, {} trials)",
                best.metric.unwrap_or(f64::NAN),
                set.join(", "),
                outcome.total_cost_device_seconds,
                outcome.history.len()
            );
        }
        None => println!("no successful trials"),
    }
    for it in &outcome.iterations {
        println!(
            "  iteration {:>3} bracket {} round {}: parallelism {:>3}, {} jobs, {:.2} epochs, {:.3} device-seconds",
            it.iteration, it.bracket, it.round, it.parallelism, it.jobs, it.epochs, it.cost_device_seconds
        );
    }
    Ok(())
}
