//! Training jobs over zoo models: one serial model, or B models fused into
//! one job with per-model hyperparameter vectors. The fused job drives
//! backward from the scaled fused loss so per-model gradients equal the
//! serial runs exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::{LossKind, Reduction};
use crate::ops::layout::FusedLayout;
use crate::optim::{
    fused_steplr_step, Adadelta, AdadeltaParams, Adam, AdamParams, FusedAdadelta,
    FusedAdadeltaParams, FusedAdam, FusedAdamParams, HyperVector,
};
use crate::planner::exec::{
    collect_params, execute, write_back_params, ExecOptions, JobInput, ParamStore,
};
use crate::planner::fuse::{fuse_graphs, FusePlan};
use crate::planner::{GraphSpec, OpKind};
use crate::rng::StreamRng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::zoo::ModelZooEntry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adadelta,
}

/// One model's training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub weight_decay: f64,
    /// StepLR knobs; `None` period disables the scheduler.
    pub lr_decay_period: Option<u64>,
    pub lr_decay_gamma: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            weight_decay: 0.0,
            lr_decay_period: None,
            lr_decay_gamma: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// per_step_losses[step][model]
    pub per_step_losses: Vec<Vec<f64>>,
    /// Validation metric per model (accuracy for classification,
    /// negative loss for regression).
    pub metrics: Vec<f64>,
    pub samples_processed: u64,
}

enum FusedOptimizer {
    Adam(FusedAdam),
    Adadelta(FusedAdadelta),
}

impl FusedOptimizer {
    fn step(&mut self, params: &mut [crate::ops::FusedParameter], grads: &[Tensor]) -> Result<()> {
        match self {
            FusedOptimizer::Adam(o) => o.step(params, grads),
            FusedOptimizer::Adadelta(o) => o.step(params, grads),
        }
    }

    fn set_lr(&mut self, lr: HyperVector, params: &[crate::ops::FusedParameter]) -> Result<()> {
        match self {
            FusedOptimizer::Adam(o) => o.set_lr(lr, params),
            FusedOptimizer::Adadelta(o) => o.set_lr(lr, params),
        }
    }
}

/// Fused output layout of a graph output node (None = per-model serial).
pub fn output_layout(spec: &GraphSpec, id: &str) -> Option<FusedLayout> {
    let node = spec.node(id)?;
    match &node.kind {
        OpKind::Linear { b, .. } | OpKind::LayerNorm { b, .. } | OpKind::Embedding { b, .. } => {
            (*b > 1).then_some(FusedLayout::ModelLeading)
        }
        OpKind::Flatten { b } => (*b > 1).then_some(FusedLayout::ModelLeading),
        OpKind::Conv2d(c) | OpKind::Conv1d(c) | OpKind::ConvT2d(c) => {
            (c.b > 1).then_some(FusedLayout::ChannelFolded)
        }
        OpKind::BatchNorm1d(c) | OpKind::BatchNorm2d(c) => {
            (c.b > 1).then_some(FusedLayout::ChannelFolded)
        }
        OpKind::MaxPool2d { .. } | OpKind::AdaptiveAvgPool2d { .. } | OpKind::Dropout2d { .. } => {
            output_layout(spec, &node.inputs[0])
        }
        OpKind::Relu | OpKind::Relu6 | OpKind::LeakyRelu { .. } | OpKind::Tanh => {
            output_layout(spec, &node.inputs[0])
        }
        OpKind::Dropout { b, layout, .. } => (*b > 1).then_some(*layout),
        OpKind::Replicate { layout, .. } => Some(*layout),
        OpKind::LayoutAdapt { to, .. } => Some(*to),
        OpKind::Concat { layout } => Some(*layout),
        OpKind::Split { .. } | OpKind::Input { .. } => None,
    }
}

/// Slice a fused output into per-model prediction handles.
pub fn per_model_outputs(
    tape: &mut Tape,
    out: VarId,
    layout: Option<FusedLayout>,
    b: usize,
) -> Result<Vec<VarId>> {
    let Some(layout) = layout else {
        return Ok(vec![out]);
    };
    let serial = layout.serial_shape(tape.value(out).shape(), b)?;
    let mut vars = Vec::with_capacity(b);
    for m in 0..b {
        let v = match layout {
            FusedLayout::ChannelFolded => tape.narrow(out, 1, m * serial[1], serial[1])?,
            FusedLayout::ModelLeading => {
                let s = tape.narrow(out, 0, m, 1)?;
                tape.reshape(s, &serial)?
            }
            FusedLayout::ModelMid => {
                let s = tape.narrow(out, 1, m, 1)?;
                tape.reshape(s, &serial)?
            }
        };
        vars.push(v);
    }
    Ok(vars)
}

fn build_fused_optimizer(
    settings: &[TrainSettings],
    params: &[crate::ops::FusedParameter],
) -> Result<FusedOptimizer> {
    let kind = settings[0].optimizer;
    if settings.iter().any(|s| s.optimizer != kind) {
        return Err(Error::Infusible {
            field: "optimizer".into(),
            detail: "optimizer type is infusible; partition by it".into(),
        });
    }
    let lr = HyperVector::new("lr", settings.iter().map(|s| s.lr).collect());
    let wd = HyperVector::new("weight_decay", settings.iter().map(|s| s.weight_decay).collect());
    Ok(match kind {
        OptimizerKind::Adam => FusedOptimizer::Adam(FusedAdam::new(
            FusedAdamParams {
                lr,
                beta1: HyperVector::new("beta1", settings.iter().map(|s| s.beta1).collect()),
                beta2: HyperVector::new("beta2", settings.iter().map(|s| s.beta2).collect()),
                eps: 1e-8,
                weight_decay: wd,
            },
            params,
        )?),
        OptimizerKind::Adadelta => {
            FusedOptimizer::Adadelta(FusedAdadelta::new(
                FusedAdadeltaParams {
                    lr,
                    rho: HyperVector::new("rho", settings.iter().map(|s| s.rho).collect()),
                    eps: 1e-6,
                    weight_decay: wd,
                },
                params,
            )?)
        }
    })
}

fn scheduled_lr(settings: &[TrainSettings], epoch: u64) -> Result<HyperVector> {
    let initial = HyperVector::new("lr", settings.iter().map(|s| s.lr).collect());
    let periods: Vec<u64> =
        settings.iter().map(|s| s.lr_decay_period.unwrap_or(u64::MAX)).collect();
    let gamma =
        HyperVector::new("gamma", settings.iter().map(|s| s.lr_decay_gamma).collect());
    fused_steplr_step(&initial, epoch, &periods, &gamma)
}

#[derive(Clone, Debug)]
pub struct JobConfig {
    pub steps: u64,
    pub batch: usize,
    pub iters_per_epoch: u64,
    pub seed: u64,
    pub val_batch: usize,
    /// Initialize every model slot from the same stream (tuning regime:
    /// identical weights, differing hyperparameters).
    pub uniform_init: bool,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            steps: 50,
            batch: 8,
            iters_per_epoch: 16,
            seed: 0,
            val_batch: 64,
            uniform_init: false,
        }
    }
}

fn input_feed(entry: &ModelZooEntry, x: Tensor) -> BTreeMap<String, JobInput> {
    let mut m = BTreeMap::new();
    m.insert(entry.spec.inputs[0].clone(), JobInput::Shared(x));
    m
}

fn batch_with_shape(
    entry: &ModelZooEntry,
    data_root: &StreamRng,
    step: u64,
    batch: usize,
) -> (Tensor, Tensor) {
    entry.data.batch(data_root, step, batch)
}

/// A fused training job over B models, steppable one iteration at a time.
pub struct FusedTrainer {
    entry: ModelZooEntry,
    settings: Vec<TrainSettings>,
    cfg: JobConfig,
    fused: GraphSpec,
    store: ParamStore,
    root: StreamRng,
    optimizer: Option<FusedOptimizer>,
    layout: Option<FusedLayout>,
    lr_epoch: Option<u64>,
    b: usize,
}

impl FusedTrainer {
    pub fn new(
        entry: &ModelZooEntry,
        settings: &[TrainSettings],
        cfg: &JobConfig,
    ) -> Result<Self> {
        let b = settings.len();
        if b == 0 {
            return Err(Error::EmptyFusion("no models to train".into()));
        }
        let mut spec = entry.spec.clone();
        override_input_batch(&mut spec, cfg.batch);
        let specs = vec![spec; b];
        let fused = fuse_graphs(&specs, &FusePlan::fuse_all())?;
        let root = StreamRng::new(cfg.seed);
        let store = ParamStore::init_with(&fused, &root, 0, cfg.uniform_init)?;
        let out_id = single_output(&fused)?;
        let layout = output_layout(&fused, &out_id);
        Ok(FusedTrainer {
            entry: entry.clone(),
            settings: settings.to_vec(),
            cfg: cfg.clone(),
            fused,
            store,
            root,
            optimizer: None,
            layout,
            lr_epoch: None,
            b,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.fused
    }

    pub fn param_elements(&self) -> usize {
        self.store.trainable_count()
    }

    /// One training iteration; returns the per-model mean losses.
    pub fn step(&mut self, step: u64) -> Result<Vec<f64>> {
        let (x, y) = batch_with_shape(&self.entry, &self.root, step, self.cfg.batch);
        let inputs = input_feed(&self.entry, x);
        let mut exec = execute(
            &self.fused,
            &mut self.store,
            &inputs,
            &self.root,
            ExecOptions { training: true, step, model_index: 0 },
        )?;
        let targets: Vec<Tensor> = (0..self.b).map(|_| y.clone()).collect();
        let (scaled, losses) = exec.tape.fused_loss_scaled(
            exec.outputs[0],
            self.layout,
            self.b,
            &targets,
            self.entry.loss,
            Reduction::Mean,
        )?;
        let mut params = collect_params(&self.store, &exec.bindings);
        if self.optimizer.is_none() {
            self.optimizer = Some(build_fused_optimizer(&self.settings, &params)?);
        }
        let opt = self.optimizer.as_mut().unwrap();
        let epoch = step / self.cfg.iters_per_epoch.max(1);
        if self.lr_epoch != Some(epoch) {
            opt.set_lr(scheduled_lr(&self.settings, epoch)?, &params)?;
            self.lr_epoch = Some(epoch);
        }
        let mut grads = exec.tape.backward(scaled)?;
        let gvec: Vec<Tensor> = exec
            .bindings
            .iter()
            .map(|bd| {
                grads.take(bd.var).ok_or_else(|| {
                    Error::Tape(format!("no gradient for `{}`.{}", bd.node, bd.name))
                })
            })
            .collect::<Result<_>>()?;
        opt.step(&mut params, &gvec)?;
        write_back_params(&mut self.store, &exec.bindings, params);
        Ok(losses)
    }

    pub fn metrics(&mut self) -> Result<Vec<f64>> {
        evaluate_fused(
            &self.entry,
            &self.fused.clone(),
            &mut self.store,
            &self.root.clone(),
            self.b,
            self.cfg.val_batch,
        )
    }
}

/// Train B models as one fused job. `settings` supplies per-model
/// hyperparameters; all models consume the same data batch per step.
pub fn train_fused(
    entry: &ModelZooEntry,
    settings: &[TrainSettings],
    cfg: &JobConfig,
) -> Result<TrainOutcome> {
    let mut trainer = FusedTrainer::new(entry, settings, cfg)?;
    let mut per_step_losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        per_step_losses.push(trainer.step(step)?);
    }
    let metrics = trainer.metrics()?;
    Ok(TrainOutcome {
        per_step_losses,
        metrics,
        samples_processed: cfg.steps * cfg.batch as u64 * settings.len() as u64,
    })
}

/// One serial training job, steppable one iteration at a time;
/// `model_index` selects the same seed streams the fused job would use for
/// that slot.
pub struct SerialTrainer {
    entry: ModelZooEntry,
    settings: TrainSettings,
    cfg: JobConfig,
    spec: GraphSpec,
    store: ParamStore,
    root: StreamRng,
    model_index: usize,
    adam: Option<Adam>,
    adadelta: Option<Adadelta>,
}

impl SerialTrainer {
    pub fn new(
        entry: &ModelZooEntry,
        settings: &TrainSettings,
        model_index: usize,
        cfg: &JobConfig,
    ) -> Result<Self> {
        let mut spec = entry.spec.clone();
        override_input_batch(&mut spec, cfg.batch);
        let root = StreamRng::new(cfg.seed);
        let store = ParamStore::init_with(&spec, &root, model_index, cfg.uniform_init)?;
        Ok(SerialTrainer {
            entry: entry.clone(),
            settings: settings.clone(),
            cfg: cfg.clone(),
            spec,
            store,
            root,
            model_index,
            adam: None,
            adadelta: None,
        })
    }

    pub fn step(&mut self, step: u64) -> Result<f64> {
        let (x, y) = batch_with_shape(&self.entry, &self.root, step, self.cfg.batch);
        let inputs = input_feed(&self.entry, x);
        let mut exec = execute(
            &self.spec,
            &mut self.store,
            &inputs,
            &self.root,
            ExecOptions { training: true, step, model_index: self.model_index },
        )?;
        let pred = exec.outputs[0];
        let loss = exec.tape.loss(self.entry.loss, pred, &y, Reduction::Mean)?;
        let loss_value = exec.tape.value(loss).item()?;
        let epoch = step / self.cfg.iters_per_epoch.max(1);
        let lr = scheduled_lr(std::slice::from_ref(&self.settings), epoch)?.values[0];
        let mut params = collect_params(&self.store, &exec.bindings);
        let mut tensors: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
        if self.adam.is_none() && self.adadelta.is_none() {
            let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
            match self.settings.optimizer {
                OptimizerKind::Adam => {
                    self.adam = Some(Adam::new(
                        AdamParams {
                            lr,
                            beta1: self.settings.beta1,
                            beta2: self.settings.beta2,
                            eps: 1e-8,
                            weight_decay: self.settings.weight_decay,
                        },
                        &shapes,
                    ))
                }
                OptimizerKind::Adadelta => {
                    self.adadelta = Some(Adadelta::new(
                        AdadeltaParams {
                            lr,
                            rho: self.settings.rho,
                            eps: 1e-6,
                            weight_decay: self.settings.weight_decay,
                        },
                        &shapes,
                    ))
                }
            }
        }
        let mut grads = exec.tape.backward(loss)?;
        let gvec: Vec<Tensor> = exec
            .bindings
            .iter()
            .map(|bd| {
                grads.take(bd.var).ok_or_else(|| {
                    Error::Tape(format!("no gradient for `{}`.{}", bd.node, bd.name))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(o) = self.adam.as_mut() {
            o.params.lr = lr;
            o.step(&mut tensors, &gvec)?;
        } else if let Some(o) = self.adadelta.as_mut() {
            o.params.lr = lr;
            o.step(&mut tensors, &gvec)?;
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            p.value = t;
        }
        write_back_params(&mut self.store, &exec.bindings, params);
        Ok(loss_value)
    }

    pub fn metrics(&mut self) -> Result<Vec<f64>> {
        evaluate_fused(
            &self.entry,
            &self.spec.clone(),
            &mut self.store,
            &self.root.clone(),
            1,
            self.cfg.val_batch,
        )
    }
}

pub fn train_serial(
    entry: &ModelZooEntry,
    settings: &TrainSettings,
    model_index: usize,
    cfg: &JobConfig,
) -> Result<TrainOutcome> {
    let mut trainer = SerialTrainer::new(entry, settings, model_index, cfg)?;
    let mut per_step_losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        per_step_losses.push(vec![trainer.step(step)?]);
    }
    let metrics = trainer.metrics()?;
    Ok(TrainOutcome {
        per_step_losses,
        metrics,
        samples_processed: cfg.steps * cfg.batch as u64,
    })
}

fn single_output(spec: &GraphSpec) -> Result<String> {
    if spec.outputs.len() != 1 {
        return Err(Error::Contract(format!(
            "training drives exactly one output, graph `{}` has {}",
            spec.name,
            spec.outputs.len()
        )));
    }
    Ok(spec.outputs[0].clone())
}

fn override_input_batch(spec: &mut GraphSpec, batch: usize) {
    for n in &mut spec.nodes {
        if let OpKind::Input { shape } = &mut n.kind {
            shape[0] = batch;
        }
    }
}

/// Eval-mode forward on the validation batch; accuracy for classification,
/// negative mse for regression, per model.
fn evaluate_fused(
    entry: &ModelZooEntry,
    spec: &GraphSpec,
    store: &mut ParamStore,
    root: &StreamRng,
    b: usize,
    val_batch: usize,
) -> Result<Vec<f64>> {
    let (x, y) = entry.data.val_batch(root, val_batch);
    let mut spec = spec.clone();
    override_input_batch(&mut spec, val_batch);
    let inputs = input_feed(entry, x);
    let mut exec = execute(
        &spec,
        store,
        &inputs,
        root,
        ExecOptions { training: false, step: u64::MAX, model_index: 0 },
    )?;
    let out_id = single_output(&spec)?;
    let layout = output_layout(&spec, &out_id);
    let preds = per_model_outputs(&mut exec.tape, exec.outputs[0], layout, b)?;
    let mut metrics = Vec::with_capacity(b);
    for &p in &preds {
        let pv = exec.tape.value(p);
        metrics.push(match entry.loss {
            LossKind::CrossEntropy => {
                let (n, k) = (pv.shape()[0], pv.shape()[1]);
                let mut correct = 0usize;
                for i in 0..n {
                    let row = &pv.data()[i * k..(i + 1) * k];
                    let mut arg = 0usize;
                    let mut best = f64::NEG_INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            arg = j;
                        }
                    }
                    if arg as f64 == y.data()[i] {
                        correct += 1;
                    }
                }
                correct as f64 / n as f64
            }
            _ => {
                let diff: f64 = pv
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(a, t)| (a - t) * (a - t))
                    .sum::<f64>()
                    / pv.numel() as f64;
                -diff
            }
        });
    }
    Ok(metrics)
}
