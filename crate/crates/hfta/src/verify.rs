//! The equivalence verification battery: fusion oracle, gradient
//! reconstruction, optimizer equivalence, and convergence overlap. Each
//! suite compares the fused path against serial execution (or finite
//! differences) and reports its worst deviation against a pinned tolerance.
//!
//! These suites are library code so the CLI (`verify`) and the acceptance
//! tests run exactly the same checks.

use crate::error::Result;
use crate::losses::{fused_loss, LossKind, Reduction};
use crate::ops::conv::{fuse_conv_family, ConvConfig};
use crate::ops::dropout::{dropout_mask_serial, fused_dropout_mask, DropoutKind};
use crate::ops::embedding::{fuse_embedding, EmbeddingConfig};
use crate::ops::layout::{extract_model, stack_models, FusedLayout};
use crate::ops::norm::{
    fuse_batchnorm, fuse_layernorm, BatchNormConfig, BatchNormState, LayerNormConfig,
};
use crate::ops::pool::PoolKind;
use crate::ops::{Activation, FusedParameter};
use crate::optim::{
    fused_steplr_step, steplr, Adadelta, AdadeltaParams, Adam, AdamParams, FusedAdadelta,
    FusedAdadeltaParams, FusedAdam, FusedAdamParams, HyperVector,
};
use crate::planner::exec::{collect_params, execute, ExecOptions, JobInput, ParamStore};
use crate::planner::fuse::{fuse_graphs, FusePlan};
use crate::planner::load_graph;
use crate::rng::StreamRng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::train::{train_fused, train_serial, JobConfig, OptimizerKind, TrainSettings};
use crate::zoo;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub passed: bool,
    pub details: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        SuiteReport { name, tolerance, max_deviation: 0.0, passed: true, details: Vec::new() }
    }

    fn record(&mut self, what: &str, deviation: f64) {
        if deviation > self.max_deviation {
            self.max_deviation = deviation;
            self.details.push(format!("worst so far: {what}: {deviation:.3e}"));
        }
        if deviation > self.tolerance {
            self.passed = false;
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<24} {}  max deviation {:.3e} (tolerance {:.1e})",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_deviation,
            self.tolerance
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Test-only negative control: builds fused convolutions with the
    /// serial group count (dropping the xB factor) so the oracle must flag
    /// the conv suite.
    pub inject_conv_fault: bool,
    pub seed: u64,
}

const ORACLE_B: [usize; 4] = [1, 2, 3, 5];
const DRAWS: usize = 20;

// ---------------------------------------------------------------------------
// Fusion oracle: fused forward slices equal serial forwards <= 1e-10;
// backward gradients per slice <= 1e-9.
// ---------------------------------------------------------------------------

/// Gradient of sum(out * gy) w.r.t. the listed leaves.
fn grads_of(
    tape: Tape,
    out: VarId,
    gy: &Tensor,
    leaves: &[VarId],
) -> Result<Vec<Tensor>> {
    let mut tape = tape;
    let gyv = tape.constant(gy.clone());
    let prod = tape.mul(out, gyv)?;
    let loss = tape.sum_all(prod);
    let mut grads = tape.backward(loss)?;
    Ok(leaves
        .iter()
        .map(|&l| grads.take(l).expect("leaf gradient"))
        .collect())
}

pub fn run_fusion_oracle(opts: &VerifyOptions) -> SuiteReport {
    let mut fwd = SuiteReport::new("fusion-forward", 1e-10);
    let mut bwd = SuiteReport::new("fusion-backward", 1e-9);
    let root = StreamRng::new(opts.seed).split("fusion-oracle");
    for &b in &ORACLE_B {
        for draw in 0..DRAWS {
            let mut rng = root.split_index(b as u64).split_index(draw as u64);
            conv_family_case(&mut fwd, &mut bwd, b, &mut rng, false, opts.inject_conv_fault);
            conv_family_case(&mut fwd, &mut bwd, b, &mut rng, true, opts.inject_conv_fault);
            conv1d_case(&mut fwd, &mut bwd, b, &mut rng, opts.inject_conv_fault);
            linear_case(&mut fwd, &mut bwd, b, &mut rng);
            batchnorm_case(&mut fwd, &mut bwd, b, &mut rng, 0);
            batchnorm_case(&mut fwd, &mut bwd, b, &mut rng, 1);
            batchnorm_case(&mut fwd, &mut bwd, b, &mut rng, 2);
            layernorm_case(&mut fwd, &mut bwd, b, &mut rng);
            embedding_case(&mut fwd, &mut bwd, b, &mut rng);
            pool_case(&mut fwd, b, &mut rng);
            dropout_case(&mut fwd, b, &mut rng);
            activation_case(&mut fwd, &mut bwd, b, &mut rng);
        }
    }
    // headline report carries the forward tolerance; backward (1e-9) must
    // pass as well, and both sub-summaries ride along in the details
    let mut out = SuiteReport::new("fusion-oracle", 1e-10);
    out.max_deviation = fwd.max_deviation;
    out.passed = fwd.passed && bwd.passed;
    out.details = fwd
        .details
        .iter()
        .map(|d| format!("forward: {d}"))
        .chain(bwd.details.iter().map(|d| format!("backward: {d}")))
        .collect();
    out.details.push(fwd.summary());
    out.details.push(bwd.summary());
    out
}

fn conv_family_case(
    fwd: &mut SuiteReport,
    bwd: &mut SuiteReport,
    b: usize,
    rng: &mut StreamRng,
    transposed: bool,
    inject_fault: bool,
) {
    let g = 1 + rng.below(2);
    let cin = g * (1 + rng.below(2));
    let cout = g * (1 + rng.below(3));
    let k = 2 + rng.below(2);
    let stride = 1 + rng.below(2);
    let padding = rng.below(2);
    let n = 1 + rng.below(2);
    let h = k + stride + rng.below(3);
    let cfg = ConvConfig {
        in_channels: cin,
        out_channels: cout,
        kernel: vec![k, k],
        stride,
        padding,
        groups: g,
        transposed,
    };
    let ws: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&cfg.weight_shape(), 1.0, rng)).collect();
    let bs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[cout], 1.0, rng)).collect();
    let xs: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&[n, cin, h, h], 1.0, rng)).collect();
    let (mut fcfg, fw, fb) =
        fuse_conv_family(&vec![cfg.clone(); b], &ws, &bs).expect("fusible by construction");
    if inject_fault && b > 1 {
        fcfg.groups = cfg.groups; // drops the xB group factor
    }
    compare_conv(fwd, bwd, b, &cfg, &fcfg, &xs, &ws, &bs, &fw, &fb, transposed);
}

fn conv1d_case(
    fwd: &mut SuiteReport,
    bwd: &mut SuiteReport,
    b: usize,
    rng: &mut StreamRng,
    inject_fault: bool,
) {
    let g = 1 + rng.below(2);
    let cin = g * (1 + rng.below(2));
    let cout = g * (1 + rng.below(3));
    let k = 2 + rng.below(2);
    let cfg = ConvConfig {
        in_channels: cin,
        out_channels: cout,
        kernel: vec![k],
        stride: 1 + rng.below(2),
        padding: rng.below(2),
        groups: g,
        transposed: false,
    };
    let n = 1 + rng.below(2);
    let l = k + 2 + rng.below(4);
    let ws: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&cfg.weight_shape(), 1.0, rng)).collect();
    let bs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[cout], 1.0, rng)).collect();
    let xs: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&[n, cin, l], 1.0, rng)).collect();
    let (mut fcfg, fw, fb) = fuse_conv_family(&vec![cfg.clone(); b], &ws, &bs).unwrap();
    if inject_fault && b > 1 {
        fcfg.groups = cfg.groups;
    }
    compare_conv(fwd, bwd, b, &cfg, &fcfg, &xs, &ws, &bs, &fw, &fb, false);
}

#[allow(clippy::too_many_arguments)]
fn compare_conv(
    fwd: &mut SuiteReport,
    bwd: &mut SuiteReport,
    b: usize,
    cfg: &ConvConfig,
    fcfg: &ConvConfig,
    xs: &[Tensor],
    ws: &[Tensor],
    bs: &[Tensor],
    fw: &FusedParameter,
    fb: &FusedParameter,
    transposed: bool,
) {
    let label = if transposed { "convt2d" } else { "conv" };
    let cout = cfg.out_channels;
    // serial forwards + grads
    let mut serial_y = Vec::with_capacity(b);
    let mut serial_gx = Vec::with_capacity(b);
    let mut serial_gw = Vec::with_capacity(b);
    let mut gys = Vec::with_capacity(b);
    for m in 0..b {
        let mut tape = Tape::new();
        let x = tape.leaf(xs[m].clone(), true);
        let w = tape.leaf(ws[m].clone(), true);
        let bias = tape.leaf(bs[m].clone(), true);
        let y = tape.conv(x, w, bias, cfg).unwrap();
        let yv = tape.value(y).clone();
        let mut rng = StreamRng::new(17).split("gy").split_index(m as u64);
        let gy = Tensor::rand_uniform(yv.shape(), 1.0, &mut rng);
        let grads = grads_of(tape, y, &gy, &[x, w]).unwrap();
        serial_y.push(yv);
        serial_gx.push(grads[0].clone());
        serial_gw.push(grads[1].clone());
        gys.push(gy);
    }
    // fused forward + grads
    let xrefs: Vec<&Tensor> = xs.iter().collect();
    let fx = Tensor::concat(&xrefs, 1).unwrap();
    let gyrefs: Vec<&Tensor> = gys.iter().collect();
    let fgy = Tensor::concat(&gyrefs, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(fx, true);
    let w = tape.leaf(fw.value.clone(), true);
    let bias = tape.leaf(fb.value.clone(), true);
    let Ok(y) = tape.conv(x, w, bias, fcfg) else {
        fwd.record(&format!("{label} fused forward failed"), f64::INFINITY);
        return;
    };
    let fy = tape.value(y).clone();
    let grads = grads_of(tape, y, &fgy, &[x, w]).unwrap();
    for m in 0..b {
        let y_slice = fy.narrow(1, m * cout, cout).unwrap();
        fwd.record(&format!("{label} B={b} forward slice {m}"), y_slice.max_abs_diff(&serial_y[m]));
        let gx_slice = grads[0].narrow(1, m * cfg.in_channels, cfg.in_channels).unwrap();
        bwd.record(&format!("{label} B={b} dx slice {m}"), gx_slice.max_abs_diff(&serial_gx[m]));
        let per = fw.per_model_extent;
        let gw_slice = grads[1].narrow(0, m * per, per).unwrap();
        bwd.record(&format!("{label} B={b} dw slice {m}"), gw_slice.max_abs_diff(&serial_gw[m]));
    }
}

fn linear_case(fwd: &mut SuiteReport, bwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    let (n, fx, fy) = (1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5));
    let ws: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[fx, fy], 1.0, rng)).collect();
    let bs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[fy], 1.0, rng)).collect();
    let xs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[n, fx], 1.0, rng)).collect();
    let gys: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[n, fy], 1.0, rng)).collect();
    let (fwp, fbp) = crate::ops::linear::fuse_linear(&ws, &bs).unwrap();

    let mut serial = Vec::with_capacity(b);
    for m in 0..b {
        let mut tape = Tape::new();
        let x = tape.leaf(xs[m].clone(), true);
        let w3 = tape.leaf(ws[m].reshape(&[1, fx, fy]).unwrap(), true);
        let b3 = tape.leaf(bs[m].reshape(&[1, 1, fy]).unwrap(), true);
        let x3 = tape.reshape(x, &[1, n, fx]).unwrap();
        let y = tape.baddbmm(b3, x3, w3).unwrap();
        let yv = tape.value(y).reshape(&[n, fy]).unwrap();
        let gy3 = gys[m].reshape(&[1, n, fy]).unwrap();
        let grads = grads_of(tape, y, &gy3, &[x, w3]).unwrap();
        serial.push((yv, grads[0].clone(), grads[1].clone()));
    }

    let xstack: Vec<Tensor> = xs.iter().map(|x| x.reshape(&[1, n, fx]).unwrap()).collect();
    let xrefs: Vec<&Tensor> = xstack.iter().collect();
    let fxv = Tensor::concat(&xrefs, 0).unwrap();
    let gstack: Vec<Tensor> = gys.iter().map(|g| g.reshape(&[1, n, fy]).unwrap()).collect();
    let grefs: Vec<&Tensor> = gstack.iter().collect();
    let fgy = Tensor::concat(&grefs, 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(fxv, true);
    let w = tape.leaf(fwp.value.clone(), true);
    let bias = tape.leaf(fbp.value.clone(), true);
    let y = tape.baddbmm(bias, x, w).unwrap();
    let fy_val = tape.value(y).clone();
    let grads = grads_of(tape, y, &fgy, &[x, w]).unwrap();
    for m in 0..b {
        let (sy, sgx, sgw) = &serial[m];
        let y_s = fy_val.narrow(0, m, 1).unwrap().reshape(&[n, fy]).unwrap();
        fwd.record(&format!("linear B={b} forward slice {m}"), y_s.max_abs_diff(sy));
        let gx_s = grads[0].narrow(0, m, 1).unwrap();
        bwd.record(
            &format!("linear B={b} dx slice {m}"),
            gx_s.max_abs_diff(&sgx.reshape(&[1, n, fx]).unwrap()),
        );
        let gw_s = grads[1].narrow(0, m, 1).unwrap();
        bwd.record(&format!("linear B={b} dw slice {m}"), gw_s.max_abs_diff(sgw));
    }
}

/// rank: 0 = featureless [N, C], 1 = [N, C, L], 2 = [N, C, H, W].
fn batchnorm_case(
    fwd: &mut SuiteReport,
    bwd: &mut SuiteReport,
    b: usize,
    rng: &mut StreamRng,
    rank: usize,
) {
    let c = 1 + rng.below(4);
    let n = 4 + rng.below(4);
    let shape: Vec<usize> = match rank {
        0 => vec![n, c],
        1 => vec![n, c, 2 + rng.below(3)],
        _ => vec![n, c, 2 + rng.below(2), 2 + rng.below(2)],
    };
    let cfg = BatchNormConfig { num_features: c, eps: 1e-5, momentum: 0.1 };
    let ws: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[c], 1.0, rng)).collect();
    let bs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[c], 1.0, rng)).collect();
    let states: Vec<BatchNormState> = (0..b)
        .map(|_| BatchNormState {
            running_mean: Tensor::rand_uniform(&[c], 0.3, rng),
            running_var: Tensor::rand_uniform(&[c], 0.3, rng).map(|v| v.abs() + 0.5),
        })
        .collect();
    let xs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&shape, 1.0, rng)).collect();
    let (fcfg, fw, fb, fstate) =
        fuse_batchnorm(&vec![cfg.clone(); b], &ws, &bs, &states).unwrap();
    for training in [true, false] {
        let mut serial = Vec::with_capacity(b);
        let mut gys = Vec::with_capacity(b);
        for m in 0..b {
            let mut tape = Tape::new();
            let x = tape.leaf(xs[m].clone(), true);
            let w = tape.leaf(ws[m].clone(), true);
            let bias = tape.leaf(bs[m].clone(), true);
            let (y, _) = tape.batchnorm(x, w, bias, &states[m], &cfg, training).unwrap();
            let yv = tape.value(y).clone();
            let gy = Tensor::rand_uniform(yv.shape(), 1.0, rng);
            let grads = grads_of(tape, y, &gy, &[x, w]).unwrap();
            serial.push((yv, grads[0].clone(), grads[1].clone()));
            gys.push(gy);
        }
        let xrefs: Vec<&Tensor> = xs.iter().collect();
        let fx = Tensor::concat(&xrefs, 1).unwrap();
        let gyrefs: Vec<&Tensor> = gys.iter().collect();
        let fgy = Tensor::concat(&gyrefs, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(fx, true);
        let w = tape.leaf(fw.value.clone(), true);
        let bias = tape.leaf(fb.value.clone(), true);
        let (y, _) = tape.batchnorm(x, w, bias, &fstate, &fcfg, training).unwrap();
        let fy = tape.value(y).clone();
        let grads = grads_of(tape, y, &fgy, &[x, w]).unwrap();
        let mode = if training { "train" } else { "eval" };
        for m in 0..b {
            let (sy, sgx, sgw) = &serial[m];
            fwd.record(
                &format!("batchnorm{rank}d {mode} B={b} forward slice {m}"),
                fy.narrow(1, m * c, c).unwrap().max_abs_diff(sy),
            );
            bwd.record(
                &format!("batchnorm{rank}d {mode} B={b} dx slice {m}"),
                grads[0].narrow(1, m * c, c).unwrap().max_abs_diff(sgx),
            );
            bwd.record(
                &format!("batchnorm{rank}d {mode} B={b} dw slice {m}"),
                grads[1].narrow(0, m * c, c).unwrap().max_abs_diff(sgw),
            );
        }
    }
}

fn layernorm_case(fwd: &mut SuiteReport, bwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    let e = 2 + rng.below(5);
    let n = 1 + rng.below(4);
    let cfg = LayerNormConfig { normalized_shape: vec![e], eps: 1e-5 };
    let ws: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[e], 1.0, rng)).collect();
    let bs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[e], 1.0, rng)).collect();
    let xs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[n, e], 1.0, rng)).collect();
    let gys: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[n, e], 1.0, rng)).collect();
    let (fcfg, fw, fb) = fuse_layernorm(&vec![cfg.clone(); b], &ws, &bs, 1).unwrap();

    let mut serial = Vec::with_capacity(b);
    for m in 0..b {
        let mut tape = Tape::new();
        let x = tape.leaf(xs[m].clone(), true);
        let w = tape.leaf(ws[m].clone(), true);
        let bias = tape.leaf(bs[m].clone(), true);
        let y = tape.layernorm(x, w, bias, &cfg).unwrap();
        let yv = tape.value(y).clone();
        let grads = grads_of(tape, y, &gys[m], &[x, w]).unwrap();
        serial.push((yv, grads[0].clone(), grads[1].clone()));
    }
    let xrefs: Vec<&Tensor> = xs.iter().collect();
    let fx = stack_models(&xrefs, FusedLayout::ModelLeading).unwrap();
    let gyrefs: Vec<&Tensor> = gys.iter().collect();
    let fgy = stack_models(&gyrefs, FusedLayout::ModelLeading).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(fx, true);
    let w = tape.leaf(fw.value.clone(), true);
    let bias = tape.leaf(fb.value.clone(), true);
    let y = tape.layernorm(x, w, bias, &fcfg).unwrap();
    let fy = tape.value(y).clone();
    let grads = grads_of(tape, y, &fgy, &[x, w]).unwrap();
    for m in 0..b {
        let (sy, sgx, sgw) = &serial[m];
        fwd.record(
            &format!("layernorm B={b} forward slice {m}"),
            extract_model(&fy, FusedLayout::ModelLeading, b, m).unwrap().max_abs_diff(sy),
        );
        bwd.record(
            &format!("layernorm B={b} dx slice {m}"),
            extract_model(&grads[0], FusedLayout::ModelLeading, b, m)
                .unwrap()
                .max_abs_diff(sgx),
        );
        bwd.record(
            &format!("layernorm B={b} dw slice {m}"),
            grads[1].narrow(0, m, 1).unwrap().reshape(&[e]).unwrap().max_abs_diff(sgw),
        );
    }
}

fn embedding_case(fwd: &mut SuiteReport, bwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    let rows = 3 + rng.below(5);
    let dim = 1 + rng.below(4);
    let n = 1 + rng.below(5);
    let cfg = EmbeddingConfig { num_embeddings: rows, embedding_dim: dim };
    let tables: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&[rows, dim], 1.0, rng)).collect();
    let idxs: Vec<Tensor> = (0..b)
        .map(|_| Tensor::from_vec((0..n).map(|_| rng.below(rows) as f64).collect()))
        .collect();
    let gys: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[n, dim], 1.0, rng)).collect();
    let (fcfg, ftable) = fuse_embedding(&vec![cfg.clone(); b], &tables).unwrap();

    let mut serial = Vec::with_capacity(b);
    for m in 0..b {
        let mut tape = Tape::new();
        let t = tape.leaf(tables[m].clone(), true);
        let y = tape.embedding(&idxs[m], t, &cfg, 0, rows).unwrap();
        let yv = tape.value(y).clone();
        let grads = grads_of(tape, y, &gys[m], &[t]).unwrap();
        serial.push((yv, grads[0].clone()));
    }
    let mut tape = Tape::new();
    let t = tape.leaf(ftable.value.clone(), true);
    let mut per_model_y = Vec::with_capacity(b);
    // model b's indices offset by b*rows into the stacked table
    let mut all_out = Vec::with_capacity(b);
    for m in 0..b {
        let y = tape.embedding(&idxs[m], t, &fcfg, m * rows, rows).unwrap();
        per_model_y.push(tape.value(y).clone());
        all_out.push(y);
    }
    let packed = tape.concat(&all_out, 0).unwrap();
    let gstack: Vec<&Tensor> = gys.iter().collect();
    let fgy = Tensor::concat(&gstack, 0).unwrap();
    let grads = grads_of(tape, packed, &fgy, &[t]).unwrap();
    for m in 0..b {
        let (sy, sgt) = &serial[m];
        fwd.record(
            &format!("embedding B={b} forward slice {m}"),
            per_model_y[m].max_abs_diff(sy),
        );
        bwd.record(
            &format!("embedding B={b} dtable slice {m}"),
            grads[0].narrow(0, m * rows, rows).unwrap().max_abs_diff(sgt),
        );
    }
}

fn pool_case(fwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    let c = 1 + rng.below(3);
    let h = 4 + rng.below(4);
    let xs: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&[2, c, h, h], 1.0, rng)).collect();
    for kind in [
        PoolKind::Max2d { kernel: 2, stride: 1 + rng.below(2), padding: 0 },
        PoolKind::AdaptiveAvg2d { output: (1 + rng.below(2), 1 + rng.below(2)) },
    ] {
        let xrefs: Vec<&Tensor> = xs.iter().collect();
        let fx = Tensor::concat(&xrefs, 1).unwrap();
        let (fy, _) = crate::ops::pool::fused_pool(&kind, &fx).unwrap();
        for m in 0..b {
            let (sy, _) = crate::ops::pool::fused_pool(&kind, &xs[m]).unwrap();
            fwd.record(
                &format!("pool B={b} slice {m}"),
                fy.narrow(1, m * c, c).unwrap().max_abs_diff(&sy),
            );
        }
    }
}

fn dropout_case(fwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    // eval mode is the identity; training mode is exact under the
    // per-model stream discipline
    let c = 1 + rng.below(3);
    let shape = [2usize, c, 3, 3];
    let xs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&shape, 1.0, rng)).collect();
    let p = 0.3;
    let root = StreamRng::new(23).split("dropout-case");
    let fused_shape = FusedLayout::ChannelFolded.fused_shape(&shape, b).unwrap();
    let fmask = fused_dropout_mask(DropoutKind::Channel2d, &fused_shape, FusedLayout::ChannelFolded, b, p, |m| {
        root.split_index(m as u64)
    })
    .unwrap();
    let xrefs: Vec<&Tensor> = xs.iter().collect();
    let fx = Tensor::concat(&xrefs, 1).unwrap();
    let fy = fx.mul(&fmask).unwrap();
    for m in 0..b {
        let mut mrng = root.split_index(m as u64);
        let smask = dropout_mask_serial(DropoutKind::Channel2d, &shape, p, &mut mrng).unwrap();
        let sy = xs[m].mul(&smask).unwrap();
        fwd.record(
            &format!("dropout2d B={b} slice {m}"),
            fy.narrow(1, m * c, c).unwrap().max_abs_diff(&sy),
        );
    }
}

fn activation_case(fwd: &mut SuiteReport, bwd: &mut SuiteReport, b: usize, rng: &mut StreamRng) {
    let shape = [2usize, 1 + rng.below(4), 1 + rng.below(4)];
    let xs: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&shape, 3.0, rng)).collect();
    let gys: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&shape, 1.0, rng)).collect();
    for act in [
        Activation::Relu,
        Activation::Relu6,
        Activation::LeakyRelu(0.01),
        Activation::Tanh,
    ] {
        let mut serial = Vec::with_capacity(b);
        for m in 0..b {
            let mut tape = Tape::new();
            let x = tape.leaf(xs[m].clone(), true);
            let y = tape.activation(act, x);
            let yv = tape.value(y).clone();
            let grads = grads_of(tape, y, &gys[m], &[x]).unwrap();
            serial.push((yv, grads[0].clone()));
        }
        let xrefs: Vec<&Tensor> = xs.iter().collect();
        let fx = stack_models(&xrefs, FusedLayout::ModelMid).unwrap();
        let gyrefs: Vec<&Tensor> = gys.iter().collect();
        let fgy = stack_models(&gyrefs, FusedLayout::ModelMid).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(fx, true);
        let y = tape.activation(act, x);
        let fy = tape.value(y).clone();
        let grads = grads_of(tape, y, &fgy, &[x]).unwrap();
        for m in 0..b {
            let (sy, sgx) = &serial[m];
            fwd.record(
                &format!("{} B={b} slice {m}", act.kernel_name()),
                extract_model(&fy, FusedLayout::ModelMid, b, m).unwrap().max_abs_diff(sy),
            );
            bwd.record(
                &format!("{} B={b} dx slice {m}", act.kernel_name()),
                extract_model(&grads[0], FusedLayout::ModelMid, b, m)
                    .unwrap()
                    .max_abs_diff(sgx),
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient reconstruction (fused loss scaling) + finite differences
// ---------------------------------------------------------------------------

fn mixed_model_doc() -> &'static [u8] {
    br#"{
        "name": "mixed",
        "inputs": ["x"],
        "outputs": ["fc1"],
        "nodes": [
            {"id": "x", "kind": "Input", "config": {"shape": [4, 2, 6, 6]}, "inputs": []},
            {"id": "conv", "kind": "Conv2d", "config": {"in_channels": 2, "out_channels": 4, "kernel": [3, 3], "stride": 1, "padding": 1, "groups": 1}, "inputs": ["x"]},
            {"id": "act", "kind": "ReLU", "config": {}, "inputs": ["conv"]},
            {"id": "flat", "kind": "Flatten", "config": {}, "inputs": ["act"]},
            {"id": "fc0", "kind": "Linear", "config": {"in_features": 144, "out_features": 12}, "inputs": ["flat"]},
            {"id": "ln", "kind": "LayerNorm", "config": {"normalized_shape": [12]}, "inputs": ["fc0"]},
            {"id": "fc1", "kind": "Linear", "config": {"in_features": 12, "out_features": 5}, "inputs": ["ln"]}
        ]
    }"#
}

pub fn run_gradient_reconstruction(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("gradient-reconstruction", 1e-9);
    let spec = load_graph(mixed_model_doc()).expect("mixed fixture is valid");
    let root = StreamRng::new(opts.seed).split("grad-reconstruction");
    let x = Tensor::rand_uniform(&[4, 2, 6, 6], 1.0, &mut root.split("x"));
    let targets = Tensor::from_vec(vec![0.0, 3.0, 1.0, 4.0]);
    for &b in &[1usize, 2, 4] {
        for reduction in [Reduction::Mean, Reduction::Sum] {
            // serial per-model gradients
            let mut serial_grads: Vec<Vec<(String, Tensor)>> = Vec::with_capacity(b);
            for m in 0..b {
                let mut store = ParamStore::init(&spec, &root, m).unwrap();
                let mut inputs = std::collections::BTreeMap::new();
                inputs.insert("x".to_string(), JobInput::Shared(x.clone()));
                let mut exec = execute(
                    &spec,
                    &mut store,
                    &inputs,
                    &root,
                    ExecOptions { training: true, step: 0, model_index: m },
                )
                .unwrap();
                let loss = exec
                    .tape
                    .loss(LossKind::CrossEntropy, exec.outputs[0], &targets, reduction)
                    .unwrap();
                let mut grads = exec.tape.backward(loss).unwrap();
                serial_grads.push(
                    exec.bindings
                        .iter()
                        .map(|bd| {
                            (format!("{}.{}", bd.node, bd.name), grads.take(bd.var).unwrap())
                        })
                        .collect(),
                );
            }
            // fused gradients from the scaled loss
            let specs = vec![spec.clone(); b];
            let fused = fuse_graphs(&specs, &FusePlan::fuse_all()).unwrap();
            let mut store = ParamStore::init(&fused, &root, 0).unwrap();
            let mut inputs = std::collections::BTreeMap::new();
            inputs.insert("x".to_string(), JobInput::Shared(x.clone()));
            let mut exec = execute(
                &fused,
                &mut store,
                &inputs,
                &root,
                ExecOptions { training: true, step: 0, model_index: 0 },
            )
            .unwrap();
            let preds = crate::train::per_model_outputs(
                &mut exec.tape,
                exec.outputs[0],
                crate::train::output_layout(&fused, &fused.outputs[0]),
                b,
            )
            .unwrap();
            let trefs: Vec<&Tensor> = (0..b).map(|_| &targets).collect();
            let fl =
                fused_loss(&mut exec.tape, &preds, &trefs, LossKind::CrossEntropy, reduction)
                    .unwrap();
            let params = collect_params(&store, &exec.bindings);
            let mut grads = exec.tape.backward(fl.scaled).unwrap();
            for (bd, param) in exec.bindings.iter().zip(&params) {
                let g = grads.take(bd.var).unwrap();
                let meta = FusedParameter::new(
                    g,
                    param.model_count,
                    param.fusion_axis,
                    param.per_model_extent,
                )
                .unwrap();
                for m in 0..b {
                    let slice = meta.slice(m).unwrap();
                    let key = format!("{}.{}", bd.node, bd.name);
                    let serial = serial_grads[m]
                        .iter()
                        .find(|(k, _)| k == &key)
                        .map(|(_, t)| t)
                        .unwrap();
                    let serial = if slice.shape() != serial.shape() {
                        serial.reshape(slice.shape()).unwrap()
                    } else {
                        serial.clone()
                    };
                    report.record(
                        &format!("{key} B={b} {reduction:?} slice {m}"),
                        slice.max_abs_diff(&serial),
                    );
                }
            }
        }
    }
    report
}

/// Central-difference gradient checks on every differentiable op:
/// pass iff |analytic - numeric| <= max(1e-7, 1e-4 * scale) elementwise.
/// The reported deviation is the worst ratio against that bound.
pub fn run_finite_difference_checks(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("finite-differences", 1.0);
    let root = StreamRng::new(opts.seed).split("fd");

    fn fd_case(
        report: &mut SuiteReport,
        name: &str,
        x0: &Tensor,
        f: &dyn Fn(&mut Tape, VarId) -> VarId,
    ) {
        let h = 1e-6;
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = f(&mut tape, x);
        let mut grads = tape.backward(loss).expect("fd case backward");
        let analytic = grads.take(x).unwrap();
        let eval = |xv: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), true);
            let loss = f(&mut tape, x);
            tape.value(loss).item().unwrap()
        };
        let mut worst = 0.0f64;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let bound = (1e-4 * a.abs().max(numeric.abs())).max(1e-7);
            worst = worst.max((a - numeric).abs() / bound);
        }
        report.record(name, worst);
    }

    let mut rng = root.split("inputs");
    // matmul: d sum(A x B)/dA
    let a0 = Tensor::rand_uniform(&[3, 4], 1.0, &mut rng);
    let bmat = Tensor::rand_uniform(&[4, 2], 1.0, &mut rng);
    fd_case(&mut report, "matmul", &a0, &{
        let bmat = bmat.clone();
        move |tape, x| {
            let b = tape.constant(bmat.clone());
            let y = tape.matmul(x, b).unwrap();
            tape.sum_all(y)
        }
    });

    // baddbmm in x and w
    let x0 = Tensor::rand_uniform(&[2, 3, 4], 1.0, &mut rng);
    let w0 = Tensor::rand_uniform(&[2, 4, 3], 1.0, &mut rng);
    let bias0 = Tensor::rand_uniform(&[2, 1, 3], 1.0, &mut rng);
    fd_case(&mut report, "baddbmm-x", &x0, &{
        let (w0, bias0) = (w0.clone(), bias0.clone());
        move |tape, x| {
            let w = tape.constant(w0.clone());
            let bias = tape.constant(bias0.clone());
            let y = tape.baddbmm(bias, x, w).unwrap();
            tape.sum_all(y)
        }
    });
    fd_case(&mut report, "baddbmm-w", &w0, &{
        let (x0, bias0) = (x0.clone(), bias0.clone());
        move |tape, w| {
            let x = tape.constant(x0.clone());
            let bias = tape.constant(bias0.clone());
            let y = tape.baddbmm(bias, x, w).unwrap();
            tape.sum_all(y)
        }
    });

    // activations (weighted sum to vary upstream gradients)
    for act in [
        Activation::Relu,
        Activation::Relu6,
        Activation::LeakyRelu(0.07),
        Activation::Tanh,
    ] {
        let x0 = Tensor::rand_uniform(&[3, 5], 1.0, &mut rng);
        let gy = Tensor::rand_uniform(&[3, 5], 1.0, &mut rng);
        fd_case(&mut report, act.kernel_name(), &x0, &{
            let gy = gy.clone();
            move |tape, x| {
                let y = tape.activation(act, x);
                let w = tape.constant(gy.clone());
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            }
        });
    }

    // conv2d / conv1d / transposed
    for (name, kernel, transposed) in
        [("conv2d", vec![2usize, 2], false), ("convt2d", vec![2, 2], true)]
    {
        let cfg = ConvConfig {
            in_channels: 2,
            out_channels: 2,
            kernel,
            stride: 1,
            padding: 1,
            groups: 1,
            transposed,
        };
        let x0 = Tensor::rand_uniform(&[1, 2, 4, 4], 1.0, &mut rng);
        let w0 = Tensor::rand_uniform(&cfg.weight_shape(), 1.0, &mut rng);
        let b0 = Tensor::rand_uniform(&[2], 1.0, &mut rng);
        fd_case(&mut report, &format!("{name}-x"), &x0, &{
            let (cfg, w0, b0) = (cfg.clone(), w0.clone(), b0.clone());
            move |tape, x| {
                let w = tape.constant(w0.clone());
                let bias = tape.constant(b0.clone());
                let y = tape.conv(x, w, bias, &cfg).unwrap();
                tape.sum_all(y)
            }
        });
        fd_case(&mut report, &format!("{name}-w"), &w0, &{
            let (cfg, x0, b0) = (cfg.clone(), x0.clone(), b0.clone());
            move |tape, w| {
                let x = tape.constant(x0.clone());
                let bias = tape.constant(b0.clone());
                let y = tape.conv(x, w, bias, &cfg).unwrap();
                tape.sum_all(y)
            }
        });
    }
    {
        let cfg = ConvConfig {
            in_channels: 2,
            out_channels: 3,
            kernel: vec![2],
            stride: 1,
            padding: 0,
            groups: 1,
            transposed: false,
        };
        let x0 = Tensor::rand_uniform(&[2, 2, 5], 1.0, &mut rng);
        let w0 = Tensor::rand_uniform(&cfg.weight_shape(), 1.0, &mut rng);
        let b0 = Tensor::rand_uniform(&[3], 1.0, &mut rng);
        fd_case(&mut report, "conv1d-x", &x0, &{
            let (cfg, w0, b0) = (cfg.clone(), w0.clone(), b0.clone());
            move |tape, x| {
                let w = tape.constant(w0.clone());
                let bias = tape.constant(b0.clone());
                let y = tape.conv(x, w, bias, &cfg).unwrap();
                tape.sum_all(y)
            }
        });
    }

    // batchnorm (train + eval) and layernorm, composite conv-relu-mean
    {
        let cfg = BatchNormConfig { num_features: 3, eps: 1e-5, momentum: 0.1 };
        let state = BatchNormState::new(3);
        let x0 = Tensor::rand_uniform(&[4, 3, 2], 1.0, &mut rng);
        for training in [true, false] {
            let name = if training { "batchnorm-train" } else { "batchnorm-eval" };
            fd_case(&mut report, name, &x0, &{
                let (cfg, state) = (cfg.clone(), state.clone());
                move |tape, x| {
                    let w = tape.constant(Tensor::from_vec(vec![0.7, 1.3, -0.4]));
                    let bias = tape.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3]));
                    let (y, _) = tape.batchnorm(x, w, bias, &state, &cfg, training).unwrap();
                    tape.mean_all(y)
                }
            });
        }
    }
    {
        let cfg = LayerNormConfig { normalized_shape: vec![4], eps: 1e-5 };
        let x0 = Tensor::rand_uniform(&[3, 4], 1.0, &mut rng);
        let w0 = Tensor::rand_uniform(&[4], 1.0, &mut rng);
        fd_case(&mut report, "layernorm-x", &x0, &{
            let (cfg, w0) = (cfg.clone(), w0.clone());
            move |tape, x| {
                let w = tape.constant(w0.clone());
                let bias = tape.constant(Tensor::zeros(&[4]));
                let y = tape.layernorm(x, w, bias, &cfg).unwrap();
                tape.mean_all(y)
            }
        });
        fd_case(&mut report, "layernorm-w", &w0, &{
            let (cfg, x0) = (cfg, x0);
            move |tape, w| {
                let x = tape.constant(x0.clone());
                let bias = tape.constant(Tensor::zeros(&[4]));
                let y = tape.layernorm(x, w, bias, &cfg).unwrap();
                tape.mean_all(y)
            }
        });
    }

    // composite: conv -> relu -> mean (the full chain)
    {
        let cfg = ConvConfig {
            in_channels: 2,
            out_channels: 3,
            kernel: vec![3, 3],
            stride: 1,
            padding: 1,
            groups: 1,
            transposed: false,
        };
        let x0 = Tensor::rand_uniform(&[1, 2, 4, 4], 1.0, &mut rng);
        let w0 = Tensor::rand_uniform(&cfg.weight_shape(), 1.0, &mut rng);
        fd_case(&mut report, "conv-relu-mean", &w0, &{
            let (cfg, x0) = (cfg, x0);
            move |tape, w| {
                let x = tape.constant(x0.clone());
                let bias = tape.constant(Tensor::zeros(&[3]));
                let y = tape.conv(x, w, bias, &cfg).unwrap();
                let y = tape.activation(Activation::Relu, y);
                tape.mean_all(y)
            }
        });
    }

    // pooling
    {
        let x0 = Tensor::rand_uniform(&[1, 2, 4, 4], 1.0, &mut rng);
        fd_case(&mut report, "maxpool2d", &x0, &|tape, x| {
            let y = tape
                .pool(&PoolKind::Max2d { kernel: 2, stride: 2, padding: 0 }, x)
                .unwrap();
            tape.sum_all(y)
        });
        fd_case(&mut report, "adaptive_avg_pool2d", &x0, &|tape, x| {
            let y = tape.pool(&PoolKind::AdaptiveAvg2d { output: (3, 3) }, x).unwrap();
            tape.sum_all(y)
        });
    }

    // embedding table gradient
    {
        let t0 = Tensor::rand_uniform(&[5, 3], 1.0, &mut rng);
        let idx = Tensor::from_vec(vec![1.0, 4.0, 1.0]);
        let cfg = EmbeddingConfig { num_embeddings: 5, embedding_dim: 3 };
        fd_case(&mut report, "embedding", &t0, &{
            move |tape, t| {
                let y = tape.embedding(&idx, t, &cfg, 0, 5).unwrap();
                tape.sum_all(y)
            }
        });
    }

    // dropout with a fixed mask
    {
        let x0 = Tensor::rand_uniform(&[4, 4], 1.0, &mut rng);
        let mask =
            dropout_mask_serial(DropoutKind::Plain, &[4, 4], 0.4, &mut root.split("mask"))
                .unwrap();
        fd_case(&mut report, "dropout", &x0, &{
            move |tape, x| {
                let y = tape.dropout(x, mask.clone()).unwrap();
                tape.sum_all(y)
            }
        });
    }

    // layout adapters and flatten: gradient is the inverse permutation
    {
        let x0 = Tensor::rand_uniform(&[2, 6, 2], 1.0, &mut rng);
        let gy = Tensor::rand_uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        fd_case(&mut report, "layout_adapt", &x0, &{
            let gy = gy.clone();
            move |tape, x| {
                let y = tape
                    .layout_adapt(x, FusedLayout::ChannelFolded, FusedLayout::ModelLeading, 3)
                    .unwrap();
                let w = tape.constant(gy.clone());
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            }
        });
        fd_case(&mut report, "flatten", &x0, &|tape, x| {
            let y = tape.flatten_fused(x, 3).unwrap();
            tape.sum_all(y)
        });
    }

    // losses
    {
        let pred = Tensor::rand_uniform(&[4, 5], 1.0, &mut rng);
        let target = Tensor::from_vec(vec![0.0, 2.0, 4.0, 1.0]);
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let name = format!("cross_entropy-{reduction:?}");
            fd_case(&mut report, &name, &pred, &{
                let target = target.clone();
                move |tape, x| tape.loss(LossKind::CrossEntropy, x, &target, reduction).unwrap()
            });
        }
        let p0 = Tensor::rand_uniform(&[6], 0.4, &mut rng).map(|v| v * 0.5 + 0.5);
        let t = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        fd_case(&mut report, "bce", &p0, &{
            move |tape, x| tape.loss(LossKind::Bce, x, &t, Reduction::Mean).unwrap()
        });
        let m0 = Tensor::rand_uniform(&[7], 1.0, &mut rng);
        let mt = Tensor::rand_uniform(&[7], 1.0, &mut StreamRng::new(77));
        fd_case(&mut report, "mse", &m0, &{
            move |tape, x| tape.loss(LossKind::Mse, x, &mt, Reduction::Mean).unwrap()
        });
    }

    report
}

// ---------------------------------------------------------------------------
// Optimizer / scheduler equivalence
// ---------------------------------------------------------------------------

pub fn run_optimizer_equivalence(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("optimizer-equivalence", 1e-9);
    let root = StreamRng::new(opts.seed).split("optim");
    let steps = 50;

    // random small "models": a handful of parameter tensors driven by a
    // deterministic pseudo-gradient field
    for &b in &[1usize, 2, 4] {
        let shapes: Vec<Vec<usize>> = vec![vec![3, 2], vec![4]];
        let mut rng = root.split_index(b as u64);
        let serial_init: Vec<Vec<Tensor>> = (0..b)
            .map(|_| shapes.iter().map(|s| Tensor::rand_uniform(s, 1.0, &mut rng)).collect())
            .collect();
        let grad_at = |theta: &Tensor, m: usize, t: u64| -> Tensor {
            theta.map(|v| (v - 0.1 * (m as f64 + 1.0)) * 2.0 + (t as f64 * 0.01).sin())
        };

        // Adam
        {
            let lrs: Vec<f64> = (0..b).map(|m| 0.05 / (m + 1) as f64).collect();
            let b1s: Vec<f64> = (0..b).map(|m| 0.85 + 0.03 * m as f64).collect();
            let b2s: Vec<f64> = (0..b).map(|m| 0.99 + 0.002 * m as f64).collect();
            let wds: Vec<f64> = (0..b).map(|m| 0.01 * m as f64).collect();
            let mut serial: Vec<(Adam, Vec<Tensor>)> = (0..b)
                .map(|m| {
                    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
                    (
                        Adam::new(
                            AdamParams {
                                lr: lrs[m],
                                beta1: b1s[m],
                                beta2: b2s[m],
                                eps: 1e-8,
                                weight_decay: wds[m],
                            },
                            &shape_refs,
                        ),
                        serial_init[m].clone(),
                    )
                })
                .collect();
            let mut fused_params: Vec<FusedParameter> = (0..shapes.len())
                .map(|k| {
                    let vals: Vec<Tensor> =
                        (0..b).map(|m| serial_init[m][k].clone()).collect();
                    FusedParameter::fuse(&vals, 0).unwrap()
                })
                .collect();
            let mut fused = FusedAdam::new(
                FusedAdamParams {
                    lr: HyperVector::new("lr", lrs.clone()),
                    beta1: HyperVector::new("beta1", b1s.clone()),
                    beta2: HyperVector::new("beta2", b2s.clone()),
                    eps: 1e-8,
                    weight_decay: HyperVector::new("wd", wds.clone()),
                },
                &fused_params,
            )
            .unwrap();
            for t in 0..steps {
                for (m, (opt, params)) in serial.iter_mut().enumerate() {
                    let grads: Vec<Tensor> =
                        params.iter().map(|p| grad_at(p, m, t)).collect();
                    opt.step(params, &grads).unwrap();
                }
                let grads: Vec<Tensor> = fused_params
                    .iter()
                    .map(|fp| {
                        let per: Vec<Tensor> = (0..b)
                            .map(|m| grad_at(&fp.slice(m).unwrap(), m, t))
                            .collect();
                        let refs: Vec<&Tensor> = per.iter().collect();
                        Tensor::concat(&refs, 0).unwrap()
                    })
                    .collect();
                fused.step(&mut fused_params, &grads).unwrap();
            }
            for m in 0..b {
                for (k, fp) in fused_params.iter().enumerate() {
                    report.record(
                        &format!("adam B={b} param {k} slice {m}"),
                        fp.slice(m).unwrap().max_abs_diff(&serial[m].1[k]),
                    );
                }
            }
        }

        // Adadelta
        {
            let lrs: Vec<f64> = (0..b).map(|m| 0.9 - 0.1 * m as f64).collect();
            let rhos: Vec<f64> = (0..b).map(|m| 0.9 - 0.05 * m as f64).collect();
            let wds: Vec<f64> = (0..b).map(|m| 0.005 * m as f64).collect();
            let mut serial: Vec<(Adadelta, Vec<Tensor>)> = (0..b)
                .map(|m| {
                    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
                    (
                        Adadelta::new(
                            AdadeltaParams {
                                lr: lrs[m],
                                rho: rhos[m],
                                eps: 1e-6,
                                weight_decay: wds[m],
                            },
                            &shape_refs,
                        ),
                        serial_init[m].clone(),
                    )
                })
                .collect();
            let mut fused_params: Vec<FusedParameter> = (0..shapes.len())
                .map(|k| {
                    let vals: Vec<Tensor> =
                        (0..b).map(|m| serial_init[m][k].clone()).collect();
                    FusedParameter::fuse(&vals, 0).unwrap()
                })
                .collect();
            let mut fused = FusedAdadelta::new(
                FusedAdadeltaParams {
                    lr: HyperVector::new("lr", lrs.clone()),
                    rho: HyperVector::new("rho", rhos.clone()),
                    eps: 1e-6,
                    weight_decay: HyperVector::new("wd", wds.clone()),
                },
                &fused_params,
            )
            .unwrap();
            for t in 0..steps {
                for (m, (opt, params)) in serial.iter_mut().enumerate() {
                    let grads: Vec<Tensor> =
                        params.iter().map(|p| grad_at(p, m, t)).collect();
                    opt.step(params, &grads).unwrap();
                }
                let grads: Vec<Tensor> = fused_params
                    .iter()
                    .map(|fp| {
                        let per: Vec<Tensor> = (0..b)
                            .map(|m| grad_at(&fp.slice(m).unwrap(), m, t))
                            .collect();
                        let refs: Vec<&Tensor> = per.iter().collect();
                        Tensor::concat(&refs, 0).unwrap()
                    })
                    .collect();
                fused.step(&mut fused_params, &grads).unwrap();
            }
            for m in 0..b {
                for (k, fp) in fused_params.iter().enumerate() {
                    report.record(
                        &format!("adadelta B={b} param {k} slice {m}"),
                        fp.slice(m).unwrap().max_abs_diff(&serial[m].1[k]),
                    );
                }
            }
        }
    }

    // StepLR: fused vector matches the closed form exactly
    {
        let lr0 = HyperVector::new("lr", vec![0.1, 0.02, 0.3]);
        let gamma = HyperVector::new("gamma", vec![0.5, 0.9, 0.1]);
        let periods = [10u64, 5, 20];
        for epoch in [0u64, 4, 5, 9, 10, 25, 100] {
            let out = fused_steplr_step(&lr0, epoch, &periods, &gamma).unwrap();
            for m in 0..3 {
                let closed =
                    lr0.values[m] * gamma.values[m].powi((epoch / periods[m]) as i32);
                report.record(
                    &format!("steplr epoch {epoch} model {m}"),
                    (out.values[m] - closed).abs(),
                );
                let serial = steplr(lr0.values[m], epoch, periods[m], gamma.values[m]).unwrap();
                report.record(
                    &format!("steplr serial equivalence epoch {epoch} model {m}"),
                    (out.values[m] - serial).abs(),
                );
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Convergence overlap
// ---------------------------------------------------------------------------

pub struct ConvergenceOptions {
    pub iterations: u64,
    pub learning_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            iterations: 200,
            learning_rates: vec![0.0005, 0.001, 0.002],
            seed: 0,
        }
    }
}

/// Train minicnn fused and serially with the same seeds and compare the
/// per-iteration training loss of every model.
pub fn run_convergence_overlap(opts: &ConvergenceOptions) -> SuiteReport {
    let mut report = SuiteReport::new("convergence-overlap", 1e-9);
    let entry = zoo::minicnn();
    let cfg = JobConfig {
        steps: opts.iterations,
        batch: 8,
        iters_per_epoch: 50,
        seed: opts.seed,
        val_batch: 32,
        uniform_init: false,
    };
    let settings: Vec<TrainSettings> = opts
        .learning_rates
        .iter()
        .map(|&lr| TrainSettings { lr, optimizer: OptimizerKind::Adam, ..TrainSettings::default() })
        .collect();
    let fused = match train_fused(&entry, &settings, &cfg) {
        Ok(f) => f,
        Err(e) => {
            report.passed = false;
            report.details.push(format!("fused training failed: {e}"));
            return report;
        }
    };
    for (m, s) in settings.iter().enumerate() {
        let serial = match train_serial(&entry, s, m, &cfg) {
            Ok(r) => r,
            Err(e) => {
                report.passed = false;
                report.details.push(format!("serial training failed: {e}"));
                return report;
            }
        };
        for step in 0..cfg.steps as usize {
            let d = (fused.per_step_losses[step][m] - serial.per_step_losses[step][0]).abs();
            report.record(&format!("lr {} iteration {step}", s.lr), d);
        }
    }
    report
}

/// All four suites of the verification battery; the fused path must
/// reproduce serial execution within every pinned tolerance.
pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    vec![
        run_fusion_oracle(opts),
        run_gradient_reconstruction(opts),
        run_finite_difference_checks(opts),
        run_optimizer_equivalence(opts),
        run_convergence_overlap(&ConvergenceOptions {
            seed: opts.seed,
            ..ConvergenceOptions::default()
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_oracle_passes() {
        let r = run_fusion_oracle(&VerifyOptions::default());
        assert!(r.passed, "{:?}", r.details);
    }

    #[test]
    fn injected_conv_fault_is_caught() {
        let r = run_fusion_oracle(&VerifyOptions { inject_conv_fault: true, seed: 0 });
        assert!(!r.passed);
    }

    #[test]
    fn finite_differences_pass() {
        let r = run_finite_difference_checks(&VerifyOptions::default());
        assert!(r.passed, "worst {}: {:?}", r.max_deviation, r.details);
    }

    #[test]
    fn optimizer_equivalence_passes() {
        let r = run_optimizer_equivalence(&VerifyOptions::default());
        assert!(r.passed, "worst {}: {:?}", r.max_deviation, r.details);
    }
}
