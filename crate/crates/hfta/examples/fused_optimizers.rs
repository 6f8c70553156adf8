// Per-model loops index parallel arrays by model slot.
#![allow(clippy::needless_range_loop)]

//! One fused Adam step updates B models in lockstep, each with its own
//! learning rate, betas and weight decay; the trajectories match B serial
//! Adam runs to the last bit.

use hfta::ops::FusedParameter;
use hfta::optim::{steplr, Adam, AdamParams, FusedAdam, FusedAdamParams, HyperVector};
use hfta::tensor::Tensor;

fn main() {
    let b = 3;
    let lrs = [0.1, 0.01, 0.002];
    let center = Tensor::from_vec(vec![1.5, -0.5]);
    let grad = |theta: &Tensor| theta.zip(&center, |t, c| 2.0 * (t - c)).unwrap();

    let init: Vec<Tensor> = (0..b).map(|_| Tensor::zeros(&[2])).collect();
    let mut fused_param = vec![FusedParameter::fuse(&init, 0).unwrap()];
    let mut fused = FusedAdam::new(
        FusedAdamParams {
            lr: HyperVector::new("lr", lrs.to_vec()),
            beta1: HyperVector::uniform("beta1", 0.9, b),
            beta2: HyperVector::uniform("beta2", 0.999, b),
            eps: 1e-8,
            weight_decay: HyperVector::uniform("wd", 0.0, b),
        },
        &fused_param,
    )
    .unwrap();

    let mut serial: Vec<(Adam, Vec<Tensor>)> = lrs
        .iter()
        .map(|&lr| {
            (Adam::new(AdamParams { lr, ..AdamParams::default() }, &[&[2]]), vec![Tensor::zeros(&[2])])
        })
        .collect();

    for step in 0..50 {
        let per_model: Vec<Tensor> =
            (0..b).map(|m| grad(&fused_param[0].slice(m).unwrap())).collect();
        let refs: Vec<&Tensor> = per_model.iter().collect();
        let fused_grad = Tensor::concat(&refs, 0).unwrap();
        fused.step(&mut fused_param, &[fused_grad]).unwrap();
        for (opt, p) in serial.iter_mut() {
            let g = grad(&p[0]);
            opt.step(p, &[g]).unwrap();
        }
        if step % 10 == 9 {
            print!("step {:>2}:", step + 1);
            for m in 0..b {
                let diff = fused_param[0].slice(m).unwrap().max_abs_diff(&serial[m].1[0]);
                print!("  model{m} diff {diff:.1e}");
            }
            println!();
        }
    }
    println!("\nfinal per-model parameters (distinct learning rates diverge on purpose):");
    for m in 0..b {
        println!("  lr={:<6} theta = {:?}", lrs[m], fused_param[0].slice(m).unwrap().data());
    }

    // the step-decay schedule is a pure closed form per model
    println!("\nsteplr(0.1, period 10, gamma 0.5) at epoch 25 = {}", steplr(0.1, 25, 10, 0.5).unwrap());
}
