//! Fuse three identically-configured convolutions into one grouped
//! convolution and show that each model's output slice matches its serial
//! run exactly. The same check runs for a fused linear layer via baddbmm.

use hfta::ops::conv::{fuse_conv_family, grouped_conv_forward, ConvConfig};
use hfta::ops::linear::{baddbmm, fuse_linear, matmul};
use hfta::rng::StreamRng;
use hfta::tensor::Tensor;

fn main() {
    let mut rng = StreamRng::new(7);
    let b = 3;

    // --- convolution family -------------------------------------------------
    let cfg = ConvConfig {
        in_channels: 3,
        out_channels: 4,
        kernel: vec![3, 3],
        stride: 1,
        padding: 1,
        groups: 1,
        transposed: false,
    };
    let weights: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&cfg.weight_shape(), 1.0, &mut rng)).collect();
    let biases: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[4], 1.0, &mut rng)).collect();
    let inputs: Vec<Tensor> =
        (0..b).map(|_| Tensor::rand_uniform(&[2, 3, 8, 8], 1.0, &mut rng)).collect();

    let (fused_cfg, fw, fb) = fuse_conv_family(&vec![cfg.clone(); b], &weights, &biases).unwrap();
    println!(
        "fused conv: in {} -> {}, out {} -> {}, groups {} -> {}",
        cfg.in_channels,
        fused_cfg.in_channels,
        cfg.out_channels,
        fused_cfg.out_channels,
        cfg.groups,
        fused_cfg.groups
    );

    let irefs: Vec<&Tensor> = inputs.iter().collect();
    let fused_x = Tensor::concat(&irefs, 1).unwrap();
    let fused_y = grouped_conv_forward(&fused_x, &fw.value, &fb.value, &fused_cfg).unwrap();
    for m in 0..b {
        let serial = grouped_conv_forward(&inputs[m], &weights[m], &biases[m], &cfg).unwrap();
        let slice = fused_y.narrow(1, m * 4, 4).unwrap();
        println!("  model {m}: max |fused slice - serial| = {:.3e}", slice.max_abs_diff(&serial));
    }

    // --- linear family (baddbmm) --------------------------------------------
    let (fx, fy, n) = (6, 5, 4);
    let lw: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[fx, fy], 1.0, &mut rng)).collect();
    let lb: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[fy], 1.0, &mut rng)).collect();
    let x = Tensor::rand_uniform(&[n, fx], 1.0, &mut rng);
    let (fwp, fbp) = fuse_linear(&lw, &lb).unwrap();
    let stacked: Vec<Tensor> = (0..b).map(|_| x.reshape(&[1, n, fx]).unwrap()).collect();
    let srefs: Vec<&Tensor> = stacked.iter().collect();
    let fused_x = Tensor::concat(&srefs, 0).unwrap();
    let fused_y = baddbmm(&fbp.value, &fused_x, &fwp.value).unwrap();
    println!("fused linear: one baddbmm over shapes {:?}", fused_y.shape());
    for m in 0..b {
        let prod = matmul(&x, &lw[m]).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..fy {
                let serial = prod.data()[i * fy + j] + lb[m].data()[j];
                let got = fused_y.data()[(m * n + i) * fy + j];
                worst = worst.max((got - serial).abs());
            }
        }
        println!("  model {m}: max |fused slice - serial| = {worst:.3e}");
    }
}
