//! The loss-scaling rule: when the fused loss is the mean of B per-model
//! losses, backward must run from B times that value to reconstruct each
//! model's serial gradients; with sum reduction no scaling is needed.

use hfta::losses::{fused_loss, LossKind, Reduction};
use hfta::rng::StreamRng;
use hfta::tape::Tape;
use hfta::tensor::Tensor;

fn main() {
    let mut rng = StreamRng::new(11);
    let b = 4;
    let preds: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[6], 1.0, &mut rng)).collect();
    let targets: Vec<Tensor> = (0..b).map(|_| Tensor::rand_uniform(&[6], 1.0, &mut rng)).collect();

    // serial reference gradients
    let mut serial = Vec::new();
    for m in 0..b {
        let mut tape = Tape::new();
        let p = tape.leaf(preds[m].clone(), true);
        let l = tape.loss(LossKind::Mse, p, &targets[m], Reduction::Mean).unwrap();
        serial.push(tape.backward(l).unwrap().take(p).unwrap());
    }

    for reduction in [Reduction::Mean, Reduction::Sum] {
        let mut tape = Tape::new();
        let pvars: Vec<_> = preds.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let trefs: Vec<&Tensor> = targets.iter().collect();
        let fl = fused_loss(&mut tape, &pvars, &trefs, LossKind::Mse, reduction).unwrap();
        let raw = tape.value(fl.raw).item().unwrap();
        let scaled = tape.value(fl.scaled).item().unwrap();
        println!("{reduction:?}: raw loss {raw:.6}, backward-driving value {scaled:.6}");

        let grads = tape.backward(fl.scaled).unwrap();
        for (m, pv) in pvars.iter().enumerate() {
            let g = grads.get(*pv).unwrap();
            let reference = match reduction {
                // serial runs used mean reduction; under sum the serial
                // gradient is numel times larger
                Reduction::Mean => serial[m].clone(),
                _ => serial[m].scale(preds[m].numel() as f64),
            };
            println!(
                "  model {m}: max |reconstructed - serial| = {:.3e}",
                g.max_abs_diff(&reference)
            );
        }
    }
}
