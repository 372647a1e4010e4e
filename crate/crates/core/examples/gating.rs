//! Softmax gating over parallel branches: zero parameters average the
//! branches, a biased gate leans towards one of them.
//!
//! ```text
//! cargo run --release --example gating
//! ```

use accvit::gating::{compute_gates, fuse, GateMixing, GateParams};
use accvit::nn::Init;
use accvit::tensor::Tensor;

fn main() -> accvit::Result<()> {
    let (n, c, h, w) = (1, 2, 2, 2);
    let branches: Vec<Tensor<f64>> = (0..3).map(|k| Tensor::from_fn(&[n, c, h, w], |_| k as f64 + 1.0)).collect::<Result<_, _>>()?;
    let x = Tensor::<f64>::from_fn(&[n, c, h, w], |i| (i as f64 * 0.37).sin())?;

    let mut gate = GateParams::<f64>::new(&mut Init::new(0), "gate", GateMixing::Dense, 3, c);
    gate.freeze_uniform();
    let g = compute_gates(&x, &gate)?;
    println!("zero gate: g = {:?}", &g.data()[..3]);
    println!("fused (branches hold 1, 2, 3): {}", fuse(&branches, &g)?.get(&[0, 0, 0, 0]));

    // Bias the third branch: softmax(GELU(logit)) now favours it everywhere.
    let mut bias = gate.bias.value().clone();
    for ch in 0..c {
        bias.set(&[2 * c + ch], 3.0);
    }
    gate.bias.set(bias);
    let g = compute_gates(&x, &gate)?;
    let at = |k| g.get(&[0, k, 0, 0, 0]);
    println!("biased gate: g = [{:.4}, {:.4}, {:.4}] (sum {:.6})", at(0), at(1), at(2), at(0) + at(1) + at(2));
    println!("fused: {:.4}", fuse(&branches, &g)?.get(&[0, 0, 0, 0]));

    // The conv block's gate mixes per channel instead of across channels.
    let cw = GateParams::<f64>::new(&mut Init::new(1), "cw", GateMixing::Channelwise, 3, c);
    println!("channelwise gate weight {:?}, dense gate weight {:?}", cw.weight.value().dims(), gate.weight.value().dims());
    Ok(())
}
