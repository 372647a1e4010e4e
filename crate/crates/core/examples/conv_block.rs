//! The parallel atrous inverted-residual conv block at stride 1 and 2, with
//! its parameter and multiply-accumulate counts.
//!
//! ```text
//! cargo run --release --example conv_block
//! ```

use accvit::autograd::count_macs;
use accvit::conv_block::{atrous_ir_conv_forward, AtrousIrConv, ConvBlockConfig, DILATIONS};
use accvit::nn::{Init, Module};
use accvit::tensor::Tensor;

fn main() -> accvit::Result<()> {
    let x = Tensor::<f32>::from_fn(&[1, 16, 16, 16], |i| ((i * 13) % 29) as f32 / 14.0 - 1.0)?;
    println!("depthwise dilations {DILATIONS:?}");
    for (cin, cout, stride) in [(16, 16, 1), (16, 32, 2)] {
        let block = AtrousIrConv::<f32>::new(&mut Init::new(0), "conv", ConvBlockConfig::new(cin, cout, stride))?;
        let (y, counted) = count_macs(|| atrous_ir_conv_forward(&x, &block));
        let y = y?;
        println!(
            "{cin}->{cout} stride {stride}: {:?} -> {:?}, hidden {}, shortcut {}, {} params, MACs analytic {} counted {counted}",
            x.dims(),
            y.dims(),
            block.config.hidden(),
            if block.shortcut.is_some() { "1x1 conv" } else { "identity" },
            block.param_count(),
            block.macs((16, 16)),
        );
    }
    Ok(())
}
