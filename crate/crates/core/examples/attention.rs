//! One atrous attention layer: the branch geometry it derives from the input
//! size, a forward pass, and its analytic cost next to the counted one.
//!
//! ```text
//! cargo run --release --example attention
//! ```

use accvit::attention::{atrous_attention_forward, AtrousAttention, AttentionConfig};
use accvit::autograd::count_macs;
use accvit::nn::{Init, Module};
use accvit::tensor::Tensor;

fn main() -> accvit::Result<()> {
    let cfg = AttentionConfig { dim: 32, levels: 2, window: 4, head_dim: 8, mlp_ratio: 4, input_hw: (32, 32) };
    let layer = AtrousAttention::<f32>::new(&mut Init::new(0), "attn", cfg)?;
    println!("{} branches, {} heads each, {} parameters", layer.branch_count(), layer.branches[0].heads, layer.param_count());
    for g in &layer.geometry {
        println!(
            "  level {}: rate {:>2}, sub-image {:?}, {} windows of {}×{}",
            g.level,
            g.partition.rate,
            g.partition.sub_hw,
            g.windows_per_item(),
            g.windows.window,
            g.windows.window
        );
    }

    let x = Tensor::<f32>::from_fn(&[2, 32, 32, 32], |i| ((i * 37) % 101) as f32 / 50.0 - 1.0)?;
    let (y, counted) = count_macs(|| atrous_attention_forward(&x, &layer));
    let y = y?;
    let mean = y.data().iter().sum::<f32>() / y.numel() as f32;
    println!("output {:?}, mean {mean:.4}", y.dims());
    println!("MACs per image: analytic {}, counted {}", layer.macs(), counted / 2);
    Ok(())
}
