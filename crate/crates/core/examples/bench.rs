//! Per-branch timing of one stage: partition cost, attention cost and
//! throughput for each dilation rate.
//!
//! ```text
//! cargo run --release --example bench -- [variant] [stage] [resolution]
//! ```

use accvit::harness::bench;
use accvit::model::VariantConfig;

fn main() -> accvit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = VariantConfig::named(args.first().map_or("tiny", String::as_str))?;
    let stage = args.get(1).map_or(1, |s| s.parse().expect("stage must be an integer"));
    let resolution = args.get(2).map_or(224, |s| s.parse().expect("resolution must be an integer"));
    let r = bench(&variant, stage, resolution, 3)?;
    println!("{} stage {stage} at {resolution}²: side {}, {} channels", r.variant, r.side, r.channels);
    for b in &r.branches {
        println!(
            "  rate {:>2}: {:>3} windows, partition {:>8.1} us, attention {:>9.1} us ({:.2} GMAC/s)",
            b.rate, b.windows, b.partition_micros, b.attention.micros, b.attention.gmacs_per_s
        );
    }
    println!("  whole attention layer {:.1} us, conv block {:.1} us", r.attention_layer.micros, r.conv_block.micros);
    Ok(())
}
