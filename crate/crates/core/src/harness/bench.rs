//! Wall-clock cost of one stage's partitioning, attention branches, and
//! convolution block, next to their analytic multiply-accumulate counts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AtrousAttention, AttentionConfig};
use crate::autograd::Tape;
use crate::conv_block::{AtrousIrConv, ConvBlockConfig};
use crate::error::{Error, Result};
use crate::model::VariantConfig;
use crate::nn::{Init, LayerNorm};
use crate::partition::{partition_dilated, partition_windows};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct OpTiming {
    /// Fastest of the timed repetitions, in microseconds.
    pub micros: f64,
    pub macs: u64,
    /// Achieved throughput, GMAC/s.
    pub gmacs_per_s: f64,
}

impl OpTiming {
    fn new(micros: f64, macs: u64) -> Self {
        let gmacs_per_s = if micros > 0.0 { macs as f64 / micros / 1e3 } else { 0.0 };
        OpTiming { micros, macs, gmacs_per_s }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BranchBench {
    pub level: u32,
    pub rate: usize,
    pub window: usize,
    pub windows: usize,
    pub partition_micros: f64,
    pub attention: OpTiming,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub stage: usize,
    pub resolution: usize,
    pub side: usize,
    pub channels: usize,
    pub batch: usize,
    pub repeats: usize,
    pub branches: Vec<BranchBench>,
    pub attention_layer: OpTiming,
    pub conv_block: OpTiming,
}

fn best_of<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(best)
}

/// Times stage `stage` (1-based) of `variant` at `resolution` on a random
/// single-image batch.
pub fn bench(variant: &VariantConfig, stage: usize, resolution: usize, repeats: usize) -> Result<BenchReport> {
    let sides = variant.stage_sides(resolution)?;
    let s = variant
        .stages
        .get(stage.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("stage must be in 1..={}, got {stage}", variant.stages.len())))?;
    let side = sides[stage];
    let c = s.channels;
    let batch = 1;
    let mut init = Init::new(0);
    let cfg = AttentionConfig {
        dim: c,
        levels: s.dilation_levels,
        window: variant.window,
        head_dim: variant.head_dim,
        mlp_ratio: variant.mlp_ratio,
        input_hw: (side, side),
    };
    let layer = AtrousAttention::<f32>::new(&mut init, "attn", cfg)?;
    let conv = AtrousIrConv::<f32>::new(
        &mut init,
        "conv",
        ConvBlockConfig { expansion: variant.expansion, ..ConvBlockConfig::new(c, c, 1) },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::from_fn(&[batch, c, side, side], |_| rng.random_range(-1.0..1.0))?;

    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let normed = tape.layer_norm_channels(&xv, &tape.param(&layer.norm.gamma), &tape.param(&layer.norm.beta), LayerNorm::<f32>::EPS)?;
    let mut branches = Vec::new();
    for (i, geo) in layer.geometry.iter().enumerate() {
        let partition_micros = best_of(repeats, || {
            let sub = if geo.level == 0 { x.clone() } else { partition_dilated(&x, &geo.partition)? };
            partition_windows(&sub, &geo.windows)
        })?;
        let micros = best_of(repeats, || layer.branch_forward(&tape, &xv, &normed, i))?;
        let windows = batch * geo.windows_per_item();
        branches.push(BranchBench {
            level: geo.level,
            rate: geo.partition.rate,
            window: geo.windows.window,
            windows,
            partition_micros,
            attention: OpTiming::new(micros, layer.branches[i].macs(windows)),
        });
    }
    let layer_micros = best_of(repeats, || layer.forward(&tape, &xv))?;
    let conv_micros = best_of(repeats, || conv.forward(&tape, &xv))?;
    Ok(BenchReport {
        variant: variant.name.clone(),
        stage,
        resolution,
        side,
        channels: c,
        batch,
        repeats,
        branches,
        attention_layer: OpTiming::new(layer_micros, batch as u64 * layer.macs()),
        conv_block: OpTiming::new(conv_micros, batch as u64 * conv.macs((side, side))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_one_has_four_branches() {
        let r = bench(&VariantConfig::micro(), 1, 64, 1).unwrap();
        assert_eq!(r.branches.len(), 4);
        assert_eq!(r.branches.iter().map(|b| b.rate).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        assert!(bench(&VariantConfig::micro(), 5, 64, 1).is_err());
        assert!(bench(&VariantConfig::micro(), 0, 64, 1).is_err());
    }
}
