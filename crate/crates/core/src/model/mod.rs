//! Full network: convolutional stem, four stages of
//! `[AtrousIrConv, AtrousAttention]` blocks, and a pooled linear classifier.

mod config;
mod summary;

pub use config::{StageConfig, StemConfig, Targets, VariantConfig, STAGE_LEVELS, VARIANT_NAMES};
pub use summary::{ModelSummary, PartSummary};

use crate::attention::{AtrousAttention, AttentionConfig};
use crate::autograd::{Tape, Var};
use crate::conv_block::{AtrousIrConv, ConvBlockConfig, Stem};
use crate::error::{Error, Result};
use crate::nn::{child, impl_module, Init, LayerNorm, Linear, Module};
use crate::tensor::{Scalar, Tensor};

/// Build-time choices that are not part of the architecture table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    pub num_classes: usize,
    pub seed: u64,
    /// Square input side the model is built for.
    pub resolution: usize,
    /// Std of the truncated-normal weight init.
    pub init_std: f64,
    /// Start the classifier at zero so initial logits are all zero.
    pub zero_head: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { num_classes: 1000, seed: 0, resolution: 224, init_std: 0.02, zero_head: false }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub conv: AtrousIrConv<T>,
    pub attn: AtrousAttention<T>,
}

impl_module!(Block { params: [], modules: [conv, attn], lists: [], options: [] });

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub blocks: Vec<Block<T>>,
    /// Map side entering the stage.
    pub input_side: usize,
    pub output_side: usize,
}

impl_module!(Stage { params: [], modules: [], lists: [blocks], options: [] });

#[derive(Clone, Debug)]
pub struct Head<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

impl_module!(Head { params: [], modules: [norm, fc], lists: [], options: [] });

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: VariantConfig,
    pub options: ModelOptions,
    pub stem: Stem<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Head<T>,
}

impl_module!(Model { params: [], modules: [stem, head], lists: [stages], options: [] });

impl<T: Scalar> Model<T> {
    pub fn build(config: &VariantConfig, options: ModelOptions) -> Result<Self> {
        if options.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let sides = config.stage_sides(options.resolution)?;
        let mut init = Init::with_std(options.seed, options.init_std);
        let stem = Stem::new(&mut init, "stem", 3, config.stem.channels);
        let mut cin = config.stem.channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let side = sides[i + 1];
            let mut blocks = Vec::with_capacity(s.blocks);
            for b in 0..s.blocks {
                let prefix = format!("stage{}.block{b}", i + 1);
                let conv_cfg = ConvBlockConfig {
                    expansion: config.expansion,
                    ..ConvBlockConfig::new(if b == 0 { cin } else { s.channels }, s.channels, if b == 0 { 2 } else { 1 })
                };
                let conv = AtrousIrConv::new(&mut init, &child(&prefix, "conv"), conv_cfg)?;
                let attn_cfg = AttentionConfig {
                    dim: s.channels,
                    levels: s.dilation_levels,
                    window: config.window,
                    head_dim: config.head_dim,
                    mlp_ratio: config.mlp_ratio,
                    input_hw: (side, side),
                };
                let attn = AtrousAttention::new(&mut init, &child(&prefix, "attn"), attn_cfg)?;
                blocks.push(Block { conv, attn });
            }
            stages.push(Stage { blocks, input_side: sides[i], output_side: side });
            cin = s.channels;
        }
        let mut head = Head {
            norm: LayerNorm::new(&mut init, "head.norm", cin),
            fc: Linear::new(&mut init, "head.fc", cin, options.num_classes),
        };
        if options.zero_head {
            head.fc.weight.set(head.fc.weight.value().zeros_like());
        }
        Ok(Model { config: config.clone(), options, stem, stages, head })
    }

    pub fn num_classes(&self) -> usize {
        self.options.num_classes
    }

    fn check_images(&self, x: &Var<T>) -> Result<()> {
        let r = self.options.resolution;
        match *x.dims() {
            [_, 3, h, w] if h == r && w == r => Ok(()),
            [_, 3, h, w] => {
                // Name the stage that would fail, if any, else the build size.
                if h == w {
                    self.config.stage_sides(h)?;
                }
                Err(Error::Config(format!(
                    "model was built for {r}×{r} inputs, got {h}×{w}; rebuild with that resolution"
                )))
            }
            _ => Err(crate::error::dim_err!("images must be (N, 3, {r}, {r}), got {:?}", x.dims())),
        }
    }

    /// Pooled, normalized features `(N, C_last)` before the classifier.
    pub fn features(&self, tape: &Tape<T>, images: &Var<T>) -> Result<Var<T>> {
        self.check_images(images)?;
        let mut x = self.stem.forward(tape, images)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.conv.forward(tape, &x)?;
                x = block.attn.forward(tape, &x)?;
            }
        }
        let pooled = tape.global_avg_pool(&x)?;
        tape.layer_norm(&pooled, &tape.param(&self.head.norm.gamma), &tape.param(&self.head.norm.beta), LayerNorm::<T>::EPS)
    }

    /// Logits `(N, num_classes)`.
    pub fn forward(&self, tape: &Tape<T>, images: &Var<T>) -> Result<Var<T>> {
        let f = self.features(tape, images)?;
        tape.linear(&f, &tape.param(&self.head.fc.weight), Some(&tape.param(&self.head.fc.bias)))
    }

    /// Untracked forward.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        Ok(self.forward(&tape, &tape.constant(images.clone()))?.into_tensor())
    }

    /// Branch count of every attention layer, per stage.
    pub fn branch_schedule(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|s| s.blocks.iter().map(|b| b.attn.branch_count()).collect())
            .collect()
    }

    pub fn count_params(&self) -> ModelSummary {
        ModelSummary::of(self)
    }

    /// Multiply-accumulates of one image at the build resolution.
    pub fn count_flops(&self) -> u64 {
        self.count_params().flops
    }

    /// True when every parameter tensor of `self` equals `other`'s bit for bit.
    pub fn same_weights(&self, other: &Model<T>) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(p, q)| p.name == q.name && p.value() == q.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::count_macs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, side, side], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn micro(seed: u64) -> Model<f32> {
        let opts = ModelOptions { num_classes: 2, seed, resolution: 64, ..Default::default() };
        Model::build(&VariantConfig::micro(), opts).unwrap()
    }

    #[test]
    fn builds_are_deterministic() {
        assert!(micro(3).same_weights(&micro(3)));
        assert!(!micro(3).same_weights(&micro(4)));
    }

    #[test]
    fn head_size_difference_is_closed_form() {
        let cfg = VariantConfig::tiny();
        let a = Model::<f32>::build(&cfg, ModelOptions { num_classes: 2, ..Default::default() }).unwrap();
        let b = Model::<f32>::build(&cfg, ModelOptions::default()).unwrap();
        let c4 = cfg.final_channels();
        assert_eq!(b.param_count() - a.param_count(), (1000 - 2) * (c4 + 1));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let opts = ModelOptions { num_classes: 2, resolution: 64, zero_head: true, ..Default::default() };
        let m = Model::<f32>::build(&VariantConfig::micro(), opts).unwrap();
        let logits = m.infer(&images(2, 64, 1)).unwrap();
        assert_eq!(logits.dims(), &[2, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_order_invariance() {
        let m = micro(1);
        let (a, b) = (images(1, 64, 1), images(2, 64, 2));
        let joint = m.infer(&Tensor::concat_batch(&[&a, &b]).unwrap()).unwrap();
        let split = Tensor::concat_batch(&[&m.infer(&a).unwrap(), &m.infer(&b).unwrap()]).unwrap();
        assert_eq!(joint, split);
    }

    #[test]
    fn schedule_and_flops_cross_check() {
        let m = micro(0);
        assert_eq!(m.branch_schedule(), vec![vec![4], vec![3], vec![2], vec![1]]);
        let x = images(2, 64, 0);
        let (_, macs) = count_macs(|| m.infer(&x).unwrap());
        assert_eq!(macs, 2 * m.count_flops());
    }

    #[test]
    fn wrong_resolution_is_a_config_error() {
        let m = micro(0);
        assert!(matches!(m.infer(&images(1, 32, 0)), Err(Error::Config(_))));
        let e = m.infer(&images(1, 48, 0)).unwrap_err().to_string();
        assert!(e.contains("stage"), "{e}");
    }
}
