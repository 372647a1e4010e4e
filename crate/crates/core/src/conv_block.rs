//! Parallel atrous inverted-residual convolution, squeeze-excitation, and the
//! convolutional stem.
//!
//! Block data flow (`E = expansion · C_out` hidden channels):
//!
//! ```text
//! e  = GELU(expand(LN(x)))                         C_in -> E, input resolution
//! y_d = GELU(DWConv3x3_dil=d,stride=s(e))          d = 1, 2, 3
//! f  = Σ_d g_d ⊙ y_d,  g = gate(e[::s, ::s])       channelwise gate over E
//! out = shortcut(x) + project(SE(f))               E -> C_out
//! ```
//!
//! The shortcut is the identity when `s = 1` and `C_in = C_out`, otherwise a
//! 1×1 convolution on the stride-`s` subsampled input.

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::gating::{GateMixing, GateParams};
use crate::nn::{child, impl_module, Init, LayerNorm, Linear, Param};
use crate::tensor::kernels::conv_out_len;
use crate::tensor::{Scalar, Tensor};

pub const DILATIONS: [usize; 3] = [1, 2, 3];

/// Squeeze-excitation: `x ⊙ sigmoid(expand(SiLU(reduce(GAP(x)))))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T> {
    pub reduce: Linear<T>,
    pub expand: Linear<T>,
}

impl_module!(SqueezeExcite { params: [], modules: [reduce, expand], lists: [], options: [] });

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(init: &mut Init, prefix: &str, channels: usize, squeeze: usize) -> Self {
        SqueezeExcite {
            reduce: Linear::new(init, &child(prefix, "reduce"), channels, squeeze),
            expand: Linear::new(init, &child(prefix, "expand"), squeeze, channels),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.dims().get(1) != Some(&self.reduce.in_features()) {
            return Err(dim_err!("SE expects {} channels, got {:?}", self.reduce.in_features(), x.dims()));
        }
        let s = tape.global_avg_pool(x)?;
        let s = tape.linear(&s, &tape.param(&self.reduce.weight), Some(&tape.param(&self.reduce.bias)))?;
        let s = tape.silu(&s)?;
        let s = tape.linear(&s, &tape.param(&self.expand.weight), Some(&tape.param(&self.expand.bias)))?;
        let s = tape.sigmoid(&s)?;
        tape.scale_channels(x, &s)
    }

    /// Multiply-accumulates per item (pooling excluded).
    pub fn macs(&self) -> u64 {
        2 * (self.reduce.in_features() * self.reduce.out_features()) as u64
    }
}

/// Untracked squeeze-excitation.
pub fn se_apply<T: Scalar>(x: &Tensor<T>, p: &SqueezeExcite<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(p.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}

/// Depthwise 3×3 kernel `[C, 3, 3]` with bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub dilation: usize,
}

impl_module!(DepthwiseConv { params: [weight, bias], modules: [], lists: [], options: [] });

/// Dense 3×3 convolution `[C_out, C_in, 3, 3]` with bias, padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl_module!(Conv3x3 { params: [weight, bias], modules: [], lists: [], options: [] });

impl<T: Scalar> Conv3x3<T> {
    pub fn new(init: &mut Init, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Conv3x3 {
            weight: init.trunc_normal(child(prefix, "weight"), &[cout, cin, 3, 3]),
            bias: init.zeros(child(prefix, "bias"), &[cout]),
            stride,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.conv3x3(x, &tape.param(&self.weight), Some(&tape.param(&self.bias)), self.stride)
    }
}

/// Two 3×3 convolutions, the first with stride 2, GELU in between.
#[derive(Clone, Debug)]
pub struct Stem<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
}

impl_module!(Stem { params: [], modules: [conv1, conv2], lists: [], options: [] });

impl<T: Scalar> Stem<T> {
    pub fn new(init: &mut Init, prefix: &str, cin: usize, channels: usize) -> Self {
        Stem {
            conv1: Conv3x3::new(init, &child(prefix, "conv1"), cin, channels, 2),
            conv2: Conv3x3::new(init, &child(prefix, "conv2"), channels, channels, 1),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv1.forward(tape, x)?;
        let y = tape.gelu(&y)?;
        self.conv2.forward(tape, &y)
    }

    pub fn macs(&self, (h, w): (usize, usize)) -> u64 {
        let (ho, wo) = (conv_out_len(h, 2), conv_out_len(w, 2));
        let cin = self.conv1.weight.value().dims()[1];
        let c = self.conv1.weight.value().dims()[0];
        (ho * wo * c * 9 * (cin + c)) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// Hidden width is `expansion · cout`.
    pub expansion: usize,
    /// SE bottleneck is `cout / se_ratio`.
    pub se_ratio: usize,
}

impl ConvBlockConfig {
    pub fn new(cin: usize, cout: usize, stride: usize) -> Self {
        ConvBlockConfig { cin, cout, stride, expansion: 4, se_ratio: 4 }
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.cout
    }

    pub fn squeeze(&self) -> usize {
        (self.cout / self.se_ratio).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct AtrousIrConv<T> {
    pub config: ConvBlockConfig,
    pub norm: LayerNorm<T>,
    pub expand: Linear<T>,
    pub branches: Vec<DepthwiseConv<T>>,
    pub gate: GateParams<T>,
    pub se: SqueezeExcite<T>,
    pub project: Linear<T>,
    pub shortcut: Option<Linear<T>>,
}

impl_module!(AtrousIrConv {
    params: [],
    modules: [norm, expand, gate, se, project],
    lists: [branches],
    options: [shortcut]
});

impl<T: Scalar> AtrousIrConv<T> {
    pub fn new(init: &mut Init, prefix: &str, config: ConvBlockConfig) -> Result<Self> {
        let ConvBlockConfig { cin, cout, stride, .. } = config;
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("conv block stride must be 1 or 2, got {stride}")));
        }
        if cin == 0 || cout == 0 || config.expansion == 0 || config.se_ratio == 0 {
            return Err(Error::Config(format!("invalid conv block widths {config:?}")));
        }
        let e = config.hidden();
        let norm = LayerNorm::new(init, &child(prefix, "norm"), cin);
        let expand = Linear::new(init, &child(prefix, "expand"), cin, e);
        let branches = DILATIONS
            .iter()
            .map(|&d| DepthwiseConv {
                weight: init.trunc_normal(child(prefix, &format!("dw{d}.weight")), &[e, 3, 3]),
                bias: init.zeros(child(prefix, &format!("dw{d}.bias")), &[e]),
                dilation: d,
            })
            .collect();
        let gate = GateParams::new(init, &child(prefix, "gate"), GateMixing::Channelwise, DILATIONS.len(), e);
        let se = SqueezeExcite::new(init, &child(prefix, "se"), e, config.squeeze());
        let project = Linear::new(init, &child(prefix, "project"), e, cout);
        let shortcut = (stride != 1 || cin != cout).then(|| Linear::new(init, &child(prefix, "shortcut"), cin, cout));
        Ok(AtrousIrConv { config, norm, expand, branches, gate, se, project, shortcut })
    }

    /// Expanded map `e` that feeds the dilated branches.
    pub fn expanded(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        match *x.dims() {
            [_, c, _, _] if c == self.config.cin => {}
            _ => return Err(dim_err!("conv block expects {} input channels, got {:?}", self.config.cin, x.dims())),
        }
        let n = tape.layer_norm_channels(
            x,
            &tape.param(&self.norm.gamma),
            &tape.param(&self.norm.beta),
            LayerNorm::<T>::EPS,
        )?;
        let e = tape.pointwise_conv(&n, &tape.param(&self.expand.weight), Some(&tape.param(&self.expand.bias)))?;
        tape.gelu(&e)
    }

    /// Everything after fusion: SE, projection, and the residual sum.
    pub fn finish(&self, tape: &Tape<T>, x: &Var<T>, fused: &Var<T>) -> Result<Var<T>> {
        let s = self.se.forward(tape, fused)?;
        let y = tape.pointwise_conv(&s, &tape.param(&self.project.weight), Some(&tape.param(&self.project.bias)))?;
        let skip = match &self.shortcut {
            None => x.clone(),
            Some(sc) => {
                let xs = if self.config.stride == 1 { x.clone() } else { tape.subsample(x, self.config.stride)? };
                tape.pointwise_conv(&xs, &tape.param(&sc.weight), Some(&tape.param(&sc.bias)))?
            }
        };
        tape.add(&skip, &y)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let e = self.expanded(tape, x)?;
        let s = self.config.stride;
        let ys = self
            .branches
            .iter()
            .map(|b| {
                let y = tape.depthwise_conv3x3(&e, &tape.param(&b.weight), Some(&tape.param(&b.bias)), b.dilation, s)?;
                tape.gelu(&y)
            })
            .collect::<Result<Vec<_>>>()?;
        let gate_in = if s == 1 { e } else { tape.subsample(&e, s)? };
        let g = self.gate.compute(tape, &gate_in)?;
        let refs: Vec<&Var<T>> = ys.iter().collect();
        let fused = tape.fuse(&refs, &g)?;
        self.finish(tape, x, &fused)
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (conv_out_len(h, self.config.stride), conv_out_len(w, self.config.stride))
    }

    /// Multiply-accumulates per input item at input size `hw`.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let ConvBlockConfig { cin, cout, .. } = self.config;
        let e = self.config.hidden() as u64;
        let (ho, wo) = self.output_hw(hw);
        let (pin, pout) = ((hw.0 * hw.1) as u64, (ho * wo) as u64);
        let k = self.branches.len() as u64;
        let expand = pin * cin as u64 * e;
        let depthwise = k * pout * e * 9;
        let gate = pout * k * e;
        let project = pout * e * cout as u64;
        let shortcut = if self.shortcut.is_some() { pout * (cin * cout) as u64 } else { 0 };
        expand + depthwise + gate + self.se.macs() + project + shortcut
    }
}

/// Untracked block forward.
pub fn atrous_ir_conv_forward<T: Scalar>(x: &Tensor<T>, block: &AtrousIrConv<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(block.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::count_macs;
    use crate::nn::Module;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn zero_all(block: &mut AtrousIrConv<f64>) {
        block.visit_params_mut(&mut |p| {
            if !p.name.contains("norm") {
                p.set(p.value().zeros_like());
            }
        });
    }

    #[test]
    fn se_with_zero_params_halves() {
        let mut se = SqueezeExcite::<f64>::new(&mut Init::new(0), "se", 8, 2);
        se.visit_params_mut(&mut |p| p.set(p.value().zeros_like()));
        let x = random(&[2, 8, 3, 3], 1);
        assert!(se_apply(&x, &se).unwrap().max_abs_diff(&x.map(|v| v / 2.0)) < 1e-15);
        se.expand.bias.set(Tensor::full(&[8], 40.0).unwrap());
        assert!(se_apply(&x, &se).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn se_hand_computed_scale() {
        // C=2, squeeze 1, constant input: pooled = (1, 2).
        let mut se = SqueezeExcite::<f64>::new(&mut Init::new(0), "se", 2, 1);
        se.reduce.weight.set(Tensor::new(&[1, 2], vec![0.5, 0.25]).unwrap());
        se.reduce.bias.set(Tensor::new(&[1], vec![-0.5]).unwrap());
        se.expand.weight.set(Tensor::new(&[2, 1], vec![2.0, -1.0]).unwrap());
        se.expand.bias.set(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 1.0 } else { 2.0 }).unwrap();
        // z = 0.5 + 0.5 - 0.5 = 0.5; silu(0.5) = 0.5·σ(0.5)
        let h = 0.5 / (1.0 + (-0.5f64).exp());
        let s0 = 1.0 / (1.0 + (-2.0 * h).exp());
        let s1 = 1.0 / (1.0 + (h - 1.0).exp());
        let out = se_apply(&x, &se).unwrap();
        assert!((out.data()[0] - s0).abs() < 1e-14);
        assert!((out.data()[4] - 2.0 * s1).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_make_the_block_an_identity() {
        let mut b = AtrousIrConv::<f64>::new(&mut Init::new(0), "b", ConvBlockConfig::new(8, 8, 1)).unwrap();
        zero_all(&mut b);
        let x = random(&[2, 8, 6, 6], 3);
        assert_eq!(atrous_ir_conv_forward(&x, &b).unwrap(), x);
    }

    #[test]
    fn collapse_the_branches() {
        let mut b = AtrousIrConv::<f64>::new(&mut Init::with_std(2, 0.3), "b", ConvBlockConfig::new(4, 4, 1)).unwrap();
        for d in &mut b.branches {
            let e = d.weight.value().dims()[0];
            d.weight.set(Tensor::from_fn(&[e, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }).unwrap());
        }
        b.gate.freeze_uniform();
        let x = random(&[1, 4, 5, 5], 4);
        let out = atrous_ir_conv_forward(&x, &b).unwrap();
        // Straight-line reference without the depthwise branches or the gate.
        let tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let e = b.expanded(&tape, &xv).unwrap();
        let y = b.finish(&tape, &xv, &tape.gelu(&e).unwrap()).unwrap();
        assert!(out.max_abs_diff(y.value()) < 1e-14);
    }

    #[test]
    fn constant_map_branches_agree_in_the_interior() {
        let mut b = AtrousIrConv::<f64>::new(&mut Init::with_std(5, 0.3), "b", ConvBlockConfig::new(2, 2, 1)).unwrap();
        let shared = b.branches[0].weight.value().clone();
        for d in &mut b.branches {
            d.weight.set(shared.clone());
        }
        let x = Tensor::full(&[1, 2, 9, 9], 0.7).unwrap();
        let tape = Tape::no_grad();
        let e = b.expanded(&tape, &tape.constant(x)).unwrap();
        let ys: Vec<_> = b
            .branches
            .iter()
            .map(|d| tape.depthwise_conv3x3(&e, &tape.param(&d.weight), None, d.dilation, 1).unwrap())
            .collect();
        for c in 0..8 {
            for i in 3..6 {
                for j in 3..6 {
                    let v0 = ys[0].value().get(&[0, c, i, j]);
                    for y in &ys[1..] {
                        assert!((y.value().get(&[0, c, i, j]) - v0).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn stride_two_shapes_and_shortcut() {
        let b = AtrousIrConv::<f64>::new(&mut Init::new(0), "b", ConvBlockConfig::new(4, 8, 2)).unwrap();
        assert!(b.shortcut.is_some());
        let out = atrous_ir_conv_forward(&random(&[2, 4, 8, 8], 0), &b).unwrap();
        assert_eq!(out.dims(), &[2, 8, 4, 4]);
        let same = AtrousIrConv::<f64>::new(&mut Init::new(0), "b", ConvBlockConfig::new(8, 8, 1)).unwrap();
        assert!(same.shortcut.is_none());
        assert!(AtrousIrConv::<f64>::new(&mut Init::new(0), "b", ConvBlockConfig::new(8, 8, 3)).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        for (cin, cout, stride) in [(8, 8, 1), (8, 16, 2), (64, 128, 2)] {
            let b = AtrousIrConv::<f32>::new(&mut Init::new(0), "b", ConvBlockConfig::new(cin, cout, stride)).unwrap();
            let e = 4 * cout;
            let q = cout / 4;
            let shortcut = if stride != 1 || cin != cout { cin * cout + cout } else { 0 };
            let expected = 2 * cin
                + (cin * e + e)
                + 3 * (9 * e + e)
                + 2 * 3 * e
                + (e * q + q + q * e + e)
                + (e * cout + cout)
                + shortcut;
            assert_eq!(b.param_count(), expected);
        }
    }

    #[test]
    fn analytic_macs_match_instrumented_count() {
        for (cin, cout, stride, side) in [(8, 16, 2, 8), (8, 8, 1, 6), (3, 4, 2, 7)] {
            let b = AtrousIrConv::<f64>::new(&mut Init::new(0), "b", ConvBlockConfig::new(cin, cout, stride)).unwrap();
            let x = random(&[2, cin, side, side], 0);
            let (_, macs) = count_macs(|| atrous_ir_conv_forward(&x, &b).unwrap());
            assert_eq!(macs, 2 * b.macs((side, side)));
        }
        let stem = Stem::<f64>::new(&mut Init::new(0), "s", 3, 8);
        let tape = Tape::no_grad();
        let x = tape.constant(random(&[1, 3, 16, 16], 0));
        let (y, macs) = count_macs(|| stem.forward(&tape, &x).unwrap());
        assert_eq!(y.dims(), &[1, 8, 8, 8]);
        assert_eq!(macs, stem.macs((16, 16)));
        let ratio = stem.macs((224, 224)) as f64 / stem.macs((112, 112)) as f64;
        assert!((ratio - 4.0).abs() < 1e-12);
    }
}
