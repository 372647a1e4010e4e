//! Windowed multi-head self-attention and the atrous attention layer.
//!
//! The layer runs one undilated branch plus one branch per dilation level
//! `k = 1..=L`. Branch `k` partitions the normalized map into `4^k` stride-`2^k`
//! sub-images, attends within windows of each sub-image, reassembles, and adds
//! the layer input. The branches are fused by an input-conditioned gate and
//! followed by a single MLP shared by all branches:
//!
//! ```text
//! y_k   = departition(W-MHSA(partition_k(LN(x)))) + x
//! y     = Σ_k g_k ⊙ y_k,   g = gate(x)
//! y_out = MLP(LN(y)) + y
//! ```

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::gating::{GateMixing, GateParams};
use crate::nn::{child, impl_module, Init, LayerNorm, Linear, Module, Param};
use crate::partition::{PartitionSpec, WindowSpec};
use crate::tensor::{Scalar, Tensor};

/// Flat table row for the offset between query `q` and key `k` of a `p×p` window.
pub fn rel_pos_index(p: usize, q: usize, k: usize) -> usize {
    let (qi, qj) = (q / p, q % p);
    let (ki, kj) = (k / p, k % p);
    let di = ki + p - 1 - qi;
    let dj = kj + p - 1 - qj;
    di * (2 * p - 1) + dj
}

fn rel_pos_indices(p: usize) -> Vec<usize> {
    let t = p * p;
    (0..t * t).map(|e| rel_pos_index(p, e / t, e % t)).collect()
}

/// Expands a `[(2P−1)², heads]` table into the `[heads, P², P²]` logit bias.
pub fn rel_pos_bias<T: Scalar>(p: usize, table: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(tape.rel_pos_bias(&tape.constant(table.clone()), p)?.into_tensor())
}

impl<T: Scalar> Tape<T> {
    pub fn rel_pos_bias(&self, table: &Var<T>, p: usize) -> Result<Var<T>> {
        let rows = (2 * p - 1) * (2 * p - 1);
        let heads = match *table.dims() {
            [r, h] if r == rows => h,
            _ => return Err(dim_err!("rel_pos_bias: table {:?} does not fit window {p}", table.dims())),
        };
        let t = p * p;
        let idx = rel_pos_indices(p);
        let td = table.value().data();
        let mut out = vec![T::ZERO; heads * t * t];
        for h in 0..heads {
            for (e, &i) in idx.iter().enumerate() {
                out[h * t * t + e] = td[i * heads + h];
            }
        }
        self.record("rel_pos_bias", Tensor::new(&[heads, t, t], out)?, &[table], move |g, _| {
            let mut d = vec![T::ZERO; rows * heads];
            for h in 0..heads {
                for (e, &i) in idx.iter().enumerate() {
                    d[i * heads + h] += g.data()[h * t * t + e];
                }
            }
            vec![Some(Tensor::new(&[rows, heads], d).unwrap())]
        })
    }
}

/// Multi-head self-attention within `P×P` windows of `C`-dim tokens.
#[derive(Clone, Debug)]
pub struct Wmhsa<T> {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub rel_pos: Param<T>,
}

impl_module!(Wmhsa { params: [rel_pos], modules: [qkv, proj], lists: [], options: [] });

impl<T: Scalar> Wmhsa<T> {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, head_dim: usize, window: usize) -> Result<Self> {
        if head_dim == 0 || dim % head_dim != 0 {
            return Err(Error::Config(format!("channels {dim} not divisible by head_dim {head_dim}")));
        }
        if window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        let heads = dim / head_dim;
        let span = 2 * window - 1;
        Ok(Wmhsa {
            dim,
            heads,
            head_dim,
            window,
            qkv: Linear::new(init, &child(prefix, "qkv"), dim, 3 * dim),
            proj: Linear::new(init, &child(prefix, "proj"), dim, dim),
            rel_pos: init.zeros(child(prefix, "rel_pos"), &[span * span, heads]),
        })
    }

    /// Returns the output `[B, P², C]` and the attention weights `[B·heads, P², P²]`.
    pub fn forward_with_weights(&self, tape: &Tape<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let t = self.window * self.window;
        let (b, c) = match *x.dims() {
            [b, tokens, c] if tokens == t && c == self.dim => (b, c),
            _ => {
                return Err(dim_err!(
                    "w_mhsa: expected [B, {t}, {}], got {:?}",
                    self.dim,
                    x.dims()
                ))
            }
        };
        let (h, hd) = (self.heads, self.head_dim);
        let qkv = tape.linear(x, &tape.param(&self.qkv.weight), Some(&tape.param(&self.qkv.bias)))?;
        let qkv = tape.reshape(&qkv, &[b, t, 3, h, hd])?;
        let qkv = tape.permute(&qkv, &[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var<T>> { tape.reshape(&tape.narrow(&qkv, 0, i, 1)?, &[b * h, t, hd]) };
        let q = tape.scale(&part(0)?, 1.0 / (hd as f64).sqrt())?;
        let (k, v) = (part(1)?, part(2)?);
        let logits = tape.reshape(&tape.bmm(&q, &k, true)?, &[b, h, t, t])?;
        let bias = tape.rel_pos_bias(&tape.param(&self.rel_pos), self.window)?;
        let logits = tape.add_broadcast(&logits, &bias)?;
        let attn = tape.reshape(&tape.softmax_lastdim(&logits)?, &[b * h, t, t])?;
        let ctx = tape.reshape(&tape.bmm(&attn, &v, false)?, &[b, h, t, hd])?;
        let ctx = tape.reshape(&tape.permute(&ctx, &[0, 2, 1, 3])?, &[b, t, c])?;
        let out = tape.linear(&ctx, &tape.param(&self.proj.weight), Some(&tape.param(&self.proj.bias)))?;
        Ok((out, attn))
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }

    /// Multiply-accumulates for `windows` windows.
    pub fn macs(&self, windows: usize) -> u64 {
        let (t, c) = ((self.window * self.window) as u64, self.dim as u64);
        let b = windows as u64;
        b * t * c * 3 * c + 2 * b * t * t * c + b * t * c * c
    }
}

/// Untracked W-MHSA over `[B, P², C]` windows.
pub fn w_mhsa<T: Scalar>(windows: &Tensor<T>, params: &Wmhsa<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(params.forward(&tape, &tape.constant(windows.clone()))?.into_tensor())
}

/// Geometry of one attention branch at a fixed input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchGeometry {
    pub level: u32,
    pub partition: PartitionSpec,
    pub windows: WindowSpec,
}

impl BranchGeometry {
    pub fn new(level: u32, hw: (usize, usize), window: usize) -> Result<Self> {
        let to_config = |e: Error| Error::Config(format!("dilation level {level} at {hw:?}: {e}"));
        let partition = PartitionSpec::new(level, hw).map_err(to_config)?;
        let side = partition.sub_hw.0.min(partition.sub_hw.1);
        let windows = WindowSpec::new(window.min(side), partition.sub_hw).map_err(to_config)?;
        Ok(BranchGeometry { level, partition, windows })
    }

    /// Windows attended per input item.
    pub fn windows_per_item(&self) -> usize {
        self.partition.sub_images() * self.windows.windows_per_item()
    }
}

/// Per-token MLP `C -> ratio·C -> C` with GELU.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl_module!(Mlp { params: [], modules: [fc1, fc2], lists: [], options: [] });

impl<T: Scalar> Mlp<T> {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, &child(prefix, "fc1"), dim, hidden),
            fc2: Linear::new(init, &child(prefix, "fc2"), hidden, dim),
        }
    }

    /// Applies the MLP at every pixel of an `(N, C, H, W)` map.
    pub fn forward_map(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = tape.pointwise_conv(x, &tape.param(&self.fc1.weight), Some(&tape.param(&self.fc1.bias)))?;
        let h = tape.gelu(&h)?;
        tape.pointwise_conv(&h, &tape.param(&self.fc2.weight), Some(&tape.param(&self.fc2.bias)))
    }
}

/// Construction parameters of an [`AtrousAttention`] layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    /// Highest dilation level; the layer has `levels + 1` branches.
    pub levels: u32,
    pub window: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub input_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct AtrousAttention<T> {
    pub config: AttentionConfig,
    pub geometry: Vec<BranchGeometry>,
    pub norm: LayerNorm<T>,
    pub branches: Vec<Wmhsa<T>>,
    pub gate: GateParams<T>,
    pub mlp_norm: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl_module!(AtrousAttention { params: [], modules: [norm, gate, mlp_norm, mlp], lists: [branches], options: [] });

impl<T: Scalar> AtrousAttention<T> {
    pub fn new(init: &mut Init, prefix: &str, config: AttentionConfig) -> Result<Self> {
        let geometry = (0..=config.levels)
            .map(|k| BranchGeometry::new(k, config.input_hw, config.window))
            .collect::<Result<Vec<_>>>()?;
        let c = config.dim;
        let norm = LayerNorm::new(init, &child(prefix, "norm"), c);
        let branches = geometry
            .iter()
            .map(|g| {
                let name = child(prefix, &format!("branch{}", g.level));
                Wmhsa::new(init, &name, c, config.head_dim, g.windows.window)
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = GateParams::new(init, &child(prefix, "gate"), GateMixing::Dense, branches.len(), c);
        let mlp_norm = LayerNorm::new(init, &child(prefix, "mlp_norm"), c);
        let mlp = Mlp::new(init, &child(prefix, "mlp"), c, config.mlp_ratio * c);
        Ok(AtrousAttention { config, geometry, norm, branches, gate, mlp_norm, mlp })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        match *x.dims() {
            [_, c, h, w] if c == self.config.dim && (h, w) == self.config.input_hw => Ok(()),
            _ => Err(dim_err!(
                "atrous attention built for C={} at {:?}, got {:?}",
                self.config.dim,
                self.config.input_hw,
                x.dims()
            )),
        }
    }

    /// Full-resolution output of one branch, residual included.
    pub fn branch_forward(&self, tape: &Tape<T>, x: &Var<T>, normed: &Var<T>, i: usize) -> Result<Var<T>> {
        let geo = &self.geometry[i];
        let sub = if geo.level == 0 { normed.clone() } else { tape.partition_dilated(normed, &geo.partition)? };
        let win = tape.partition_windows(&sub, &geo.windows)?;
        let att = self.branches[i].forward(tape, &win)?;
        let sub = tape.departition_windows(&att, &geo.windows)?;
        let full = if geo.level == 0 { sub } else { tape.departition_dilated(&sub, &geo.partition)? };
        tape.add(&full, x)
    }

    /// The gated fusion of all branches, before the MLP.
    pub fn fused(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x)?;
        let normed = tape.layer_norm_channels(
            x,
            &tape.param(&self.norm.gamma),
            &tape.param(&self.norm.beta),
            LayerNorm::<T>::EPS,
        )?;
        let ys = (0..self.branches.len())
            .map(|i| self.branch_forward(tape, x, &normed, i))
            .collect::<Result<Vec<_>>>()?;
        let g = self.gate.compute(tape, x)?;
        let refs: Vec<&Var<T>> = ys.iter().collect();
        tape.fuse(&refs, &g)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.fused(tape, x)?;
        let n = tape.layer_norm_channels(
            &y,
            &tape.param(&self.mlp_norm.gamma),
            &tape.param(&self.mlp_norm.beta),
            LayerNorm::<T>::EPS,
        )?;
        let m = self.mlp.forward_map(tape, &n)?;
        tape.add(&m, &y)
    }

    /// Multiply-accumulates per input item.
    pub fn macs(&self) -> u64 {
        let (h, w) = self.config.input_hw;
        let hw = (h * w) as u64;
        let c = self.config.dim as u64;
        let k = self.branches.len() as u64;
        let attn: u64 = self
            .geometry
            .iter()
            .zip(&self.branches)
            .map(|(g, b)| b.macs(g.windows_per_item()))
            .sum();
        let gate = hw * c * k * c;
        let mlp = 2 * hw * c * self.config.mlp_ratio as u64 * c;
        attn + gate + mlp
    }

    /// Number of distinct MLPs in the layer's parameter registry.
    pub fn mlp_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.name.ends_with("mlp.fc1.weight") as usize);
        n
    }
}

/// Untracked layer forward.
pub fn atrous_attention_forward<T: Scalar>(x: &Tensor<T>, layer: &AtrousAttention<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(layer.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}
