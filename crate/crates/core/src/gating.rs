//! Input-conditioned softmax gates that fuse `k` parallel branches.
//!
//! `g = softmax_k(GELU(mix(x)))`, then `y = Σ_i g_i ⊙ y_i`. The mixing map is
//! applied per pixel, either as a dense `C -> k·C` channel map (a 1×1 conv) or
//! channelwise, where branch logit `i` of channel `c` only sees channel `c`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::nn::{child, impl_module, Init, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMixing {
    /// Weight `[k·C, C]`, bias `[k·C]`.
    Dense,
    /// Weight `[k, C]`, bias `[k, C]`.
    Channelwise,
}

#[derive(Clone, Debug)]
pub struct GateParams<T> {
    pub mixing: GateMixing,
    pub branches: usize,
    pub channels: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl_module!(GateParams { params: [weight, bias], modules: [], lists: [], options: [] });

impl<T: Scalar> GateParams<T> {
    pub fn new(init: &mut Init, prefix: &str, mixing: GateMixing, branches: usize, channels: usize) -> Self {
        assert!(branches >= 1 && channels >= 1, "gate needs at least one branch and channel");
        let (w, b): (Vec<usize>, Vec<usize>) = match mixing {
            GateMixing::Dense => (vec![branches * channels, channels], vec![branches * channels]),
            GateMixing::Channelwise => (vec![branches, channels], vec![branches, channels]),
        };
        GateParams {
            mixing,
            branches,
            channels,
            weight: init.trunc_normal(child(prefix, "weight"), &w),
            bias: init.zeros(child(prefix, "bias"), &b),
        }
    }

    /// Zero weights and bias, optionally excluded from training. Gates are
    /// then uniform (`1/k`), which reduces fusion to plain averaging.
    pub fn freeze_uniform(&mut self) {
        for p in [&mut self.weight, &mut self.bias] {
            p.set(p.value().zeros_like());
            p.trainable = false;
        }
    }

    /// Gate logits before the softmax, `(N, k, C, H, W)`.
    fn logits(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = match *x.dims() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(dim_err!("gate: expected (N, C, H, W), got {:?}", x.dims())),
        };
        if c != self.channels {
            return Err(dim_err!("gate: input has {c} channels, gate expects {}", self.channels));
        }
        let (wv, bv) = (tape.param(&self.weight), tape.param(&self.bias));
        let mixed = match self.mixing {
            GateMixing::Dense => tape.pointwise_conv(x, &wv, Some(&bv))?,
            GateMixing::Channelwise => tape.branch_affine(x, &wv, &bv)?,
        };
        tape.reshape(&mixed, &[n, self.branches, c, h, w])
    }

    /// `(N, C, H, W) -> (N, k, C, H, W)` with every `[n, :, c, i, j]` on the simplex.
    pub fn compute(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let z = self.logits(tape, x)?;
        let a = tape.gelu(&z)?;
        tape.softmax_axis(&a, 1)
    }
}

/// Untracked evaluation of the gates.
pub fn compute_gates<T: Scalar>(x: &Tensor<T>, params: &GateParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    Ok(params.compute(&tape, &xv)?.into_tensor())
}

/// Untracked gated fusion.
pub fn fuse<T: Scalar>(branches: &[Tensor<T>], g: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let vars: Vec<Var<T>> = branches.iter().map(|b| tape.constant(b.clone())).collect();
    let refs: Vec<&Var<T>> = vars.iter().collect();
    Ok(tape.fuse(&refs, &tape.constant(g.clone()))?.into_tensor())
}

impl<T: Scalar> Tape<T> {
    /// `out[n, i, c, ...] = w[i, c]·x[n, c, ...] + b[i, c]`: `k` per-channel
    /// affine copies of `x: (N, C, H, W)` stacked as `(N, k·C, H, W)`.
    pub fn branch_affine(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, wd) = match *x.dims() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(dim_err!("branch_affine: expected (N, C, H, W), got {:?}", x.dims())),
        };
        let k = w.dims()[0];
        if w.dims() != [k, c] || b.dims() != [k, c] {
            return Err(dim_err!("branch_affine: weight {:?} / bias {:?} vs {c} channels", w.dims(), b.dims()));
        }
        let hw = h * wd;
        let (xd, wdat, bd) = (x.value().data(), w.value().data(), b.value().data());
        let mut out = Vec::with_capacity(n * k * c * hw);
        for item in 0..n {
            for i in 0..k {
                for ch in 0..c {
                    let (wv, bv) = (wdat[i * c + ch], bd[i * c + ch]);
                    let plane = &xd[(item * c + ch) * hw..(item * c + ch + 1) * hw];
                    out.extend(plane.iter().map(|&v| wv * v + bv));
                }
            }
        }
        crate::autograd::add_macs(n * k * c * hw);
        let (xv, wv) = (x.shared(), w.shared());
        self.record("branch_affine", Tensor::new(&[n, k * c, h, wd], out)?, &[x, w, b], move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let mut dx = vec![T::ZERO; if needs[0] { n * c * hw } else { 0 }];
            let mut dw = vec![T::ZERO; k * c];
            let mut db = vec![T::ZERO; k * c];
            for item in 0..n {
                for i in 0..k {
                    for ch in 0..c {
                        let gp = &gd[((item * k + i) * c + ch) * hw..][..hw];
                        let xp = &xd[(item * c + ch) * hw..][..hw];
                        let wv = wv.data()[i * c + ch];
                        let (mut sw, mut sb) = (T::ZERO, T::ZERO);
                        for (&gv, &xv) in gp.iter().zip(xp) {
                            sw += gv * xv;
                            sb += gv;
                        }
                        dw[i * c + ch] += sw;
                        db[i * c + ch] += sb;
                        if needs[0] {
                            let dp = &mut dx[(item * c + ch) * hw..][..hw];
                            for (d, &gv) in dp.iter_mut().zip(gp) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&[n, c, h, wd], dx).unwrap()),
                needs[1].then(|| Tensor::new(&[k, c], dw).unwrap()),
                needs[2].then(|| Tensor::new(&[k, c], db).unwrap()),
            ]
        })
    }

    /// `Σ_i g[:, i] ⊙ branches[i]` with `g: (N, k, ...)` and branches `(N, ...)`.
    pub fn fuse(&self, branches: &[&Var<T>], g: &Var<T>) -> Result<Var<T>> {
        let k = branches.len();
        let first = branches.first().ok_or_else(|| dim_err!("fuse: no branches"))?;
        let dims = first.dims().to_vec();
        if branches.iter().any(|b| b.dims() != dims.as_slice()) {
            return Err(dim_err!("fuse: branch shapes differ"));
        }
        let mut gdims = dims.clone();
        gdims.insert(1, k);
        if g.dims() != gdims.as_slice() {
            return Err(dim_err!("fuse: gates {:?} do not match {k} branches of {:?}", g.dims(), dims));
        }
        let n = dims[0];
        let inner = first.value().numel() / n;
        let gd = g.value().data();
        let mut out = vec![T::ZERO; n * inner];
        for (i, b) in branches.iter().enumerate() {
            let bd = b.value().data();
            for item in 0..n {
                let gp = &gd[(item * k + i) * inner..][..inner];
                let bp = &bd[item * inner..][..inner];
                for ((o, &gv), &bv) in out[item * inner..][..inner].iter_mut().zip(gp).zip(bp) {
                    *o += gv * bv;
                }
            }
        }
        let values: Vec<_> = branches.iter().map(|b| b.shared()).collect();
        let gv = g.shared();
        let mut inputs: Vec<&Var<T>> = branches.to_vec();
        inputs.push(g);
        self.record("fuse", Tensor::new(&dims, out)?, &inputs, move |grad, needs| {
            let gr = grad.data();
            let gd = gv.data();
            let mut res: Vec<Option<Tensor<T>>> = (0..k)
                .map(|i| {
                    needs[i].then(|| {
                        let mut d = vec![T::ZERO; n * inner];
                        for item in 0..n {
                            let gp = &gd[(item * k + i) * inner..][..inner];
                            for ((dv, &gv), &r) in d[item * inner..][..inner].iter_mut().zip(gp).zip(&gr[item * inner..]) {
                                *dv = gv * r;
                            }
                        }
                        tensor_with(&values[i], d)
                    })
                })
                .collect();
            res.push(needs[k].then(|| {
                let mut d = vec![T::ZERO; n * k * inner];
                for item in 0..n {
                    for (i, v) in values.iter().enumerate() {
                        let bp = &v.data()[item * inner..][..inner];
                        for ((dv, &bv), &r) in d[(item * k + i) * inner..][..inner].iter_mut().zip(bp).zip(&gr[item * inner..]) {
                            *dv = bv * r;
                        }
                    }
                }
                tensor_with(&gv, d)
            }));
            res
        })
    }
}

fn tensor_with<T: Scalar>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_shape(like.shape().clone(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-scale..scale)).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_gates() {
        for mixing in [GateMixing::Dense, GateMixing::Channelwise] {
            for k in 1..=4 {
                let mut p = GateParams::<f64>::new(&mut Init::new(0), "g", mixing, k, 3);
                p.freeze_uniform();
                let x = random(&[2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(k as u64), 5.0);
                let g = compute_gates(&x, &p).unwrap();
                assert_eq!(g.dims(), &[2, k, 3, 4, 4]);
                assert!(g.data().iter().all(|&v| (v - 1.0 / k as f64).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn single_branch_gate_is_one() {
        let p = GateParams::<f64>::new(&mut Init::with_std(3, 1.0), "g", GateMixing::Dense, 1, 4);
        let x = random(&[1, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(1), 3.0);
        assert!(compute_gates(&x, &p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crafted_logits_give_quarter_three_quarters() {
        // Pre-softmax (after GELU) logits (0, ln 3): softmax → (1/4, 3/4).
        // GELU(0) = 0; pick z with GELU(z) = ln 3 via bisection.
        let target = 3f64.ln();
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if crate::tensor::kernels::gelu(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut p = GateParams::<f64>::new(&mut Init::new(0), "g", GateMixing::Dense, 2, 1);
        p.weight.set(Tensor::zeros(&[2, 1]).unwrap());
        p.bias.set(Tensor::new(&[2], vec![0.0, lo]).unwrap());
        let g = compute_gates(&Tensor::full(&[1, 1, 1, 1], 2.0).unwrap(), &p).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-9 && (g.data()[1] - 0.75).abs() < 1e-9, "{:?}", g.data());
    }

    #[test]
    fn fuse_examples() {
        let a = Tensor::<f64>::full(&[1, 2, 2, 2], 4.0).unwrap();
        let b = Tensor::<f64>::full(&[1, 2, 2, 2], 8.0).unwrap();
        let g = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| if i < 8 { 0.25 } else { 0.75 }).unwrap();
        let y = fuse(&[a.clone(), b.clone()], &g).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let vertex = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| if i < 8 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(fuse(&[a.clone(), b], &vertex).unwrap(), a);
        assert!(fuse(&[a.clone()], &g).is_err());
    }

    #[test]
    fn channelwise_logits_only_see_own_channel() {
        let mut p = GateParams::<f64>::new(&mut Init::new(0), "g", GateMixing::Channelwise, 2, 2);
        p.weight.set(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![3.0, 5.0]).unwrap());
        let z = p.logits(&tape, &x).unwrap();
        assert_eq!(z.value().data(), &[3.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn frozen_gate_params_get_no_gradient() {
        let mut p = GateParams::<f64>::new(&mut Init::new(0), "g", GateMixing::Dense, 2, 2);
        p.freeze_uniform();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 2], 1.0).unwrap());
        let g = p.compute(&tape, &x).unwrap();
        let loss = tape.sum(&g).unwrap();
        // Gates do not depend on any tracked parameter, but x is tracked.
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.param(&p.weight).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gates_are_on_the_simplex_and_fusion_is_convex(seed in any::<u64>(), k in 1usize..5, dense in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mixing = if dense { GateMixing::Dense } else { GateMixing::Channelwise };
            let p = GateParams::<f64>::new(&mut Init::with_std(seed, 1.0), "g", mixing, k, 3);
            let x = random(&[2, 3, 3, 3], &mut rng, 4.0);
            let g = compute_gates(&x, &p).unwrap();
            let inner = 3 * 9;
            for n in 0..2 {
                for e in 0..inner {
                    let s: f64 = (0..k).map(|i| g.data()[(n * k + i) * inner + e]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let branches: Vec<_> = (0..k).map(|_| random(&[2, 3, 3, 3], &mut rng, 2.0)).collect();
            let y = fuse(&branches, &g).unwrap();
            for (e, &v) in y.data().iter().enumerate() {
                let lo = branches.iter().map(|b| b.data()[e]).fold(f64::INFINITY, f64::min);
                let hi = branches.iter().map(|b| b.data()[e]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            let same = vec![branches[0].clone(); k];
            prop_assert!(fuse(&same, &g).unwrap().max_abs_diff(&branches[0]) < 1e-12);
        }
    }
}
