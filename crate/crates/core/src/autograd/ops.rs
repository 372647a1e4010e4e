//! Differentiable primitives recorded on a [`Tape`].

use std::cell::Cell;
use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels::{self, Conv3x3Geom};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Runs `f` and returns the multiply-accumulates executed by forward ops on
/// this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(Cell::get);
    let out = f();
    let after = MACS.with(Cell::get);
    (out, after - before)
}

fn same_shape<T: Scalar>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

fn nchw<T: Scalar>(op: &str, x: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err!("{op}: expected (N, C, H, W), got {:?}", x.dims())),
    }
}

fn tensor_like<T: Scalar>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_shape(like.shape().clone(), data).expect("shape preserved")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    tensor_like(a, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        self.record("add", out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        self.record("sub", out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.shared(), b.shared());
        self.record("mul", out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |x, y| x * y)),
                needs[1].then(|| zip_map(g, &av, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, a: &Var<T>, s: f64) -> Result<Var<T>> {
        let s = T::from_f64(s);
        self.record("scale", a.value().map(|v| v * s), &[a], move |g, _| {
            vec![Some(g.map(|v| v * s))]
        })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let total = a.value().sum();
        let shape = a.value().shape().clone();
        self.record("sum", Tensor::scalar(total), &[a], move |g, _| {
            let n = shape.numel();
            vec![Some(Tensor::from_shape(shape.clone(), vec![g.data()[0]; n]).unwrap())]
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let n = a.value().numel();
        let s = self.sum(a)?;
        self.scale(&s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let out = a.value().reshape(dims)?;
        let in_dims = a.dims().to_vec();
        self.record("reshape", out, &[a], move |g, _| vec![Some(g.reshape(&in_dims).unwrap())])
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (m, k, k2, n) = match (a.dims(), b.dims()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => return Err(dim_err!("matmul: need 2-D operands, got {:?} {:?}", a.dims(), b.dims())),
        };
        if k != k2 {
            return Err(dim_err!("matmul: inner dims {k} and {k2} differ"));
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm(m, k, n, a.value().data(), b.value().data(), &mut out);
        add_macs(m * k * n);
        let (av, bv) = (a.shared(), b.shared());
        self.record("matmul", Tensor::new(&[m, n], out)?, &[a, b], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![T::ZERO; m * k];
                kernels::gemm_nt(m, n, k, g.data(), bv.data(), &mut d);
                Tensor::new(&[m, k], d).unwrap()
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::ZERO; k * n];
                kernels::gemm_tn(k, m, n, av.data(), g.data(), &mut d);
                Tensor::new(&[k, n], d).unwrap()
            });
            vec![da, db]
        })
    }

    /// Batched product: `a: [B, m, k]` times `b: [B, k, n]`, or `bᵀ` with
    /// `b: [B, n, k]` when `transpose_b` is set.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
        let (bs, m, k, bs2, r1, r2) = match (a.dims(), b.dims()) {
            (&[bs, m, k], &[bs2, r1, r2]) => (bs, m, k, bs2, r1, r2),
            _ => return Err(dim_err!("bmm: need 3-D operands, got {:?} {:?}", a.dims(), b.dims())),
        };
        let (kb, n) = if transpose_b { (r2, r1) } else { (r1, r2) };
        if bs != bs2 || k != kb {
            return Err(dim_err!("bmm: incompatible {:?} and {:?}", a.dims(), b.dims()));
        }
        let mut out = vec![T::ZERO; bs * m * n];
        let (ad, bd) = (a.value().data(), b.value().data());
        for i in 0..bs {
            let (ai, bi) = (&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n]);
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                kernels::gemm_nt(m, k, n, ai, bi, oi);
            } else {
                kernels::gemm(m, k, n, ai, bi, oi);
            }
        }
        add_macs(bs * m * k * n);
        let (av, bv) = (a.shared(), b.shared());
        let b_dims = b.dims().to_vec();
        self.record("bmm", Tensor::new(&[bs, m, n], out)?, &[a, b], move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut d = vec![T::ZERO; bs * m * k];
                for i in 0..bs {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let di = &mut d[i * m * k..(i + 1) * m * k];
                    if transpose_b {
                        kernels::gemm(m, n, k, gi, bi, di);
                    } else {
                        kernels::gemm_nt(m, n, k, gi, bi, di);
                    }
                }
                Tensor::new(&[bs, m, k], d).unwrap()
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::ZERO; bs * k * n];
                for i in 0..bs {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        kernels::gemm_tn(n, m, k, gi, ai, di);
                    } else {
                        kernels::gemm_tn(k, m, n, ai, gi, di);
                    }
                }
                Tensor::new(&b_dims, d).unwrap()
            });
            vec![da, db]
        })
    }

    /// Affine map over the last dimension: `x · wᵀ + bias`, `w: [out, in]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (cout, cin) = match *w.dims() {
            [o, i] => (o, i),
            _ => return Err(dim_err!("linear: weight must be [out, in], got {:?}", w.dims())),
        };
        let last = *x.dims().last().unwrap();
        if last != cin {
            return Err(dim_err!("linear: input features {last} != weight in-features {cin}"));
        }
        if let Some(b) = bias {
            if b.dims() != [cout] {
                return Err(dim_err!("linear: bias {:?} != [{cout}]", b.dims()));
            }
        }
        let rows = x.value().numel() / cin;
        let wt = kernels::transpose(cout, cin, w.value().data());
        let mut out = vec![T::ZERO; rows * cout];
        kernels::gemm(rows, cin, cout, x.value().data(), &wt, &mut out);
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(cout) {
                kernels::add_into(row, b.value().data());
            }
        }
        add_macs(rows * cin * cout);
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = cout;
        let (xv, wv) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("linear", Tensor::new(&dims, out)?, &inputs, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![T::ZERO; rows * cin];
                kernels::gemm(rows, cout, cin, gd, wv.data(), &mut d);
                tensor_like(&xv, d)
            });
            let dw = needs[1].then(|| {
                let mut d = vec![T::ZERO; cout * cin];
                kernels::gemm_tn(cout, rows, cin, gd, xv.data(), &mut d);
                Tensor::new(&[cout, cin], d).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::ZERO; cout];
                    for row in gd.chunks_exact(cout) {
                        kernels::add_into(&mut d, row);
                    }
                    Tensor::new(&[cout], d).unwrap()
                }));
            }
            grads
        })
    }

    /// 1×1 convolution over `(N, Cin, H, W)` with `w: [Cout, Cin]`.
    pub fn pointwise_conv(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (n, cin, h, wd) = nchw("pointwise_conv", x)?;
        let (cout, wcin) = match *w.dims() {
            [o, i] => (o, i),
            _ => return Err(dim_err!("pointwise_conv: weight must be [Cout, Cin], got {:?}", w.dims())),
        };
        if wcin != cin {
            return Err(dim_err!("pointwise_conv: input has {cin} channels, weight expects {wcin}"));
        }
        if let Some(b) = bias {
            if b.dims() != [cout] {
                return Err(dim_err!("pointwise_conv: bias {:?} != [{cout}]", b.dims()));
            }
        }
        let hw = h * wd;
        let mut out = vec![T::ZERO; n * cout * hw];
        let xd = x.value().data();
        for i in 0..n {
            let oi = &mut out[i * cout * hw..(i + 1) * cout * hw];
            kernels::gemm(cout, cin, hw, w.value().data(), &xd[i * cin * hw..(i + 1) * cin * hw], oi);
            if let Some(b) = bias {
                for (row, &bv) in oi.chunks_exact_mut(hw).zip(b.value().data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        add_macs(n * hw * cin * cout);
        let (xv, wv) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("pointwise_conv", Tensor::new(&[n, cout, h, wd], out)?, &inputs, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let wt = kernels::transpose(cout, cin, wv.data());
                let mut d = vec![T::ZERO; n * cin * hw];
                for i in 0..n {
                    kernels::gemm(cin, cout, hw, &wt, &gd[i * cout * hw..(i + 1) * cout * hw], &mut d[i * cin * hw..(i + 1) * cin * hw]);
                }
                tensor_like(&xv, d)
            });
            let dw = needs[1].then(|| {
                let mut acc = vec![T::ZERO; cout * cin];
                let mut tmp = vec![T::ZERO; cout * cin];
                for i in 0..n {
                    kernels::gemm_nt(cout, hw, cin, &gd[i * cout * hw..(i + 1) * cout * hw], &xv.data()[i * cin * hw..(i + 1) * cin * hw], &mut tmp);
                    kernels::add_into(&mut acc, &tmp);
                }
                Tensor::new(&[cout, cin], acc).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| channel_sums(gd, n, cout, hw)));
            }
            grads
        })
    }

    /// Per-channel 3×3 correlation, zero padding `dilation`, `w: [C, 3, 3]`.
    pub fn depthwise_conv3x3(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        dilation: usize,
        stride: usize,
    ) -> Result<Var<T>> {
        if dilation < 1 {
            return Err(Error::Parameter(format!("dilation must be >= 1, got {dilation}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Parameter(format!("stride must be 1 or 2, got {stride}")));
        }
        let (n, c, h, wd) = nchw("depthwise_conv3x3", x)?;
        if w.dims() != [c, 3, 3] {
            return Err(dim_err!("depthwise_conv3x3: weight {:?} != [{c}, 3, 3]", w.dims()));
        }
        if let Some(b) = bias {
            if b.dims() != [c] {
                return Err(dim_err!("depthwise_conv3x3: bias {:?} != [{c}]", b.dims()));
            }
        }
        let geom = Conv3x3Geom { h, w: wd, dilation, stride };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (hw, ohw) = (h * wd, ho * wo);
        let mut out = vec![T::ZERO; n * c * ohw];
        let (xd, wdat) = (x.value().data(), w.value().data());
        for i in 0..n {
            for ch in 0..c {
                let plane = &mut out[(i * c + ch) * ohw..(i * c + ch + 1) * ohw];
                kernels::depthwise_plane(&geom, &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw], &wdat[ch * 9..ch * 9 + 9], plane);
                if let Some(b) = bias {
                    let bv = b.value().data()[ch];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        add_macs(n * c * ohw * 9);
        let (xv, wv) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("depthwise_conv3x3", Tensor::new(&[n, c, ho, wo], out)?, &inputs, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::ZERO; n * c * hw]);
            let mut dw = needs[1].then(|| vec![T::ZERO; c * 9]);
            for i in 0..n {
                for ch in 0..c {
                    let idx = i * c + ch;
                    kernels::depthwise_plane_backward(
                        &geom,
                        &xv.data()[idx * hw..(idx + 1) * hw],
                        &wv.data()[ch * 9..ch * 9 + 9],
                        &gd[idx * ohw..(idx + 1) * ohw],
                        dx.as_mut().map(|d| &mut d[idx * hw..(idx + 1) * hw]),
                        dw.as_mut().map(|d| &mut d[ch * 9..ch * 9 + 9]),
                    );
                }
            }
            let mut grads = vec![
                dx.map(|d| tensor_like(&xv, d)),
                dw.map(|d| Tensor::new(&[c, 3, 3], d).unwrap()),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| channel_sums(gd, n, c, ohw)));
            }
            grads
        })
    }

    /// Dense 3×3 convolution with padding 1, `w: [Cout, Cin, 3, 3]`.
    pub fn conv3x3(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, stride: usize) -> Result<Var<T>> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Parameter(format!("stride must be 1 or 2, got {stride}")));
        }
        let (n, cin, h, wd) = nchw("conv3x3", x)?;
        let cout = match *w.dims() {
            [o, i, 3, 3] if i == cin => o,
            _ => return Err(dim_err!("conv3x3: weight {:?} incompatible with {cin} input channels", w.dims())),
        };
        if let Some(b) = bias {
            if b.dims() != [cout] {
                return Err(dim_err!("conv3x3: bias {:?} != [{cout}]", b.dims()));
            }
        }
        let geom = Conv3x3Geom { h, w: wd, dilation: 1, stride };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (hw, ohw, kk) = (h * wd, ho * wo, cin * 9);
        let mut out = vec![T::ZERO; n * cout * ohw];
        let xd = x.value().data();
        for i in 0..n {
            let cols = kernels::im2col(&geom, cin, &xd[i * cin * hw..(i + 1) * cin * hw]);
            let oi = &mut out[i * cout * ohw..(i + 1) * cout * ohw];
            kernels::gemm(cout, kk, ohw, w.value().data(), &cols, oi);
            if let Some(b) = bias {
                for (row, &bv) in oi.chunks_exact_mut(ohw).zip(b.value().data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        add_macs(n * ohw * cout * kk);
        let (xv, wv) = (x.shared(), w.shared());
        let w_dims = w.dims().to_vec();
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("conv3x3", Tensor::new(&[n, cout, ho, wo], out)?, &inputs, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::ZERO; n * cin * hw]);
            let mut dw = needs[1].then(|| vec![T::ZERO; cout * kk]);
            let wt = needs[0].then(|| kernels::transpose(cout, kk, wv.data()));
            let mut dcols = vec![T::ZERO; kk * ohw];
            let mut tmp = vec![T::ZERO; cout * kk];
            for i in 0..n {
                let gi = &gd[i * cout * ohw..(i + 1) * cout * ohw];
                if let Some(d) = dw.as_mut() {
                    let cols = kernels::im2col(&geom, cin, &xv.data()[i * cin * hw..(i + 1) * cin * hw]);
                    kernels::gemm_nt(cout, ohw, kk, gi, &cols, &mut tmp);
                    kernels::add_into(d, &tmp);
                }
                if let (Some(d), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
                    kernels::gemm(kk, cout, ohw, wt, gi, &mut dcols);
                    kernels::col2im(&geom, cin, &dcols, &mut d[i * cin * hw..(i + 1) * cin * hw]);
                }
            }
            let mut grads = vec![
                dx.map(|d| tensor_like(&xv, d)),
                dw.map(|d| Tensor::new(&w_dims, d).unwrap()),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| channel_sums(gd, n, cout, ohw)));
            }
            grads
        })
    }

    /// Mean over the spatial dims: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("global_avg_pool", x)?;
        let hw = h * w;
        let inv = T::ONE / T::from_usize(hw);
        let out: Vec<T> = x
            .value()
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().fold(T::ZERO, |a, &v| a + v) * inv)
            .collect();
        let in_dims = x.dims().to_vec();
        self.record("global_avg_pool", Tensor::new(&[n, c], out)?, &[x], move |g, _| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::new(&in_dims, d).unwrap())]
        })
    }

    fn unary(
        &self,
        op: &'static str,
        x: &Var<T>,
        f: fn(T) -> T,
        df: fn(T) -> T,
    ) -> Result<Var<T>> {
        let xv = x.shared();
        self.record(op, x.value().map(f), &[x], move |g, _| {
            vec![Some(zip_map(g, &xv, |gv, xv| gv * df(xv)))]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("gelu", x, kernels::gelu, kernels::gelu_grad)
    }

    pub fn silu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("silu", x, kernels::silu, kernels::silu_grad)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.value().map(kernels::sigmoid);
        let yv = Arc::new(y.clone());
        self.record("sigmoid", y, &[x], move |g, _| {
            vec![Some(zip_map(g, &yv, |gv, s| gv * s * (T::ONE - s)))]
        })
    }

    /// Layer normalization over `axis` with per-feature affine `gamma`, `beta`.
    pub fn layer_norm_axis(
        &self,
        x: &Var<T>,
        axis: usize,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        if axis >= x.value().rank() {
            return Err(dim_err!("layer_norm: axis {axis} out of range for {:?}", x.dims()));
        }
        let view = x.value().shape().split_at_axis(axis);
        let c = view.1;
        if gamma.dims() != [c] || beta.dims() != [c] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} do not match {c} features",
                gamma.dims(),
                beta.dims()
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (y, saved) = kernels::layer_norm_axis(
            x.value().data(),
            view,
            gamma.value().data(),
            beta.value().data(),
            T::from_f64(eps),
        );
        let out = tensor_like(x.value(), y);
        let (xv, gv) = (x.shared(), gamma.shared());
        self.record("layer_norm", out, &[x, gamma, beta], move |g, needs| {
            let (dx, dg, db) = kernels::layer_norm_axis_backward(g.data(), view, gv.data(), &saved);
            vec![
                needs[0].then(|| tensor_like(&xv, dx)),
                needs[1].then(|| Tensor::new(&[c], dg).unwrap()),
                needs[2].then(|| Tensor::new(&[c], db).unwrap()),
            ]
        })
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let axis = x.value().rank() - 1;
        self.layer_norm_axis(x, axis, gamma, beta, eps)
    }

    /// Layer normalization over channels of an `(N, C, H, W)` map.
    pub fn layer_norm_channels(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        nchw("layer_norm_channels", x)?;
        self.layer_norm_axis(x, 1, gamma, beta, eps)
    }

    pub fn softmax_axis(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis >= x.value().rank() {
            return Err(dim_err!("softmax: axis {axis} out of range for {:?}", x.dims()));
        }
        let view = x.value().shape().split_at_axis(axis);
        let y = tensor_like(x.value(), kernels::softmax_axis(x.value().data(), view));
        let yv = Arc::new(y.clone());
        self.record("softmax", y, &[x], move |g, _| {
            vec![Some(tensor_like(&yv, kernels::softmax_axis_backward(yv.data(), g.data(), view)))]
        })
    }

    pub fn softmax_lastdim(&self, x: &Var<T>) -> Result<Var<T>> {
        self.softmax_axis(x, x.value().rank() - 1)
    }

    /// Reorders dimensions: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = permute_tensor(x.value(), axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record("permute", out, &[x], move |g, _| vec![Some(permute_tensor(g, &inverse).unwrap())])
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let dims = x.dims().to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(dim_err!("narrow: {start}+{len} on axis {axis} out of range for {dims:?}"));
        }
        let (outer, full, inner) = x.value().shape().split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.value().data()[base..base + len * inner]);
        }
        let mut odims = dims.clone();
        odims[axis] = len;
        self.record("narrow", Tensor::new(&odims, out)?, &[x], move |g, _| {
            let mut d = vec![T::ZERO; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&dims, d).unwrap())]
        })
    }

    /// Keeps every `stride`-th row and column of an `(N, C, H, W)` map,
    /// starting at 0. Output is `ceil(H/stride) × ceil(W/stride)`.
    pub fn subsample(&self, x: &Var<T>, stride: usize) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("subsample", x)?;
        if stride == 0 {
            return Err(Error::Parameter("subsample stride must be >= 1".into()));
        }
        let (ho, wo) = (kernels::conv_out_len(h, stride), kernels::conv_out_len(w, stride));
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in x.value().data().chunks_exact(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(p[oy * stride * w + ox * stride]);
                }
            }
        }
        let in_dims = x.dims().to_vec();
        self.record("subsample", Tensor::new(&[n, c, ho, wo], out)?, &[x], move |g, _| {
            let mut d = vec![T::ZERO; n * c * h * w];
            for (dp, gp) in d.chunks_exact_mut(h * w).zip(g.data().chunks_exact(ho * wo)) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        dp[oy * stride * w + ox * stride] = gp[oy * wo + ox];
                    }
                }
            }
            vec![Some(Tensor::new(&in_dims, d).unwrap())]
        })
    }

    /// Multiplies each `(n, c)` plane of `x: (N, C, H, W)` by `s[n, c]`.
    pub fn scale_channels(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = nchw("scale_channels", x)?;
        if s.dims() != [n, c] {
            return Err(dim_err!("scale_channels: scale {:?} != [{n}, {c}]", s.dims()));
        }
        let hw = h * w;
        let mut out = x.value().data().to_vec();
        for (p, &sv) in out.chunks_exact_mut(hw).zip(s.value().data()) {
            p.iter_mut().for_each(|v| *v *= sv);
        }
        let (xv, sv) = (x.shared(), s.shared());
        self.record("scale_channels", tensor_like(x.value(), out), &[x, s], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut d = g.data().to_vec();
                for (p, &s) in d.chunks_exact_mut(hw).zip(sv.data()) {
                    p.iter_mut().for_each(|v| *v *= s);
                }
                tensor_like(&xv, d)
            });
            let ds = needs[1].then(|| {
                let d = g
                    .data()
                    .chunks_exact(hw)
                    .zip(xv.data().chunks_exact(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).fold(T::ZERO, |a, (&gv, &xv)| a + gv * xv))
                    .collect();
                Tensor::new(&[n, c], d).unwrap()
            });
            vec![dx, ds]
        })
    }

    /// `x + b` where `b`'s shape equals a trailing block of `x`'s shape
    /// (broadcast over the leading dims).
    pub fn add_broadcast(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (xd, bd) = (x.dims(), b.dims());
        if bd.len() > xd.len() || xd[xd.len() - bd.len()..] != *bd {
            return Err(dim_err!("add_broadcast: {bd:?} is not a suffix of {xd:?}"));
        }
        let inner = b.value().numel();
        let mut out = x.value().data().to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            kernels::add_into(chunk, b.value().data());
        }
        let b_dims = bd.to_vec();
        self.record("add_broadcast", tensor_like(x.value(), out), &[x, b], move |g, needs| {
            let db = needs[1].then(|| {
                let mut d = vec![T::ZERO; inner];
                for chunk in g.data().chunks_exact(inner) {
                    kernels::add_into(&mut d, chunk);
                }
                Tensor::new(&b_dims, d).unwrap()
            });
            vec![needs[0].then(|| g.clone()), db]
        })
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices,
    /// with label smoothing: targets are `(1 - ε)·onehot + ε/K`.
    pub fn cross_entropy(&self, logits: &Var<T>, targets: &[usize], smoothing: f64) -> Result<Var<T>> {
        let (n, k) = match *logits.dims() {
            [n, k] => (n, k),
            _ => return Err(dim_err!("cross_entropy: logits must be [N, K], got {:?}", logits.dims())),
        };
        if targets.len() != n {
            return Err(dim_err!("cross_entropy: {} targets for batch {n}", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Parameter(format!("target class {bad} out of range for {k} classes")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Parameter(format!("label smoothing must be in [0, 1), got {smoothing}")));
        }
        let probs = kernels::softmax_axis(logits.value().data(), (n, k, 1));
        let off = T::from_f64(smoothing / k as f64);
        let on = T::from_f64(1.0 - smoothing) + off;
        let mut total = T::ZERO;
        for (row, &t) in logits.value().data().chunks_exact(k).zip(targets) {
            let m = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().fold(T::ZERO, |a, &v| a + (v - m).exp()).ln() + m;
            for (j, &v) in row.iter().enumerate() {
                let target = if j == t { on } else { off };
                total += target * (lse - v);
            }
        }
        let inv_n = T::ONE / T::from_usize(n);
        let targets = targets.to_vec();
        self.record("cross_entropy", Tensor::scalar(total * inv_n), &[logits], move |g, _| {
            let scale = g.data()[0] * inv_n;
            let mut d = probs.clone();
            for (row, &t) in d.chunks_exact_mut(k).zip(&targets) {
                for (j, v) in row.iter_mut().enumerate() {
                    let target = if j == t { on } else { off };
                    *v = (*v - target) * scale;
                }
            }
            vec![Some(Tensor::new(&[n, k], d).unwrap())]
        })
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, hw: usize) -> Tensor<T> {
    let mut d = vec![T::ZERO; c];
    for i in 0..n {
        for (ch, dv) in d.iter_mut().enumerate() {
            let p = &g[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            *dv += p.iter().fold(T::ZERO, |a, &v| a + v);
        }
    }
    Tensor::new(&[c], d).unwrap()
}

/// Materializes a permutation of a tensor's dimensions.
pub fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let dims = x.dims();
    let rank = dims.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(dim_err!("permute: {axes:?} is not a permutation of rank {rank}"));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_dims[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        let mut d = last;
        loop {
            if d == 0 {
                return Tensor::new(&out_dims, out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
