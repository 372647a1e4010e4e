//! Dilated sub-image partitioning and P×P window partitioning.
//!
//! A dilation level `k` has rate `r = 2^k`. Partitioning an `(N, C, H, W)` map
//! at rate `r` yields `N·r²` sub-images of size `(H/r, W/r)`: sub-image
//! `(dy, dx)` of item `n` sits at batch index `(n·r + dy)·r + dx` and holds
//! the stride-`r` sampling of the map at offset `(dy, dx)`:
//!
//! ```text
//! b c (h hs) (w ws) -> (b hs ws) c h w      with hs = ws = r
//! ```
//!
//! Every pixel lands in exactly one sub-image, so windowed attention over the
//! sub-images attends over dilated neighbourhoods of the original map.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dilation level and the geometry it implies for one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub level: u32,
    pub rate: usize,
    pub input_hw: (usize, usize),
    pub sub_hw: (usize, usize),
}

impl PartitionSpec {
    /// Level 0 (rate 1) is accepted and acts as the identity.
    pub fn new(level: u32, input_hw: (usize, usize)) -> Result<Self> {
        let rate = 1usize
            .checked_shl(level)
            .filter(|&r| r <= 1 << 16)
            .ok_or_else(|| Error::Partition(format!("dilation level {level} too large")))?;
        Self::from_rate(rate, input_hw).map(|s| PartitionSpec { level, ..s })
    }

    /// Any rate ≥ 1, not only powers of two.
    pub fn from_rate(rate: usize, (h, w): (usize, usize)) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Partition("rate must be >= 1".into()));
        }
        if h % rate != 0 {
            return Err(Error::Partition(format!("height {h} is not divisible by rate {rate}")));
        }
        if w % rate != 0 {
            return Err(Error::Partition(format!("width {w} is not divisible by rate {rate}")));
        }
        Ok(PartitionSpec {
            level: rate.trailing_zeros(),
            rate,
            input_hw: (h, w),
            sub_hw: (h / rate, w / rate),
        })
    }

    pub fn sub_images(&self) -> usize {
        self.rate * self.rate
    }
}

/// Non-overlapping P×P windows over an `(H, W)` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub grid: (usize, usize),
}

impl WindowSpec {
    pub fn new(window: usize, (h, w): (usize, usize)) -> Result<Self> {
        if window == 0 {
            return Err(Error::Partition("window must be >= 1".into()));
        }
        if h % window != 0 {
            return Err(Error::Partition(format!("height {h} is not divisible by window {window}")));
        }
        if w % window != 0 {
            return Err(Error::Partition(format!("width {w} is not divisible by window {window}")));
        }
        Ok(WindowSpec { window, grid: (h / window, w / window) })
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn windows_per_item(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn map_hw(&self) -> (usize, usize) {
        (self.grid.0 * self.window, self.grid.1 * self.window)
    }
}

fn nchw<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!("expected (N, C, H, W), got {:?}", x.dims()))),
    }
}

/// Calls `f(map_index, sub_index)` for every element, pairing the flat index in
/// the `(N, C, H, W)` map with its flat index in the `(N·r², C, H/r, W/r)` stack.
fn for_each_dilated(n: usize, c: usize, spec: &PartitionSpec, mut f: impl FnMut(usize, usize)) {
    let (h, w) = spec.input_hw;
    let (sh, sw) = spec.sub_hw;
    let r = spec.rate;
    for b in 0..n {
        for dy in 0..r {
            for dx in 0..r {
                let item = (b * r + dy) * r + dx;
                for ch in 0..c {
                    let src_plane = (b * c + ch) * h * w;
                    let dst_plane = (item * c + ch) * sh * sw;
                    for i in 0..sh {
                        let src_row = src_plane + (i * r + dy) * w + dx;
                        let dst_row = dst_plane + i * sw;
                        for j in 0..sw {
                            f(src_row + j * r, dst_row + j);
                        }
                    }
                }
            }
        }
    }
}

fn check_spec_hw(spec: &PartitionSpec, h: usize, w: usize) -> Result<()> {
    if spec.input_hw != (h, w) {
        return Err(Error::Partition(format!(
            "spec built for {:?} but map is {:?}",
            spec.input_hw,
            (h, w)
        )));
    }
    Ok(())
}

/// `(N, C, H, W) -> (N·r², C, H/r, W/r)`.
pub fn partition_dilated<T: Scalar>(x: &Tensor<T>, spec: &PartitionSpec) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x)?;
    check_spec_hw(spec, h, w)?;
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for_each_dilated(n, c, spec, |s, d| out[d] = src[s]);
    Tensor::new(&[n * spec.sub_images(), c, spec.sub_hw.0, spec.sub_hw.1], out)
}

/// Exact inverse of [`partition_dilated`].
pub fn departition_dilated<T: Scalar>(x: &Tensor<T>, spec: &PartitionSpec) -> Result<Tensor<T>> {
    let (nb, c, sh, sw) = nchw(x)?;
    if nb % spec.sub_images() != 0 {
        return Err(Error::Partition(format!(
            "batch {nb} is not divisible by {} sub-images",
            spec.sub_images()
        )));
    }
    if (sh, sw) != spec.sub_hw {
        return Err(Error::Partition(format!("sub-images are {:?}, spec expects {:?}", (sh, sw), spec.sub_hw)));
    }
    let n = nb / spec.sub_images();
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for_each_dilated(n, c, spec, |m, s| out[m] = src[s]);
    Tensor::new(&[n, c, spec.input_hw.0, spec.input_hw.1], out)
}

/// Calls `f(map_index, window_index)` pairing `(N, C, H, W)` positions with
/// `(N·gh·gw, P², C)` positions.
fn for_each_window(n: usize, c: usize, spec: &WindowSpec, mut f: impl FnMut(usize, usize)) {
    let p = spec.window;
    let (gh, gw) = spec.grid;
    let (h, w) = spec.map_hw();
    let t = spec.tokens();
    for b in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                let item = (b * gh + wy) * gw + wx;
                for py in 0..p {
                    for px in 0..p {
                        let tok = py * p + px;
                        let pix = (wy * p + py) * w + wx * p + px;
                        let dst = (item * t + tok) * c;
                        for ch in 0..c {
                            f((b * c + ch) * h * w + pix, dst + ch);
                        }
                    }
                }
            }
        }
    }
}

/// `(N, C, H, W) -> (N·(H/P)·(W/P), P², C)`; windows in row-major grid order,
/// tokens row-major within a window.
pub fn partition_windows<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x)?;
    if spec.map_hw() != (h, w) {
        return Err(Error::Partition(format!("window spec covers {:?} but map is {:?}", spec.map_hw(), (h, w))));
    }
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for_each_window(n, c, spec, |m, d| out[d] = src[m]);
    Tensor::new(&[n * spec.windows_per_item(), spec.tokens(), c], out)
}

/// Exact inverse of [`partition_windows`].
pub fn departition_windows<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
    let (nb, t, c) = match *x.dims() {
        [nb, t, c] => (nb, t, c),
        _ => return Err(Error::Dimension(format!("expected (B, P², C), got {:?}", x.dims()))),
    };
    if t != spec.tokens() {
        return Err(Error::Dimension(format!("window holds {t} tokens, spec expects {}", spec.tokens())));
    }
    if nb % spec.windows_per_item() != 0 {
        return Err(Error::Partition(format!(
            "batch {nb} is not divisible by {} windows per item",
            spec.windows_per_item()
        )));
    }
    let n = nb / spec.windows_per_item();
    let (h, w) = spec.map_hw();
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for_each_window(n, c, spec, |m, d| out[m] = src[d]);
    Tensor::new(&[n, c, h, w], out)
}

impl<T: Scalar> Tape<T> {
    pub fn partition_dilated(&self, x: &Var<T>, spec: &PartitionSpec) -> Result<Var<T>> {
        let out = partition_dilated(x.value(), spec)?;
        let spec = *spec;
        self.record("partition_dilated", out, &[x], move |g, _| {
            vec![Some(departition_dilated(g, &spec).expect("inverse shape"))]
        })
    }

    pub fn departition_dilated(&self, x: &Var<T>, spec: &PartitionSpec) -> Result<Var<T>> {
        let out = departition_dilated(x.value(), spec)?;
        let spec = *spec;
        self.record("departition_dilated", out, &[x], move |g, _| {
            vec![Some(partition_dilated(g, &spec).expect("inverse shape"))]
        })
    }

    pub fn partition_windows(&self, x: &Var<T>, spec: &WindowSpec) -> Result<Var<T>> {
        let out = partition_windows(x.value(), spec)?;
        let spec = *spec;
        self.record("partition_windows", out, &[x], move |g, _| {
            vec![Some(departition_windows(g, &spec).expect("inverse shape"))]
        })
    }

    pub fn departition_windows(&self, x: &Var<T>, spec: &WindowSpec) -> Result<Var<T>> {
        let out = departition_windows(x.value(), spec)?;
        let spec = *spec;
        self.record("departition_windows", out, &[x], move |g, _| {
            vec![Some(partition_windows(g, &spec).expect("inverse shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |i| i as f64).unwrap()
    }

    /// Reference: direct evaluation of the stated index map.
    fn oracle_dilated(x: &Tensor<f64>, r: usize) -> Tensor<f64> {
        let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let mut out = Tensor::zeros(&[n * r * r, c, h / r, w / r]).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        for i in 0..h / r {
                            for j in 0..w / r {
                                out.set(&[(b * r + dy) * r + dx, ch, i, j], x.get(&[b, ch, i * r + dy, j * r + dx]));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn worked_4x4_rate_2() {
        let x = iota(&[1, 1, 4, 4]);
        let spec = PartitionSpec::new(1, (4, 4)).unwrap();
        let p = partition_dilated(&x, &spec).unwrap();
        assert_eq!(p.dims(), &[4, 1, 2, 2]);
        assert_eq!(
            p.data(),
            &[0., 2., 8., 10., 1., 3., 9., 11., 4., 6., 12., 14., 5., 7., 13., 15.]
        );
        assert_eq!(p, oracle_dilated(&x, 2));
        assert_eq!(departition_dilated(&p, &spec).unwrap(), x);
    }

    #[test]
    fn rate_one_and_constant_maps() {
        let x = iota(&[2, 3, 4, 6]);
        let spec = PartitionSpec::new(0, (4, 6)).unwrap();
        assert_eq!(partition_dilated(&x, &spec).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 2, 8, 8], 3.5).unwrap();
        for level in 1..=3 {
            let spec = PartitionSpec::new(level, (8, 8)).unwrap();
            let p = partition_dilated(&c, &spec).unwrap();
            assert!(p.data().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn divisibility_errors_name_the_dim() {
        let e = PartitionSpec::new(2, (8, 6)).unwrap_err().to_string();
        assert!(e.contains("width 6"), "{e}");
        let e = PartitionSpec::new(1, (5, 6)).unwrap_err().to_string();
        assert!(e.contains("height 5"), "{e}");
        let spec = PartitionSpec::new(1, (4, 4)).unwrap();
        let bad = Tensor::<f64>::zeros(&[3, 1, 2, 2]).unwrap();
        assert!(matches!(departition_dilated(&bad, &spec), Err(Error::Partition(_))));
        assert!(WindowSpec::new(3, (6, 4)).is_err());
    }

    #[test]
    fn windows_worked_example() {
        let x = iota(&[1, 1, 4, 4]);
        let spec = WindowSpec::new(2, (4, 4)).unwrap();
        let w = partition_windows(&x, &spec).unwrap();
        assert_eq!(w.dims(), &[4, 4, 1]);
        assert_eq!(&w.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&w.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(departition_windows(&w, &spec).unwrap(), x);
    }

    #[test]
    fn single_window_is_a_reshape() {
        let x = iota(&[1, 3, 4, 4]);
        let spec = WindowSpec::new(4, (4, 4)).unwrap();
        let w = partition_windows(&x, &spec).unwrap();
        for t in 0..16 {
            for c in 0..3 {
                assert_eq!(w.get(&[0, t, c]), x.get(&[0, c, t / 4, t % 4]));
            }
        }
    }

    #[test]
    fn composition_of_rates_matches_product_rate() {
        let x = iota(&[1, 2, 8, 8]);
        let a = PartitionSpec::new(1, (8, 8)).unwrap();
        let b = PartitionSpec::new(1, (4, 4)).unwrap();
        let ab = partition_dilated(&partition_dilated(&x, &a).unwrap(), &b).unwrap();
        let direct = partition_dilated(&x, &PartitionSpec::new(2, (8, 8)).unwrap()).unwrap();
        let sorted_items = |t: &Tensor<f64>| {
            let per = t.numel() / t.dims()[0];
            let mut items: Vec<Vec<u64>> = t
                .data()
                .chunks(per)
                .map(|s| {
                    let mut v: Vec<u64> = s.iter().map(|f| f.to_bits()).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            items.sort();
            items
        };
        assert_eq!(sorted_items(&ab), sorted_items(&direct));
    }

    #[test]
    fn translation_by_rate_permutes_sub_images() {
        // Shifting by exactly r pixels keeps every pixel in the same sub-image,
        // moving it by one position inside it.
        let r = 4;
        let x = iota(&[1, 1, 16, 16]);
        let shifted = Tensor::from_fn(&[1, 1, 16, 16], |i| {
            let (y, xx) = (i / 16, i % 16);
            x.get(&[0, 0, (y + r) % 16, (xx + r) % 16])
        })
        .unwrap();
        let spec = PartitionSpec::from_rate(r, (16, 16)).unwrap();
        let a = partition_dilated(&x, &spec).unwrap();
        let b = partition_dilated(&shifted, &spec).unwrap();
        for item in 0..r * r {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(b.get(&[item, 0, i, j]), a.get(&[item, 0, i + 1, j + 1]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn dilated_roundtrip_and_coverage(
            n in 1usize..3, c in 1usize..5, side_idx in 0usize..3, level in 1u32..4, seed in any::<u64>()
        ) {
            let side = [16, 32, 56][side_idx];
            prop_assume!(side % (1 << level) == 0);
            let x = Tensor::<f64>::from_fn(&[n, c, side, side], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).unwrap();
            let spec = PartitionSpec::new(level, (side, side)).unwrap();
            let p = partition_dilated(&x, &spec).unwrap();
            prop_assert_eq!(&p, &oracle_dilated(&x, spec.rate));
            prop_assert_eq!(departition_dilated(&p, &spec).unwrap(), x.clone());
            prop_assert_eq!(partition_dilated(&departition_dilated(&p, &spec).unwrap(), &spec).unwrap(), p);
            let mut count = vec![0u8; x.numel()];
            for_each_dilated(n, c, &spec, |m, _| count[m] += 1);
            prop_assert!(count.iter().all(|&k| k == 1));
        }

        #[test]
        fn window_roundtrip(n in 1usize..3, c in 1usize..4, p in 1usize..5, gh in 1usize..4, gw in 1usize..4) {
            let x = Tensor::<f32>::from_fn(&[n, c, p * gh, p * gw], |i| i as f32).unwrap();
            let spec = WindowSpec::new(p, (p * gh, p * gw)).unwrap();
            let w = partition_windows(&x, &spec).unwrap();
            prop_assert_eq!(departition_windows(&w, &spec).unwrap(), x);
        }
    }
}
