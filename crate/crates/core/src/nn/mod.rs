//! Parameters, the parameter registry walk, and seeded initialization.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// A named, optionally trainable tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { name: name.into(), value: Arc::new(value), trainable: true }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Mutable access; copies the buffer only if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor<T>) {
        assert_eq!(value.shape(), self.value.shape(), "param {} shape change", self.name);
        self.value = Arc::new(value);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    /// Visits every parameter exactly once, in a fixed order.
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }
}

/// Implements [`Module`] for a struct by listing its parameter and
/// sub-module fields.
macro_rules! impl_module {
    ($ty:ident { params: [$($p:ident),*], modules: [$($m:ident),*], lists: [$($l:ident),*], options: [$($o:ident),*] }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::nn::Param<T>)) {
                $( f(&self.$p); )*
                $( self.$m.visit_params(f); )*
                $( for item in &self.$l { item.visit_params(f); } )*
                $( if let Some(item) = &self.$o { item.visit_params(f); } )*
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param<T>)) {
                $( f(&mut self.$p); )*
                $( self.$m.visit_params_mut(f); )*
                $( for item in &mut self.$l { item.visit_params_mut(f); } )*
                $( if let Some(item) = &mut self.$o { item.visit_params_mut(f); } )*
            }
        }
    };
}
pub(crate) use impl_module;

/// Seeded parameter initializer. Draws happen in construction order, so a
/// model built twice from the same seed is bit-identical.
pub struct Init {
    rng: ChaCha8Rng,
    /// Standard deviation of the truncated normal used for weights.
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std: 0.02 }
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal<T: Scalar>(&mut self, name: impl Into<String>, dims: &[usize]) -> Param<T> {
        let std = self.std;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(dims, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .expect("valid parameter shape");
        Param::new(name, t)
    }

    pub fn zeros<T: Scalar>(&mut self, name: impl Into<String>, dims: &[usize]) -> Param<T> {
        Param::new(name, Tensor::zeros(dims).expect("valid parameter shape"))
    }

    pub fn ones<T: Scalar>(&mut self, name: impl Into<String>, dims: &[usize]) -> Param<T> {
        Param::new(name, Tensor::ones(dims).expect("valid parameter shape"))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Joins a prefix and a field name with a dot.
pub fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gamma/beta of a layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl_module!(LayerNorm { params: [gamma, beta], modules: [], lists: [], options: [] });

impl<T: Scalar> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init.ones(child(prefix, "gamma"), &[dim]),
            beta: init.zeros(child(prefix, "beta"), &[dim]),
        }
    }
}

/// Weight `[out, in]` plus bias `[out]`, used both as a token-wise linear map
/// and as a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl_module!(Linear { params: [weight, bias], modules: [], lists: [], options: [] });

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init, prefix: &str, cin: usize, cout: usize) -> Self {
        Linear {
            weight: init.trunc_normal(child(prefix, "weight"), &[cout, cin]),
            bias: init.zeros(child(prefix, "bias"), &[cout]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().dims()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let a: Param<f64> = Init::new(7).trunc_normal("w", &[1000]);
        let b: Param<f64> = Init::new(7).trunc_normal("w", &[1000]);
        assert_eq!(a.value(), b.value());
        assert!(a.value().data().iter().all(|v| v.abs() <= 0.04));
        let mean = a.value().sum() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn linear_counts_closed_form() {
        let (c, k) = (6, 3);
        let l: Linear<f32> = Linear::new(&mut Init::new(0), "fc", c, k * c);
        assert_eq!(l.param_count(), c * k * c + k * c);
    }

    #[test]
    fn param_mut_is_copy_on_write() {
        let mut p = Param::new("w", Tensor::<f32>::zeros(&[2]).unwrap());
        let held = p.shared();
        p.value_mut().data_mut()[0] = 1.0;
        assert_eq!(held.data()[0], 0.0);
        assert_eq!(p.value().data()[0], 1.0);
    }
}
