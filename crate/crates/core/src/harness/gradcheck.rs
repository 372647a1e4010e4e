//! Finite-difference verification of the tape gradients.
//!
//! Each component is built in double precision with random weights, fed
//! random inputs, and reduced to the scalar `Σ out ⊙ R` for a fixed random
//! `R`. Sampled coordinates of every parameter and input are perturbed by
//! `±h`, `h = 1e-4·max(1, |θ|)`, and the central difference is compared with
//! the tape gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AtrousAttention, AttentionConfig, Wmhsa};
use crate::autograd::{Tape, Var};
use crate::conv_block::{AtrousIrConv, ConvBlockConfig};
use crate::error::{Error, Result};
use crate::gating::{GateMixing, GateParams};
use crate::model::{Model, ModelOptions, VariantConfig};
use crate::nn::{Init, Module};
use crate::tensor::Tensor;

pub const COMPONENTS: [&str; 5] = ["gate", "wmhsa", "atrous_attention", "atrous_ir_conv", "micro_model"];

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error. Coordinates whose true gradient
/// is (near) zero are judged on absolute error instead: the central
/// difference carries roundoff of order `ε·|loss|/h ≈ 1e-9` for these
/// problems, so a smaller floor would fail exact zeros such as the gradient
/// of a key bias, which softmax cancels.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The coordinate with the largest error.
    pub worst: Option<CoordCheck>,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

type Forward<M> = dyn Fn(&Tape<f64>, &M, &[Var<f64>]) -> Result<Var<f64>>;

struct Problem<M> {
    module: M,
    inputs: Vec<Tensor<f64>>,
    forward: Box<Forward<M>>,
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale)).unwrap()
}

/// Jitters every parameter so zero-initialized tensors (biases, position
/// tables) are also exercised away from zero.
fn jitter<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_params_mut(&mut |p| {
        for v in p.value_mut().data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    });
}

impl<M: Module<f64>> Problem<M> {
    fn loss(&self, tape: &Tape<f64>, inputs: &[Var<f64>], r: &Tensor<f64>) -> Result<Var<f64>> {
        let out = (self.forward)(tape, &self.module, inputs)?;
        let rv = tape.constant(r.clone());
        tape.sum(&tape.mul(&out, &rv)?)
    }

    fn eval(&self, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(self.loss(&tape, &vars, r)?.value().data()[0])
    }

    fn run(mut self, component: &str, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let out_dims = {
            let tape = Tape::no_grad();
            let vars: Vec<_> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
            (self.forward)(&tape, &self.module, &vars)?.dims().to_vec()
        };
        let r = random(&out_dims, &mut rng, 1.0);

        // Analytic gradients, flattened in (params..., inputs...) order.
        let mut analytic: Vec<(String, Tensor<f64>)> = Vec::new();
        {
            let tape = Tape::new();
            let vars: Vec<_> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = self.loss(&tape, &vars, &r)?;
            let grads = tape.backward(&loss)?;
            self.module.visit_params(&mut |p| {
                let g = grads.param(p).cloned().unwrap_or_else(|| p.value().zeros_like());
                analytic.push((p.name.clone(), g));
            });
            for (i, v) in vars.iter().enumerate() {
                analytic.push((format!("input{i}"), grads.get_or_zero(v)));
            }
        }

        let n_params = analytic.len() - self.inputs.len();
        let mut checks = Vec::new();
        for (t, (name, grad)) in analytic.iter().enumerate() {
            let numel = grad.numel();
            let picks: Vec<usize> = if numel <= per_tensor {
                (0..numel).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..numel)).collect()
            };
            for idx in picks {
                let numeric = if t < n_params {
                    self.numeric_param(t, idx, &r)?
                } else {
                    self.numeric_input(t - n_params, idx, &r)?
                };
                let a = grad.data()[idx];
                checks.push(CoordCheck { tensor: name.clone(), index: idx, analytic: a, numeric, rel_err: rel_err(a, numeric) });
            }
        }
        let worst = checks.iter().cloned().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
        let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
        Ok(GradCheckReport {
            component: component.to_string(),
            seed,
            coordinates: checks.len(),
            max_rel_err,
            tolerance: TOLERANCE,
            passed: max_rel_err <= TOLERANCE,
            worst,
        })
    }

    fn set_param(&mut self, t: usize, idx: usize, value: f64) -> f64 {
        let mut k = 0;
        let mut old = 0.0;
        self.module.visit_params_mut(&mut |p| {
            if k == t {
                let d = p.value_mut().data_mut();
                old = d[idx];
                d[idx] = value;
            }
            k += 1;
        });
        old
    }

    fn numeric_param(&mut self, t: usize, idx: usize, r: &Tensor<f64>) -> Result<f64> {
        let theta = self.set_param(t, idx, 0.0);
        let h = 1e-4 * theta.abs().max(1.0);
        self.set_param(t, idx, theta + h);
        let plus = self.eval(&self.inputs, r)?;
        self.set_param(t, idx, theta - h);
        let minus = self.eval(&self.inputs, r)?;
        self.set_param(t, idx, theta);
        Ok((plus - minus) / (2.0 * h))
    }

    fn numeric_input(&self, i: usize, idx: usize, r: &Tensor<f64>) -> Result<f64> {
        let mut inputs = self.inputs.clone();
        let theta = inputs[i].data()[idx];
        let h = 1e-4 * theta.abs().max(1.0);
        inputs[i].data_mut()[idx] = theta + h;
        let plus = self.eval(&inputs, r)?;
        inputs[i].data_mut()[idx] = theta - h;
        let minus = self.eval(&inputs, r)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

/// Coordinates sampled per tensor.
pub const DEFAULT_SAMPLES: usize = 6;

pub fn gradcheck(component: &str, seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(component, seed, DEFAULT_SAMPLES)
}

pub fn gradcheck_with(component: &str, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::with_std(seed, 0.3);
    match component {
        "gate" => {
            let (c, k) = (4, 3);
            let mut module = GateParams::<f64>::new(&mut init, "gate", GateMixing::Dense, k, c);
            jitter(&mut module, &mut rng, 0.3);
            let mut inputs = vec![random(&[2, c, 4, 4], &mut rng, 1.0)];
            inputs.extend((0..k).map(|_| random(&[2, c, 4, 4], &mut rng, 1.0)));
            Problem {
                module,
                inputs,
                forward: Box::new(|tape, m: &GateParams<f64>, v| {
                    let g = m.compute(tape, &v[0])?;
                    let branches: Vec<&Var<f64>> = v[1..].iter().collect();
                    tape.fuse(&branches, &g)
                }),
            }
            .run(component, seed, per_tensor)
        }
        "wmhsa" => {
            let mut module = Wmhsa::<f64>::new(&mut init, "wmhsa", 8, 4, 2)?;
            jitter(&mut module, &mut rng, 0.3);
            Problem {
                module,
                inputs: vec![random(&[3, 4, 8], &mut rng, 1.0)],
                forward: Box::new(|tape, m: &Wmhsa<f64>, v| m.forward(tape, &v[0])),
            }
            .run(component, seed, per_tensor)
        }
        "atrous_attention" => {
            let cfg = AttentionConfig { dim: 16, levels: 1, window: 4, head_dim: 8, mlp_ratio: 4, input_hw: (16, 16) };
            let mut module = AtrousAttention::<f64>::new(&mut init, "attn", cfg)?;
            jitter(&mut module, &mut rng, 0.2);
            Problem {
                module,
                inputs: vec![random(&[1, 16, 16, 16], &mut rng, 1.0)],
                forward: Box::new(|tape, m: &AtrousAttention<f64>, v| m.forward(tape, &v[0])),
            }
            .run(component, seed, per_tensor)
        }
        "atrous_ir_conv" => {
            let mut module = AtrousIrConv::<f64>::new(&mut init, "conv", ConvBlockConfig::new(8, 8, 1))?;
            jitter(&mut module, &mut rng, 0.2);
            Problem {
                module,
                inputs: vec![random(&[1, 8, 8, 8], &mut rng, 1.0)],
                forward: Box::new(|tape, m: &AtrousIrConv<f64>, v| m.forward(tape, &v[0])),
            }
            .run(component, seed, per_tensor)
        }
        "micro_model" => {
            let opts = ModelOptions { num_classes: 3, seed, resolution: 16, init_std: 0.3, zero_head: false };
            let mut module = Model::<f64>::build(&VariantConfig::micro_two_stage(), opts)?;
            jitter(&mut module, &mut rng, 0.2);
            Problem {
                module,
                inputs: vec![random(&[2, 3, 16, 16], &mut rng, 1.0)],
                forward: Box::new(|tape, m: &Model<f64>, v| m.forward(tape, &v[0])),
            }
            .run(component, seed, per_tensor)
        }
        other => Err(Error::Config(format!("unknown gradcheck component {other:?}; expected one of {}", COMPONENTS.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for c in COMPONENTS {
            let r = gradcheck(c, 1).unwrap();
            assert!(r.passed, "{c}: {r:?}");
            assert!(r.coordinates > 10);
        }
    }

    #[test]
    fn frozen_parameters_receive_exactly_zero_gradient() {
        let mut gate = GateParams::<f64>::new(&mut Init::new(0), "gate", GateMixing::Dense, 2, 2);
        gate.weight.trainable = false;
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 2], 0.5).unwrap());
        let g = gate.compute(&tape, &x).unwrap();
        let r = tape.constant(Tensor::from_fn(&[1, 2, 2, 2, 2], |i| i as f64).unwrap());
        let grads = tape.backward(&tape.sum(&tape.mul(&g, &r).unwrap()).unwrap()).unwrap();
        assert!(grads.param(&gate.weight).is_none());
        assert!(grads.param(&gate.bias).is_some());
    }

    #[test]
    fn unknown_component_is_a_config_error() {
        assert!(matches!(gradcheck("bogus", 0), Err(Error::Config(_))));
    }
}
