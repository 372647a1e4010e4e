use crate::autograd::Gradients;
use crate::nn::{Module, Param};
use crate::tensor::Scalar;

/// AdamW with decoupled weight decay. Decay applies to tensors named
/// `*weight`; biases, norms, and position tables are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn decays(p: &Param<impl Scalar>) -> bool {
        p.name.ends_with("weight")
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step<T: Scalar, M: Module<T>>(&mut self, model: &mut M, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        // Gradients are looked up by storage identity, so collect them before
        // any parameter is written.
        let mut found: Vec<Option<Vec<f64>>> = Vec::new();
        model.visit_params(&mut |p| {
            found.push(grads.param(p).filter(|_| p.trainable).map(|g| g.data().iter().map(|v| v.to_f64()).collect()))
        });
        if self.moments.is_empty() {
            model.visit_params(&mut |p| self.moments.push((vec![0.0; p.numel()], vec![0.0; p.numel()])));
        }
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_params_mut(&mut |p| {
            let i = idx;
            idx += 1;
            let Some(g) = found[i].take() else { return };
            let decay = if Self::decays(p) { wd } else { 0.0 };
            let (m, v) = &mut moments[i];
            for (j, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                let wv = w.to_f64();
                *w = T::from_f64(wv - lr * (update + decay * wv));
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::{Init, Linear};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut l = Linear::<f64>::new(&mut Init::with_std(0, 1.0), "fc", 3, 2);
        let before = l.weight.value().clone();
        let tape = Tape::new();
        let x = tape.constant(crate::tensor::Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.linear(&x, &tape.param(&l.weight), Some(&tape.param(&l.bias))).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut l, &grads);
        for (j, (&a, &b)) in before.data().iter().zip(l.weight.value().data()).enumerate() {
            let sign = [1.0, -1.0, 1.0][j % 3];
            assert!((a - b - 0.1 * sign).abs() < 1e-6, "{a} {b}");
        }
        assert!(l.bias.value().data().iter().all(|&b| (b + 0.1).abs() < 1e-6));
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut l = Linear::<f32>::new(&mut Init::new(0), "fc", 3, 2);
        let before = l.weight.value().clone();
        let tape = Tape::new();
        let x = tape.constant(crate::tensor::Tensor::ones(&[1, 3]).unwrap());
        let y = tape.linear(&x, &tape.param(&l.weight), None).unwrap();
        let grads = tape.backward(&tape.sum(&y).unwrap()).unwrap();
        AdamW::new(0.0, 0.05).step(&mut l, &grads);
        assert_eq!(l.weight.value(), &before);
    }
}
