//! Desk-scale training on the synthetic bar images.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_toy, split, ToyDataset, ToySpec};
use super::optim::AdamW;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, ModelOptions, VariantConfig};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Named variant, ignored when `model` is given.
    pub variant: String,
    pub model: Option<VariantConfig>,
    pub data: ToySpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Weight init std. Larger than the model default: at 0.02 the
    /// activations of the later stages fall below the first optimizer step's
    /// bias updates and every image maps to the same features.
    pub init_std: f64,
    /// Hold gate parameters at zero so every fusion is a plain average.
    pub freeze_gates: bool,
    /// Stop once train accuracy reaches this value (never when `None`).
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: "micro".into(),
            model: None,
            data: ToySpec::default(),
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            init_std: 0.1,
            freeze_gates: false,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    fn variant_config(&self) -> Result<VariantConfig> {
        match &self.model {
            Some(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
            None => VariantConfig::named(&self.variant),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and >= 0");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be finite and > 0");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the training split after the epoch.
    pub train_acc: f64,
    pub heldout_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub final_train_acc: f64,
    pub final_heldout_acc: f64,
    pub final_loss: f64,
    pub parameters: usize,
    pub steps: u64,
}

fn accuracy(model: &Model<f32>, data: &ToyDataset<f32>, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(batch) {
        let (x, y) = data.batch(chunk);
        let logits = model.infer(&x)?;
        let k = model.num_classes();
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            // First maximum wins ties, so all-zero logits predict class 0.
            let pred = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += (pred == label) as usize;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Trains from scratch. Each epoch's metrics are passed to `on_epoch` as soon
/// as they are known; with `run_dir` they are also appended to
/// `metrics.jsonl` there, next to `config.json` and the final `report.json`.
pub fn train_toy(
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    let variant = cfg.variant_config()?;
    let data = gen_toy::<f32>(&cfg.data)?;
    let classes = 2;
    let opts = ModelOptions {
        num_classes: classes,
        seed: cfg.seed,
        resolution: cfg.data.image_size,
        init_std: cfg.init_std,
        zero_head: true,
    };
    let mut model = Model::<f32>::build(&variant, opts)?;
    if cfg.freeze_gates {
        for stage in &mut model.stages {
            for block in &mut stage.blocks {
                block.conv.gate.freeze_uniform();
                block.attn.gate.freeze_uniform();
            }
        }
    }
    let mut metrics_file = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let (train_idx, held_idx) = split(data.len());
    let mut order = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let tape = Tape::new();
            let logits = model.forward(&tape, &tape.constant(x)).map_err(|e| diverged(e, epoch))?;
            let loss = tape.cross_entropy(&logits, &y, cfg.label_smoothing).map_err(|e| diverged(e, epoch))?;
            let value = loss.value().data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = tape.backward(&loss)?;
            drop((logits, loss));
            drop(tape);
            opt.step(&mut model, &grads);
            loss_sum += value;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            train_acc: accuracy(&model, &data, &train_idx, 64)?,
            heldout_acc: accuracy(&model, &data, &held_idx, 64)?,
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
        }
        on_epoch(&m);
        let done = cfg.target_accuracy.is_some_and(|t| m.train_acc >= t);
        history.push(m);
        if done {
            break;
        }
    }
    let last = history.last().expect("at least one epoch").clone();
    let report = TrainReport {
        final_train_acc: last.train_acc,
        final_heldout_acc: last.heldout_acc,
        final_loss: last.loss,
        parameters: model.param_count(),
        steps: opt.steps(),
        epochs: history,
    };
    if let Some(dir) = run_dir {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch },
        other => other,
    }
}

/// Parameters that had a nonzero gradient but did not move in one optimizer
/// step (names only). Empty when every trained tensor was updated.
pub fn untouched_after_one_step(cfg: &TrainConfig) -> Result<Vec<String>> {
    let variant = cfg.variant_config()?;
    let data = gen_toy::<f32>(&ToySpec { n_samples: cfg.batch_size.max(2), ..cfg.data })?;
    let opts = ModelOptions {
        num_classes: 2,
        seed: cfg.seed,
        resolution: cfg.data.image_size,
        init_std: cfg.init_std,
        ..Default::default()
    };
    let mut model = Model::<f32>::build(&variant, opts)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx);
    let tape = Tape::new();
    let logits = model.forward(&tape, &tape.constant(x))?;
    let loss = tape.cross_entropy(&logits, &y, cfg.label_smoothing)?;
    let grads = tape.backward(&loss)?;
    drop((logits, loss, tape));
    let mut with_grad: Vec<(String, Tensor<f32>)> = Vec::new();
    model.visit_params(&mut |p| {
        if grads.param(p).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
            with_grad.push((p.name.clone(), p.value().clone()));
        }
    });
    AdamW::new(cfg.lr, cfg.weight_decay).step(&mut model, &grads);
    let after: std::collections::HashMap<String, Tensor<f32>> =
        model.params().into_iter().map(|p| (p.name.clone(), p.value().clone())).collect();
    Ok(with_grad.into_iter().filter(|(n, before)| &after[n] == before).map(|(n, _)| n).collect())
}
