use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{cross_entropy, Hooks};
use super::{ModelConfig, ModelMeta, TransformerModel};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};

/// Mini-batch SGD with momentum and a cosine-decayed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f32>,
    pub seed: u64,
    /// Training fails with `BelowAccuracyFloor` under this accuracy.
    #[serde(default)]
    pub accuracy_floor: Option<f64>,
    /// Tensors whose name starts with any of these prefixes keep their
    /// initial values.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<String>,
}

fn default_momentum() -> f32 {
    0.9
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            grad_clip: Some(1.0),
            seed: 0,
            accuracy_floor: None,
            frozen: Vec::new(),
        }
    }
}

fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    let t = step as f64 / total.max(1) as f64;
    (f64::from(base) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Trains a freshly initialised model. Single-threaded and bit-reproducible
/// for a given `(config, dataset, hyper)`.
pub fn train(config: &ModelConfig, dataset: &LabeledDataset, hyper: &TrainHyper) -> Result<TransformerModel> {
    fine_tune(TransformerModel::init(config.clone(), hyper.seed)?, dataset, hyper)
}

/// Continues training `model` from its current parameters.
pub fn fine_tune(
    mut model: TransformerModel,
    dataset: &LabeledDataset,
    hyper: &TrainHyper,
) -> Result<TransformerModel> {
    let config = model.config().clone();
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.label >= config.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {} classes",
            s.label, config.num_classes
        )));
    }
    let frozen: Vec<std::ops::Range<usize>> = model
        .tensors()
        .iter()
        .filter(|t| hyper.frozen.iter().any(|p| t.name.starts_with(p.as_str())))
        .map(|t| t.offset..t.offset + t.rows * t.cols)
        .collect();
    for s in &dataset.samples {
        model.check_input(&s.input)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x005e_ed0f_0ade);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let steps_per_epoch = order.len().div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * hyper.epochs;
    let mut velocity = vec![0.0f32; model.num_params()];
    let mut grads = vec![0.0f32; model.num_params()];
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            grads.fill(0.0);
            let inv = 1.0 / batch.len() as f32;
            let mut loss = 0.0f64;
            {
                let net = model.net();
                for &i in batch {
                    let s = &dataset.samples[i];
                    let cache = net.forward(&s.input, &Hooks::default());
                    let (l, mut dlogits) = cross_entropy(&cache.logits, s.label);
                    loss += f64::from(l);
                    dlogits.iter_mut().for_each(|g| *g *= inv);
                    net.backward(&s.input, &cache, &dlogits, &mut grads);
                }
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedTraining { epoch, step });
            }
            for r in &frozen {
                grads[r.clone()].fill(0.0);
            }
            if let Some(clip) = hyper.grad_clip {
                let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
                if norm > f64::from(clip) {
                    let s = (f64::from(clip) / norm) as f32;
                    grads.iter_mut().for_each(|g| *g *= s);
                }
            }
            let lr = cosine_lr(hyper.learning_rate, step, total_steps);
            for ((p, v), &g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v = hyper.momentum * *v + g;
                *p -= lr * *v;
            }
            step += 1;
        }
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::DivergedTraining {
            epoch: hyper.epochs,
            step,
        });
    }
    model.set_meta(ModelMeta {
        training_seed: Some(hyper.seed),
        dataset_fingerprint: Some(dataset.fingerprint()),
    });
    if let Some(floor) = hyper.accuracy_floor {
        let accuracy = training_accuracy(&model, dataset)?;
        if accuracy < floor {
            return Err(Error::BelowAccuracyFloor { accuracy, floor });
        }
    }
    Ok(model)
}

pub(crate) fn training_accuracy(model: &TransformerModel, dataset: &LabeledDataset) -> Result<f64> {
    let inputs: Vec<_> = dataset.samples.iter().map(|s| s.input.clone()).collect();
    let traces = model.forward(&inputs, false)?;
    let correct = traces
        .iter()
        .zip(&dataset.samples)
        .filter(|(t, s)| t.predicted() == s.label)
        .count();
    Ok(correct as f64 / dataset.samples.len() as f64)
}
