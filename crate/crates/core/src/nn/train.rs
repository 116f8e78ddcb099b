use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{forward, loss_and_gradients, weighted_cross_entropy, DropoutMode, LayerGrad, Network};
use crate::data::{class_weights, stratified_split, ClassWeights, Dataset};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// `None` computes balanced weights from the training labels.
    pub class_weights: Option<ClassWeights>,
    pub shuffle_seed: u64,
    pub early_stop_patience: Option<usize>,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            class_weights: None,
            shuffle_seed: 0,
            early_stop_patience: None,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("adam betas must lie in (0,1)");
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if let Some(w) = &self.class_weights {
            if w.0.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad("class weights must be positive");
            }
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be positive");
        }
        if self.early_stop_patience.is_some() && !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0,1)");
        }
        Ok(())
    }
}

/// Per-batch and per-epoch mean training loss.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub batch_losses: Vec<Vec<f64>>,
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

struct AdamState {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    t: i32,
}

fn zeros_like(net: &Network) -> Vec<LayerGrad> {
    net.layers
        .iter()
        .map(|l| LayerGrad {
            weights: Array2::zeros(l.weights.raw_dim()),
            bias: Array1::zeros(l.bias.len()),
        })
        .collect()
}

fn apply_step(net: &mut Network, grads: &[LayerGrad], cfg: &TrainConfig, adam: &mut Option<AdamState>) {
    let lr = cfg.learning_rate;
    match adam {
        None => {
            for (layer, g) in net.layers.iter_mut().zip(grads) {
                layer.weights.scaled_add(-lr, &g.weights);
                layer.bias.scaled_add(-lr, &g.bias);
            }
        }
        Some(state) => {
            state.t += 1;
            let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
            let c1 = 1.0 - b1.powi(state.t);
            let c2 = 1.0 - b2.powi(state.t);
            for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                ndarray::Zip::from(&mut layer.weights)
                    .and(&g.weights)
                    .and(&mut m.weights)
                    .and(&mut v.weights)
                    .for_each(|p, &g, m, v| update(p, g, m, v));
                ndarray::Zip::from(&mut layer.bias)
                    .and(&g.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .for_each(|p, &g, m, v| update(p, g, m, v));
            }
        }
    }
}

/// Train `net` by mini-batch gradient descent on class-weighted cross-entropy,
/// with dropout active.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    train_with_history(net, data, cfg).map(|(net, _)| net)
}

pub fn train_with_history(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.n_features() != net.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: net.arch.input_dim,
            actual: data.n_features(),
        });
    }

    let (train_set, validation) = match cfg.early_stop_patience {
        Some(_) => {
            let split = stratified_split(data, cfg.validation_fraction, seed::derive(cfg.shuffle_seed, &[stream::VALIDATION]))?;
            (split.train, Some(split.test))
        }
        None => (data.clone(), None),
    };
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => class_weights(train_set.labels())?,
    };

    let mut net = net.clone();
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(AdamState {
            m: zeros_like(&net),
            v: zeros_like(&net),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0usize;

    let x = train_set.features();
    let y = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.n_samples()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive(cfg.shuffle_seed, &[stream::SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let mode = DropoutMode::Enabled(seed::derive(cfg.shuffle_seed, &[stream::DROPOUT, epoch as u64, b as u64]));
            let (loss, grads) = loss_and_gradients(&net, xb.view(), &yb, &weights, mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            apply_step(&mut net, &grads, cfg, &mut adam);
            losses.push(loss);
        }
        if !net.params_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: losses.len().saturating_sub(1),
            });
        }
        history.epoch_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
        history.batch_losses.push(losses);

        if let (Some(val), Some(patience)) = (&validation, cfg.early_stop_patience) {
            let probs = forward(&net, val.features().view(), DropoutMode::Disabled)?;
            let vl = weighted_cross_entropy(probs.view(), val.labels(), &weights)?;
            history.validation_losses.push(vl);
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, net.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, best_net)) = best {
        net = best_net;
    }
    Ok((net, history))
}
