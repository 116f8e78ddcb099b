//! Dense ReLU networks with inverted dropout and a softmax output.
//!
//! Used for both tiers: the base classifier and the trust meta-model.

mod io;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassWeights, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

pub use io::{load_network, network_from_json, network_to_json, save_network};
pub use train::{train, train_with_history, Optimizer, TrainConfig, TrainHistory};

pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const MIN_SAMPLED_LAYERS: usize = 1;
pub const MAX_SAMPLED_LAYERS: usize = 4;
pub const MIN_SAMPLED_WIDTH: usize = 16;
pub const MAX_SAMPLED_WIDTH: usize = 512;

/// Floor applied to probabilities inside the log of the loss.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_layers,
            output_dim: NUM_CLASSES,
            dropout_rate: DEFAULT_DROPOUT,
            activation: Activation::Relu,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("input and output dims must be positive".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Layer (fan_in, fan_out) pairs from input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Random architecture: 1 to 4 hidden layers, each 16 to 512 units wide,
/// all draws uniform.
pub fn sample_architecture(rng_seed: u64, input_dim: usize) -> ArchSpec {
    let mut rng = seed::rng(rng_seed);
    let depth = rng.random_range(MIN_SAMPLED_LAYERS..=MAX_SAMPLED_LAYERS);
    let hidden = (0..depth)
        .map(|_| rng.random_range(MIN_SAMPLED_WIDTH..=MAX_SAMPLED_WIDTH))
        .collect();
    ArchSpec::new(input_dim, hidden)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// fan_in x fan_out
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub init_seed: u64,
    pub layers: Vec<Dense>,
}

/// He initialisation: weights ~ N(0, 2/fan_in), zero biases.
pub fn init_network(arch: &ArchSpec, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(&mut rng));
            Dense {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(Network {
        arch: arch.clone(),
        init_seed: seed,
        layers,
    })
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Disabled,
    /// Fresh Bernoulli masks drawn from a stream seeded with this value.
    Enabled(u64),
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct ForwardCache {
    /// Input to each layer (post-activation, post-dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    /// Per hidden layer: scale applied to each unit (0 or 1/(1-rate)), or
    /// `None` when no dropout was applied.
    masks: Vec<Option<Array2<f64>>>,
    probs: Array2<f64>,
}

fn check_batch(net: &Network, batch: &ArrayView2<f64>) -> Result<()> {
    if batch.ncols() != net.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: net.arch.input_dim,
            actual: batch.ncols(),
        });
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn forward_cached(net: &Network, batch: ArrayView2<f64>, mode: DropoutMode) -> ForwardCache {
    let n_hidden = net.arch.hidden_layers.len();
    let rate = net.arch.dropout_rate;
    let mut rng = match mode {
        DropoutMode::Enabled(s) if rate > 0.0 => Some(seed::rng(s)),
        _ => None,
    };
    let keep_scale = 1.0 / (1.0 - rate);

    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(n_hidden);
    let mut masks = Vec::with_capacity(n_hidden);
    let mut current = batch.to_owned();
    for (i, layer) in net.layers.iter().enumerate() {
        let mut z = current.dot(&layer.weights);
        z += &layer.bias;
        inputs.push(current);
        if i == n_hidden {
            softmax_rows(&mut z);
            return ForwardCache {
                inputs,
                pre,
                masks,
                probs: z,
            };
        }
        let mut h = z.mapv(|v| v.max(0.0));
        let mask = rng.as_mut().map(|rng| {
            let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            });
            h *= &m;
            m
        });
        pre.push(z);
        masks.push(mask);
        current = h;
    }
    unreachable!("network has an output layer")
}

/// Class probabilities for each row of `batch`.
///
/// With dropout enabled every hidden unit is zeroed independently with
/// probability `dropout_rate` and survivors are scaled by `1/(1-rate)`.
/// Input and output layers never drop.
pub fn forward(net: &Network, batch: ArrayView2<f64>, mode: DropoutMode) -> Result<Array2<f64>> {
    check_batch(net, &batch)?;
    Ok(forward_cached(net, batch, mode).probs)
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::InvalidArgument("label outside {0,1}".into()));
    }
    Ok(())
}

/// `-(1/n) * sum_i w[y_i] * ln(max(p_i[y_i], 1e-12))`
pub fn weighted_cross_entropy(probs: ArrayView2<f64>, labels: &[u8], weights: &ClassWeights) -> Result<f64> {
    check_labels(probs.nrows(), labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| weights.get(y) * p[y as usize].max(LOSS_EPS).ln())
        .sum();
    Ok(-total / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weighted cross-entropy over `batch` and its gradient with respect to every
/// parameter, by backpropagation. Dropout masks (if enabled) are drawn exactly
/// as [`forward`] would draw them.
pub fn loss_and_gradients(
    net: &Network,
    batch: ArrayView2<f64>,
    labels: &[u8],
    weights: &ClassWeights,
    mode: DropoutMode,
) -> Result<(f64, Vec<LayerGrad>)> {
    check_batch(net, &batch)?;
    check_labels(batch.nrows(), labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let cache = forward_cached(net, batch, mode);
    let loss = weighted_cross_entropy(cache.probs.view(), labels, weights)?;
    let n = labels.len() as f64;

    // d loss / d logits = w_y / n * (p - onehot(y))
    let mut delta = cache.probs;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y as usize] -= 1.0;
        row *= weights.get(y) / n;
    }

    let mut grads = Vec::with_capacity(net.layers.len());
    for i in (0..net.layers.len()).rev() {
        let input = &cache.inputs[i];
        grads.push(LayerGrad {
            weights: input.t().dot(&delta),
            bias: delta.sum_axis(Axis(0)),
        });
        if i == 0 {
            break;
        }
        let mut upstream = delta.dot(&net.layers[i].weights.t());
        if let Some(mask) = &cache.masks[i - 1] {
            upstream *= mask;
        }
        Zip::from(&mut upstream)
            .and(&cache.pre[i - 1])
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        delta = upstream;
    }
    grads.reverse();
    Ok((loss, grads))
}

/// Predicted class per row (argmax, ties to class 0).
pub fn argmax_rows(probs: ArrayView2<f64>) -> Vec<u8> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (c, &p) in r.iter().enumerate() {
                if p > r[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::Uniform;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        let u = Uniform::new(-2.0, 2.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || u.sample(&mut rng))
    }

    #[test]
    fn sampled_architectures_stay_in_range() {
        for s in 0..500 {
            let a = sample_architecture(s, 7);
            assert!((1..=4).contains(&a.hidden_layers.len()));
            assert!(a.hidden_layers.iter().all(|w| (16..=512).contains(w)));
            assert_eq!(a.dropout_rate, DEFAULT_DROPOUT);
            assert_eq!(a.input_dim, 7);
            assert_eq!(a.output_dim, 2);
        }
        assert_eq!(sample_architecture(42, 3), sample_architecture(42, 3));
    }

    #[test]
    fn sampled_depth_is_uniform() {
        let mut counts = [0usize; 5];
        for s in 0..10_000 {
            counts[sample_architecture(s, 2).hidden_layers.len()] += 1;
        }
        for &c in &counts[1..] {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let arch = ArchSpec::new(4, vec![16]);
        let net = init_network(&arch, 1).unwrap();
        assert_eq!(net.layers[0].weights.dim(), (4, 16));
        assert_eq!(net.layers[1].weights.dim(), (16, 2));
        assert_eq!(net.layers[0].bias.len(), 16);
        assert_eq!(net.layers[1].bias.len(), 2);
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(net, init_network(&arch, 1).unwrap());
        assert_ne!(net, init_network(&arch, 2).unwrap());
    }

    #[test]
    fn he_variance() {
        // 1000 inits of a 256x256 layer (the hidden-to-hidden block).
        let arch = ArchSpec::new(256, vec![256]);
        let target = 2.0 / 256.0;
        let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
        for s in 0..1000 {
            let net = init_network(&arch, s).unwrap();
            for &w in net.layers[0].weights.iter() {
                sum += w;
                sum_sq += w * w;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - target).abs() / target < 0.1, "var {var} target {target}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net = init_network(&ArchSpec::new(3, vec![32, 16]), 5).unwrap();
        let x = random_batch(50, 3, 1) * 100.0;
        for mode in [DropoutMode::Disabled, DropoutMode::Enabled(3)] {
            let p = forward(&net, x.view(), mode).unwrap();
            for r in p.rows() {
                assert!((r.sum() - 1.0).abs() <= 1e-12);
                assert!(r.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_rate_dropout_matches_disabled() {
        let net = init_network(&ArchSpec::new(3, vec![32]).with_dropout(0.0), 5).unwrap();
        let x = random_batch(10, 3, 2);
        let a = forward(&net, x.view(), DropoutMode::Disabled).unwrap();
        let b = forward(&net, x.view(), DropoutMode::Enabled(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_seeds_change_output() {
        // P(two Bernoulli(0.7) masks over 64 units coincide) = (0.7^2+0.3^2)^64 ~ 1e-9
        let net = init_network(&ArchSpec::new(4, vec![64]), 11).unwrap();
        let x = random_batch(1, 4, 3);
        let mut differ = 0;
        for s in 0..200u64 {
            let a = forward(&net, x.view(), DropoutMode::Enabled(2 * s)).unwrap();
            let b = forward(&net, x.view(), DropoutMode::Enabled(2 * s + 1)).unwrap();
            if a != b {
                differ += 1;
            }
        }
        assert!(differ as f64 / 200.0 > 0.99);
        let a = forward(&net, x.view(), DropoutMode::Enabled(1)).unwrap();
        let b = forward(&net, x.view(), DropoutMode::Enabled(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = init_network(&ArchSpec::new(3, vec![8]), 0).unwrap();
        assert!(matches!(
            forward(&net, Array2::zeros((2, 4)).view(), DropoutMode::Disabled),
            Err(Error::DimensionMismatch { expected: 3, actual: 4 })
        ));
        let mut x = Array2::zeros((2, 3));
        x[[1, 1]] = f64::INFINITY;
        assert!(matches!(
            forward(&net, x.view(), DropoutMode::Disabled),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let unit = ClassWeights::unit();
        let l = weighted_cross_entropy(array![[1.0, 0.0]].view(), &[0], &unit).unwrap();
        assert!(l.abs() < 1e-12);
        let l = weighted_cross_entropy(array![[0.5, 0.5]].view(), &[1], &unit).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = weighted_cross_entropy(array![[0.5, 0.5]].view(), &[1], &ClassWeights([1.0, 2.0])).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        // zero probability is floored at 1e-12
        let l = weighted_cross_entropy(array![[1.0, 0.0]].view(), &[1], &unit).unwrap();
        assert!((l + 1e-12f64.ln()).abs() < 1e-9);
        assert!(matches!(
            weighted_cross_entropy(array![[0.5, 0.5]].view(), &[1, 0], &unit),
            Err(Error::LengthMismatch { .. })
        ));
    }

    /// Dropout expectation: averaging inverted-dropout hidden activations over
    /// many masks recovers the deterministic activations.
    #[test]
    fn inverted_dropout_preserves_expectation() {
        let net = init_network(&ArchSpec::new(5, vec![16]), 4).unwrap();
        let x = random_batch(1, 5, 8);
        let det = forward_cached(&net, x.view(), DropoutMode::Disabled).inputs[1].clone();
        let mut acc = Array2::<f64>::zeros(det.raw_dim());
        let n = 20_000;
        for s in 0..n {
            acc += &forward_cached(&net, x.view(), DropoutMode::Enabled(s)).inputs[1];
        }
        acc /= n as f64;
        for (&a, &d) in acc.iter().zip(det.iter()) {
            if d > 1e-3 {
                assert!((a - d).abs() / d < 0.02, "mean {a} vs {d}");
            } else {
                assert!(a.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        let net = init_network(&ArchSpec::new(3, vec![6, 5]), 21).unwrap();
        let x = random_batch(7, 3, 4);
        let y = [0, 1, 1, 0, 1, 0, 0];
        let w = ClassWeights([0.7, 1.9]);
        let mode = DropoutMode::Enabled(13);
        let (_, grads) = loss_and_gradients(&net, x.view(), &y, &w, mode).unwrap();
        let loss_at = |n: &Network| {
            let p = forward(n, x.view(), mode).unwrap();
            weighted_cross_entropy(p.view(), &y, &w).unwrap()
        };
        for (l, g) in grads.iter().enumerate() {
            for ((i, j), &analytic) in g.weights.indexed_iter() {
                let mut plus = net.clone();
                plus.layers[l].weights[[i, j]] += h;
                let mut minus = net.clone();
                minus.layers[l].weights[[i, j]] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!((analytic - numeric).abs() / denom < 1e-4, "layer {l} ({i},{j}): {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn argmax_tie_goes_to_class_zero() {
        assert_eq!(argmax_rows(array![[0.5, 0.5], [0.3, 0.7], [0.7, 0.3]].view()), vec![0, 1, 0]);
    }
}
