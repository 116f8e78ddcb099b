//! Predictive distributions under Monte-Carlo dropout, deep ensembles and
//! their combination (EMCD), and the predictive entropy (PE) of their mean.
//!
//! Sample rows are ordered member-major: row `n * M + m` holds pass `m` of
//! member `n`. Pass `m` of member `n` always uses dropout seed
//! `derive(seed, [MCD, n, m])`, so an EMCD run with one member reproduces MCD
//! exactly and results never depend on thread scheduling.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, DropoutMode, Network};
use crate::seed::{self, stream};

/// Passes evaluated together before folding into the running mean.
const PASS_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum UqKind {
    Mcd { passes: usize },
    Ensemble { members: usize },
    Emcd { members: usize, passes: usize },
}

impl UqKind {
    pub fn sample_count(&self) -> usize {
        match *self {
            UqKind::Mcd { passes } => passes,
            UqKind::Ensemble { members } => members,
            UqKind::Emcd { members, passes } => members * passes,
        }
    }
}

/// Per-input class-probability samples and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    samples: Array2<f64>,
    mean: Vec<f64>,
    kind: UqKind,
}

fn row_mean(samples: ArrayView2<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; samples.ncols()];
    for row in samples.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let s = samples.nrows() as f64;
    acc.iter().map(|a| a / s).collect()
}

impl PredictiveDistribution {
    /// Validate `samples` (every row a probability vector within 1e-9) and
    /// compute the mean.
    pub fn from_samples(samples: Array2<f64>, kind: UqKind) -> Result<Self> {
        if samples.nrows() != kind.sample_count() {
            return Err(Error::LengthMismatch {
                left: samples.nrows(),
                right: kind.sample_count(),
            });
        }
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Empty("predictive samples"));
        }
        for row in samples.rows() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("sample row {row} is not a probability vector")));
            }
        }
        let mean = row_mean(samples.view());
        Ok(Self { samples, mean, kind })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn kind(&self) -> UqKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.mean.len()
    }
}

/// Shannon entropy of a probability vector in bits, divided by `log2(C)` so
/// that the result lies in [0, 1]. `0 * log 0` is taken as 0.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    (h / (p.len() as f64).log2()).clamp(0.0, 1.0)
}

/// Predictive entropy of the mean distribution.
pub fn prediction_entropy(dist: &PredictiveDistribution) -> f64 {
    normalized_entropy(dist.mean())
}

/// Base-model output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrediction {
    pub predicted_label: u8,
    pub mean_probs: Vec<f64>,
    pub pe: f64,
    /// Kept when predictions come from full distributions; streaming
    /// prediction drops the per-pass samples.
    pub distribution: Option<PredictiveDistribution>,
}

fn argmax(p: &[f64]) -> u8 {
    let mut best = 0;
    for (c, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = c;
        }
    }
    best as u8
}

impl BasePrediction {
    fn from_mean(mean: Vec<f64>) -> Self {
        BasePrediction {
            predicted_label: argmax(&mean),
            pe: normalized_entropy(&mean),
            mean_probs: mean,
            distribution: None,
        }
    }

    /// Probability assigned to class 1.
    pub fn positive_score(&self) -> f64 {
        self.mean_probs.get(1).copied().unwrap_or(0.0)
    }
}

/// Label is the argmax of the mean (ties go to class 0).
pub fn to_base_prediction(dist: PredictiveDistribution) -> BasePrediction {
    BasePrediction {
        distribution: Some(dist.clone()),
        ..BasePrediction::from_mean(dist.mean)
    }
}

/// A trained base tier together with the way it is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum UqSetting {
    Mcd { net: Network, passes: usize, seed: u64 },
    Ensemble { members: Vec<Network> },
    Emcd { members: Vec<Network>, passes: usize, seed: u64 },
}

impl UqSetting {
    pub fn kind(&self) -> UqKind {
        match self {
            UqSetting::Mcd { passes, .. } => UqKind::Mcd { passes: *passes },
            UqSetting::Ensemble { members } => UqKind::Ensemble { members: members.len() },
            UqSetting::Emcd { members, passes, .. } => UqKind::Emcd {
                members: members.len(),
                passes: *passes,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            UqSetting::Mcd { net, .. } => net.input_dim(),
            UqSetting::Ensemble { members } | UqSetting::Emcd { members, .. } => {
                members.first().map_or(0, |m| m.input_dim())
            }
        }
    }

    fn jobs(&self) -> Result<Vec<(&Network, DropoutMode)>> {
        let jobs: Vec<(&Network, DropoutMode)> = match self {
            UqSetting::Mcd { net, passes, seed } => {
                check_passes(*passes)?;
                (0..*passes).map(|m| (net, pass_mode(*seed, 0, m))).collect()
            }
            UqSetting::Ensemble { members } => {
                check_members(members)?;
                members.iter().map(|n| (n, DropoutMode::Disabled)).collect()
            }
            UqSetting::Emcd { members, passes, seed } => {
                check_members(members)?;
                check_passes(*passes)?;
                members
                    .iter()
                    .enumerate()
                    .flat_map(|(n, net)| (0..*passes).map(move |m| (net, pass_mode(*seed, n, m))))
                    .collect()
            }
        };
        Ok(jobs)
    }

    /// Full per-input distributions.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<PredictiveDistribution>> {
        let jobs = self.jobs()?;
        let outputs: Vec<Array2<f64>> = jobs
            .par_iter()
            .map(|(net, mode)| forward(net, inputs, *mode))
            .collect::<Result<_>>()?;
        let kind = self.kind();
        let n_classes = outputs[0].ncols();
        (0..inputs.nrows())
            .map(|i| {
                let mut samples = Array2::zeros((outputs.len(), n_classes));
                for (mut row, out) in samples.rows_mut().into_iter().zip(&outputs) {
                    row.assign(&out.row(i));
                }
                PredictiveDistribution::from_samples(samples, kind)
            })
            .collect()
    }

    /// Label, mean and PE per input without retaining per-pass samples. The
    /// mean is accumulated in the same order as [`UqSetting::predict`], so
    /// both routes agree bit for bit.
    pub fn predict_summary(&self, inputs: ArrayView2<f64>) -> Result<Vec<BasePrediction>> {
        let jobs = self.jobs()?;
        let mut acc: Option<Array2<f64>> = None;
        for chunk in jobs.chunks(PASS_CHUNK) {
            let outputs: Vec<Array2<f64>> = chunk
                .par_iter()
                .map(|(net, mode)| forward(net, inputs, *mode))
                .collect::<Result<_>>()?;
            for out in outputs {
                match acc.as_mut() {
                    None => acc = Some(out),
                    Some(a) => *a += &out,
                }
            }
        }
        let mut acc = acc.expect("at least one job");
        acc /= jobs.len() as f64;
        Ok(acc
            .axis_iter(Axis(0))
            .map(|row| BasePrediction::from_mean(row.to_vec()))
            .collect())
    }
}

fn pass_mode(seed: u64, member: usize, pass: usize) -> DropoutMode {
    DropoutMode::Enabled(seed::derive(seed, &[stream::MCD, member as u64, pass as u64]))
}

fn check_passes(passes: usize) -> Result<()> {
    if passes == 0 {
        return Err(Error::InvalidArgument("number of passes must be positive".into()));
    }
    Ok(())
}

fn check_members(members: &[Network]) -> Result<()> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    if let Some(m) = members.iter().find(|m| m.input_dim() != first.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: first.input_dim(),
            actual: m.input_dim(),
        });
    }
    Ok(())
}

/// `passes` dropout-enabled forward passes of one network.
pub fn predict_mcd(net: &Network, inputs: ArrayView2<f64>, passes: usize, seed: u64) -> Result<Vec<PredictiveDistribution>> {
    UqSetting::Mcd {
        net: net.clone(),
        passes,
        seed,
    }
    .predict(inputs)
}

/// One deterministic pass per ensemble member.
pub fn predict_ensemble(members: &[Network], inputs: ArrayView2<f64>) -> Result<Vec<PredictiveDistribution>> {
    UqSetting::Ensemble {
        members: members.to_vec(),
    }
    .predict(inputs)
}

/// `passes` dropout-enabled passes of every member.
pub fn predict_emcd(members: &[Network], inputs: ArrayView2<f64>, passes: usize, seed: u64) -> Result<Vec<PredictiveDistribution>> {
    UqSetting::Emcd {
        members: members.to_vec(),
        passes,
        seed,
    }
    .predict(inputs)
}

/// One row per (sample, member, pass): `sample_id,member_id,pass_id,p0,p1`.
pub fn write_distributions_csv(dists: &[PredictiveDistribution], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let n_classes = dists.first().map_or(2, |d| d.n_classes());
    let mut header = vec!["sample_id".to_string(), "member_id".into(), "pass_id".into()];
    header.extend((0..n_classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (i, d) in dists.iter().enumerate() {
        let passes = match d.kind {
            UqKind::Mcd { passes } | UqKind::Emcd { passes, .. } => passes,
            UqKind::Ensemble { .. } => 1,
        };
        for (s, row) in d.samples.rows().into_iter().enumerate() {
            let mut rec = vec![i.to_string(), (s / passes).to_string(), (s % passes).to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
