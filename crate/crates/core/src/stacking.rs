//! The stacked tier: trust labels, meta-training and the dual-output
//! predictor.
//!
//! A base prediction is labelled trustworthy (`z = 1`) only when it is correct
//! and its PE is at most `tau`. The meta-model learns `z` from the original
//! features, optionally extended with PE (on by default) and the base mean
//! probabilities (off by default).

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, Dataset};
use crate::error::{Error, Result};
use crate::metrics::ground_truth_trust;
use crate::nn::{forward, init_network, train, ArchSpec, DropoutMode, Network, TrainConfig};
use crate::seed::{self, stream};
use crate::uq::{BasePrediction, UqSetting};

/// Meta probability at or above which a prediction is flagged trustworthy.
pub const TRUST_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub features: Vec<f64>,
    pub pe: f64,
    pub base_label: u8,
    pub truth: u8,
    pub z: u8,
    pub mean_probs: Vec<f64>,
}

/// Per-feature z-score parameters fitted on the meta-train features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }
}

/// How a meta input row is assembled: `features (optionally z-scored) ++
/// [pe] ++ mean_probs`, the last two parts being optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLayout {
    pub base_dim: usize,
    pub include_pe: bool,
    #[serde(default)]
    pub append_probs: bool,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
}

impl MetaLayout {
    pub fn new(base_dim: usize, include_pe: bool) -> Self {
        Self {
            base_dim,
            include_pe,
            append_probs: false,
            standardizer: None,
        }
    }

    pub fn width(&self) -> usize {
        self.base_dim + usize::from(self.include_pe) + if self.append_probs { 2 } else { 0 }
    }

    fn push_row(&self, out: &mut Vec<f64>, features: ArrayView1<f64>, pe: f64, probs: &[f64]) {
        match &self.standardizer {
            Some(s) => out.extend(features.iter().enumerate().map(|(j, &v)| (v - s.mean[j]) / s.std[j])),
            None => out.extend(features.iter()),
        }
        if self.include_pe {
            out.push(pe);
        }
        if self.append_probs {
            out.extend_from_slice(&probs[..2]);
        }
    }

    /// Meta input matrix for `features` and the matching base predictions.
    pub fn assemble(&self, features: ArrayView2<f64>, preds: &[BasePrediction]) -> Result<Array2<f64>> {
        if features.ncols() != self.base_dim {
            return Err(Error::DimensionMismatch {
                expected: self.base_dim,
                actual: features.ncols(),
            });
        }
        if features.nrows() != preds.len() {
            return Err(Error::LengthMismatch {
                left: features.nrows(),
                right: preds.len(),
            });
        }
        let mut data = Vec::with_capacity(features.nrows() * self.width());
        for (row, p) in features.rows().into_iter().zip(preds) {
            self.push_row(&mut data, row, p.pe, &p.mean_probs);
        }
        Ok(Array2::from_shape_vec((features.nrows(), self.width()), data).expect("row widths match layout"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    pub records: Vec<MetaRecord>,
    pub tau: f64,
    pub include_pe: bool,
    #[serde(default)]
    pub append_probs: bool,
    #[serde(default)]
    pub standardize: bool,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0,1)")));
    }
    Ok(())
}

/// One record per sample with `z = 1` iff `base_label == truth` and
/// `pe <= tau`.
pub fn build_meta_dataset(
    features: ArrayView2<f64>,
    base_preds: &[BasePrediction],
    truths: &[u8],
    tau: f64,
    include_pe: bool,
) -> Result<MetaDataset> {
    check_tau(tau)?;
    if features.nrows() != base_preds.len() || truths.len() != base_preds.len() {
        return Err(Error::LengthMismatch {
            left: features.nrows().max(truths.len()),
            right: base_preds.len(),
        });
    }
    let records = features
        .rows()
        .into_iter()
        .zip(base_preds)
        .zip(truths)
        .map(|((x, p), &y)| MetaRecord {
            features: x.to_vec(),
            pe: p.pe,
            base_label: p.predicted_label,
            truth: y,
            z: ground_truth_trust(p.predicted_label, y, p.pe, tau),
            mean_probs: p.mean_probs.clone(),
        })
        .collect();
    Ok(MetaDataset {
        records,
        tau,
        include_pe,
        append_probs: false,
        standardize: false,
    })
}

impl MetaDataset {
    pub fn with_probability_features(mut self, on: bool) -> Self {
        self.append_probs = on;
        self
    }

    pub fn with_standardization(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.z).collect()
    }

    pub fn trusted_count(&self) -> usize {
        self.records.iter().filter(|r| r.z == 1).count()
    }

    /// Layout implied by the flags, with the standardizer fitted on these
    /// records when requested.
    pub fn layout(&self) -> MetaLayout {
        let standardizer = self.standardize.then(|| {
            let rows: Vec<&[f64]> = self.records.iter().map(|r| r.features.as_slice()).collect();
            Standardizer::fit(&rows)
        });
        MetaLayout {
            base_dim: self.base_dim(),
            include_pe: self.include_pe,
            append_probs: self.append_probs,
            standardizer,
        }
    }

    /// Meta inputs and `z` targets as a [`Dataset`].
    pub fn to_dataset(&self, layout: &MetaLayout) -> Result<Dataset> {
        if self.is_empty() {
            return Err(Error::Empty("meta dataset"));
        }
        let mut data = Vec::with_capacity(self.len() * layout.width());
        for r in &self.records {
            layout.push_row(&mut data, ArrayView1::from(&r.features), r.pe, &r.mean_probs);
        }
        let x = Array2::from_shape_vec((self.len(), layout.width()), data)
            .map_err(|e| Error::InvalidDataset(e.to_string()))?;
        Dataset::new(x, self.labels(), format!("meta(tau={})", self.tau))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = (0..self.base_dim()).map(|j| format!("f{j}")).collect();
        header.extend(["pe", "base_label", "truth", "z"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
            row.extend([r.pe.to_string(), r.base_label.to_string(), r.truth.to_string(), r.z.to_string()]);
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Train the meta-model on `z`, with balanced class weights computed from the
/// `z` distribution. The initialisation seed is derived from
/// `cfg.shuffle_seed`.
pub fn train_meta(meta: &MetaDataset, cfg: &TrainConfig, arch: &ArchSpec) -> Result<(Network, MetaLayout)> {
    if meta.is_empty() {
        return Err(Error::Empty("meta dataset"));
    }
    let trusted = meta.trusted_count();
    if trusted == 0 || trusted == meta.len() {
        return Err(Error::DegenerateMetaLabels {
            tau: meta.tau,
            value: u8::from(trusted > 0),
        });
    }
    let layout = meta.layout();
    if arch.input_dim != layout.width() {
        return Err(Error::LayoutMismatch {
            expected: arch.input_dim,
            actual: layout.width(),
        });
    }
    let data = meta.to_dataset(&layout)?;
    let cfg = TrainConfig {
        class_weights: Some(class_weights(data.labels())?),
        ..cfg.clone()
    };
    let net = init_network(arch, seed::derive(cfg.shuffle_seed, &[stream::INIT]))?;
    Ok((train(&net, &data, &cfg)?, layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustPrediction {
    pub trust_flag: u8,
    pub trust_prob: f64,
}

impl TrustPrediction {
    pub fn from_prob(trust_prob: f64) -> Self {
        Self {
            trust_flag: u8::from(trust_prob >= TRUST_THRESHOLD),
            trust_prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsnnOutput {
    pub label: u8,
    pub trust: TrustPrediction,
    pub pe: f64,
}

/// Meta-model trust probabilities for already-computed base predictions.
pub fn meta_trust(meta: &Network, layout: &MetaLayout, features: ArrayView2<f64>, preds: &[BasePrediction]) -> Result<Vec<TrustPrediction>> {
    if meta.input_dim() != layout.width() {
        return Err(Error::LayoutMismatch {
            expected: meta.input_dim(),
            actual: layout.width(),
        });
    }
    let x = layout.assemble(features, preds)?;
    let probs = forward(meta, x.view(), DropoutMode::Disabled)?;
    Ok(probs.rows().into_iter().map(|r| TrustPrediction::from_prob(r[1])).collect())
}

/// Label, trust flag and PE for every input row. Meta inference is
/// deterministic (dropout off).
pub fn usnn_predict(base: &UqSetting, meta: &Network, inputs: ArrayView2<f64>, layout: &MetaLayout) -> Result<Vec<UsnnOutput>> {
    let preds = base.predict_summary(inputs)?;
    let trust = meta_trust(meta, layout, inputs, &preds)?;
    Ok(preds
        .iter()
        .zip(trust)
        .map(|(p, trust)| UsnnOutput {
            label: p.predicted_label,
            trust,
            pe: p.pe,
        })
        .collect())
}

/// `sample_id,label,trust_flag,trust_prob,pe`
pub fn write_outputs_csv(outputs: &[UsnnOutput], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["sample_id", "label", "trust_flag", "trust_prob", "pe"])?;
    for (i, o) in outputs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            o.label.to_string(),
            o.trust.trust_flag.to_string(),
            o.trust.trust_prob.to_string(),
            o.pe.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A complete trained predictor: base tier, meta-model and feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsnnModel {
    pub base: UqSetting,
    pub meta: Network,
    pub layout: MetaLayout,
    pub tau: f64,
}

impl UsnnModel {
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<UsnnOutput>> {
        usnn_predict(&self.base, &self.meta, inputs, &self.layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, stratified_split, SyntheticSpec};
    use crate::nn::init_network;
    use ndarray::array;

    fn pred(label: u8, pe: f64) -> BasePrediction {
        BasePrediction {
            predicted_label: label,
            mean_probs: if label == 1 { vec![0.2, 0.8] } else { vec![0.8, 0.2] },
            pe,
            distribution: None,
        }
    }

    #[test]
    fn trust_label_branches() {
        let x = array![[0.0], [0.0], [0.0]];
        let preds = [pred(1, 0.05), pred(1, 0.01), pred(0, 0.30)];
        let meta = build_meta_dataset(x.view(), &preds, &[1, 0, 0], 0.1, true).unwrap();
        assert_eq!(meta.labels(), vec![1, 0, 0]);
    }

    #[test]
    fn build_errors() {
        let x = array![[0.0], [1.0]];
        assert!(build_meta_dataset(x.view(), &[pred(0, 0.1)], &[0, 1], 0.1, true).is_err());
        assert!(build_meta_dataset(x.view(), &[pred(0, 0.1), pred(0, 0.1)], &[0, 1], 1.0, true).is_err());
        assert!(build_meta_dataset(x.view(), &[pred(0, 0.1), pred(0, 0.1)], &[0, 1], 0.0, true).is_err());
    }

    #[test]
    fn layout_widths() {
        let x = array![[0.0, 1.0, 2.0], [1.0, 2.0, 3.0]];
        let preds = [pred(0, 0.05), pred(1, 0.5)];
        let with = build_meta_dataset(x.view(), &preds, &[0, 1], 0.1, true).unwrap();
        let without = build_meta_dataset(x.view(), &preds, &[0, 1], 0.1, false).unwrap();
        assert_eq!(with.layout().width(), 4);
        assert_eq!(without.layout().width(), 3);
        assert_eq!(with.clone().with_probability_features(true).layout().width(), 6);
        let ds = with.to_dataset(&with.layout()).unwrap();
        assert_eq!(ds.features().row(0).to_vec(), vec![0.0, 1.0, 2.0, 0.05]);
        let std = with.with_standardization(true);
        let ds = std.to_dataset(&std.layout()).unwrap();
        assert_eq!(ds.features().row(0).to_vec(), vec![-1.0, -1.0, -1.0, 0.05]);
    }

    #[test]
    fn degenerate_labels_error_names_tau() {
        let x = array![[0.0], [1.0]];
        let meta = build_meta_dataset(x.view(), &[pred(0, 0.5), pred(1, 0.5)], &[0, 1], 0.05, true).unwrap();
        let err = train_meta(&meta, &TrainConfig::default(), &ArchSpec::new(2, vec![4])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMetaLabels { value: 0, .. }));
        assert!(err.to_string().contains("0.05"));
    }

    #[test]
    fn meta_learns_pe_threshold() {
        // all base predictions correct; z = [pe <= tau] is a 1-d threshold on the pe column
        let n = 600;
        let tau = 0.3;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 37 + j * 11) % 17) as f64 / 17.0);
        let preds: Vec<BasePrediction> = (0..n).map(|i| pred((i % 2) as u8, ((i * 7919) % 1000) as f64 / 1000.0)).collect();
        let truths: Vec<u8> = preds.iter().map(|p| p.predicted_label).collect();
        let meta = build_meta_dataset(x.view(), &preds, &truths, tau, true).unwrap();
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 4 != 0);
        let pick = |idx: &[usize]| MetaDataset {
            records: idx.iter().map(|&i| meta.records[i].clone()).collect(),
            ..meta.clone()
        };
        let (train_set, test_set) = (pick(&train_idx), pick(&test_idx));
        let cfg = TrainConfig {
            epochs: 150,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let (net, layout) = train_meta(&train_set, &cfg, &ArchSpec::new(3, vec![32]).with_dropout(0.0)).unwrap();
        let test_x = test_set.to_dataset(&layout).unwrap();
        let probs = forward(&net, test_x.features().view(), DropoutMode::Disabled).unwrap();
        let correct = probs
            .rows()
            .into_iter()
            .zip(test_x.labels())
            .filter(|(p, &z)| TrustPrediction::from_prob(p[1]).trust_flag == z)
            .count();
        let acc = correct as f64 / test_x.n_samples() as f64;
        assert!(acc >= 0.99, "meta accuracy {acc}");
    }

    #[test]
    fn usnn_outputs_and_layout_checks() {
        let ds = make_synthetic(&SyntheticSpec::new(200, 3, 0.5, 4.0, 1)).unwrap();
        let net = init_network(&ArchSpec::new(3, vec![8]), 0).unwrap();
        let base = UqSetting::Mcd { net, passes: 5, seed: 0 };
        let layout = MetaLayout::new(3, true);
        let meta = init_network(&ArchSpec::new(4, vec![8]), 1).unwrap();
        let out = usnn_predict(&base, &meta, ds.features().view(), &layout).unwrap();
        assert_eq!(out.len(), 200);
        assert!(out.iter().all(|o| o.label <= 1 && o.trust.trust_flag <= 1));
        assert!(out.iter().all(|o| (o.trust.trust_prob >= 0.5) == (o.trust.trust_flag == 1)));

        let wrong = init_network(&ArchSpec::new(3, vec![8]), 1).unwrap();
        assert!(matches!(
            usnn_predict(&base, &wrong, ds.features().view(), &layout),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn constant_untrusting_meta_flags_everything() {
        let ds = make_synthetic(&SyntheticSpec::new(50, 2, 0.5, 4.0, 2)).unwrap();
        let base = UqSetting::Mcd {
            net: init_network(&ArchSpec::new(2, vec![8]), 0).unwrap(),
            passes: 3,
            seed: 0,
        };
        let mut meta = init_network(&ArchSpec::new(3, vec![4]), 0).unwrap();
        meta.layers.iter_mut().for_each(|l| l.weights.fill(0.0));
        meta.layers[1].bias[0] = 50.0;
        let out = usnn_predict(&base, &meta, ds.features().view(), &MetaLayout::new(2, true)).unwrap();
        assert!(out.iter().all(|o| o.trust.trust_flag == 0));
    }

    #[test]
    fn model_save_load_and_csv() {
        let ds = make_synthetic(&SyntheticSpec::new(40, 2, 0.5, 4.0, 3)).unwrap();
        let split = stratified_split(&ds, 0.25, 0).unwrap();
        let model = UsnnModel {
            base: UqSetting::Ensemble {
                members: vec![init_network(&ArchSpec::new(2, vec![4]), 0).unwrap()],
            },
            meta: init_network(&ArchSpec::new(3, vec![4]), 1).unwrap(),
            layout: MetaLayout::new(2, true),
            tau: 0.1,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path()).unwrap();
        let back = UsnnModel::load(f.path()).unwrap();
        assert_eq!(back, model);
        let out = back.predict(split.test.features().view()).unwrap();
        write_outputs_csv(&out, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "sample_id,label,trust_flag,trust_prob,pe");
        assert_eq!(text.lines().count(), 1 + split.test.n_samples());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn soundness_and_tau_monotonicity(rows in proptest::collection::vec((0u8..2, 0u8..2, 0.0f64..=1.0), 1..100),
                                              t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let x = Array2::<f64>::zeros((rows.len(), 1));
                let preds: Vec<BasePrediction> = rows.iter().map(|r| pred(r.0, r.2)).collect();
                let truths: Vec<u8> = rows.iter().map(|r| r.1).collect();
                let a = build_meta_dataset(x.view(), &preds, &truths, lo, true).unwrap();
                let b = build_meta_dataset(x.view(), &preds, &truths, hi, true).unwrap();
                for (ra, rb) in a.records.iter().zip(&b.records) {
                    prop_assert!(ra.z == 0 || ra.base_label == ra.truth);
                    prop_assert!(ra.z <= rb.z);
                }
            }
        }
    }
}
