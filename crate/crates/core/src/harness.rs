//! Repeated-split evaluation protocol.
//!
//! Each repetition draws a test fraction, makes a stratified split, trains
//! the base tier under the configured UQ method, builds the meta-train set
//! from base predictions on the training side only, trains one meta-model per
//! confidence threshold and scores the test side. Repetition `r` takes every
//! seed from `derive(master_seed, [r, ...])`, so reports are identical for
//! any thread count.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, make_synthetic, stratified_split, Dataset, SplitPair, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{auc, f1_score, trust_confusion, trust_report, EvalRecord, TrustConfusionMatrix, TrustReport};
use crate::nn::{argmax_rows, forward, init_network, sample_architecture, train, ArchSpec, DropoutMode, Network, TrainConfig};
use crate::seed::{self, stream};
use crate::stacking::{build_meta_dataset, meta_trust, train_meta, MetaDataset, MetaLayout, UsnnModel};
use crate::uq::{BasePrediction, UqSetting};

pub const DEFAULT_TAUS: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];
/// Validation share of the architecture-search sub-split.
pub const TUNE_VALIDATION_FRACTION: f64 = 0.3;
/// Share of the training split kept for meta construction in holdout mode.
pub const META_HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DatasetSource {
    Csv { path: PathBuf, label_column: String },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Csv { path, label_column } => load_dataset(path, label_column),
            DatasetSource::Synthetic(spec) => make_synthetic(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UqMethod {
    Mcd,
    Ensemble,
    Emcd,
}

impl fmt::Display for UqMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UqMethod::Mcd => "mcd",
            UqMethod::Ensemble => "ensemble",
            UqMethod::Emcd => "emcd",
        })
    }
}

impl std::str::FromStr for UqMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcd" => Ok(UqMethod::Mcd),
            "ensemble" => Ok(UqMethod::Ensemble),
            "emcd" => Ok(UqMethod::Emcd),
            other => Err(Error::Config(format!("unknown uq method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub uq: UqMethod,
    pub mcd_passes: usize,
    pub ensemble_size: usize,
    pub taus: Vec<f64>,
    /// Audit mode: score every meta-model against trust labels computed at
    /// this threshold instead of its own training threshold.
    pub evaluation_tau: Option<f64>,
    pub repetitions: usize,
    pub test_fraction_range: [f64; 2],
    pub include_pe: bool,
    /// Also feed the base mean probabilities to the meta-model.
    pub append_probs: bool,
    /// z-score the embedding features before the meta-model.
    pub standardize: bool,
    pub master_seed: u64,
    /// `shuffle_seed` is replaced by seeds derived from `master_seed`.
    pub base_train: TrainConfig,
    pub meta_train: TrainConfig,
    /// Random-search candidates per architecture search.
    pub search_budget: usize,
    /// Epochs used to score each search candidate.
    pub tune_epochs: usize,
    /// Fixed hidden widths for the base networks; skips the search (MCD) or
    /// the random architectures (ensemble members).
    pub base_hidden: Option<Vec<usize>>,
    /// Fixed hidden widths for the meta-model; skips the search.
    pub meta_hidden: Option<Vec<usize>>,
    pub dropout_rate: f64,
    pub retune_per_repetition: bool,
    /// Train the base tier on 80% of the training split and build the
    /// meta-train set from the remaining 20%.
    pub meta_holdout: bool,
    /// Worker threads; never affects results.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec::new(2000, 16, 0.5, 1.5, 0)),
            uq: UqMethod::Mcd,
            mcd_passes: 100,
            ensemble_size: 30,
            taus: DEFAULT_TAUS.to_vec(),
            evaluation_tau: None,
            repetitions: 30,
            test_fraction_range: [0.20, 0.40],
            include_pe: true,
            append_probs: false,
            standardize: false,
            master_seed: 0,
            base_train: TrainConfig::default(),
            meta_train: TrainConfig::default(),
            search_budget: 8,
            tune_epochs: 5,
            base_hidden: None,
            meta_hidden: None,
            dropout_rate: crate::nn::DEFAULT_DROPOUT,
            retune_per_repetition: false,
            meta_holdout: false,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.taus.is_empty() {
            return bad("taus must not be empty".into());
        }
        if self.taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return bad(format!("every tau must lie in (0,1): {:?}", self.taus));
        }
        if self.taus.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("taus must be strictly increasing: {:?}", self.taus));
        }
        if let Some(t) = self.evaluation_tau {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("evaluation_tau {t} outside (0,1)"));
            }
        }
        let [lo, hi] = self.test_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("test_fraction_range {lo}..{hi} invalid"));
        }
        if self.repetitions == 0 || self.mcd_passes == 0 || self.ensemble_size == 0 || self.search_budget == 0 || self.tune_epochs == 0 {
            return bad("repetitions, mcd_passes, ensemble_size, search_budget and tune_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        for hidden in [&self.base_hidden, &self.meta_hidden].into_iter().flatten() {
            if hidden.contains(&0) {
                return bad("hidden widths must be positive".into());
            }
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        self.base_train.validate().map_err(|e| Error::Config(format!("base_train: {e}")))?;
        self.meta_train.validate().map_err(|e| Error::Config(format!("meta_train: {e}")))?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }
}

/// Mean and sample (n-1) standard deviation over the present values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Stat { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Stat { mean: Some(mean), std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub tau: f64,
    pub evaluation_tau: f64,
    /// Reason the meta tier was not trained for this repetition.
    pub skipped: Option<String>,
    pub meta_train_size: usize,
    /// Meta-train records labelled trustworthy.
    pub meta_train_trusted: usize,
    pub meta_input_width: usize,
    pub meta_f1: Option<f64>,
    pub meta_auc: Option<f64>,
    pub matrix: Option<TrustConfusionMatrix>,
    pub report: Option<TrustReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub base_f1: f64,
    pub base_auc: f64,
    /// Mean test PE over correctly / incorrectly classified samples.
    pub mean_pe_correct: Option<f64>,
    pub mean_pe_incorrect: Option<f64>,
    pub per_tau: Vec<TauResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauAggregate {
    pub tau: f64,
    pub skipped: usize,
    pub meta_f1: Stat,
    pub meta_auc: Stat,
    pub car: Stat,
    pub cpr: Stat,
    pub tpr_trust: Stat,
    pub ftr: Stat,
    pub rar: Stat,
    pub mrr: Stat,
    pub trr: Stat,
    pub frr: Stat,
}

impl TauAggregate {
    pub fn rate(&self, name: &str) -> Option<&Stat> {
        Some(match name {
            "meta_f1" => &self.meta_f1,
            "meta_auc" => &self.meta_auc,
            "car" => &self.car,
            "cpr" => &self.cpr,
            "tpr_trust" => &self.tpr_trust,
            "ftr" => &self.ftr,
            "rar" => &self.rar,
            "mrr" => &self.mrr,
            "trr" => &self.trr,
            "frr" => &self.frr,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub base_f1: Stat,
    pub base_auc: Stat,
    pub per_tau: Vec<TauAggregate>,
}

impl Aggregates {
    pub fn compute(reps: &[RepetitionResult], taus: &[f64]) -> Self {
        let per_tau = taus
            .iter()
            .enumerate()
            .map(|(k, &tau)| {
                let rows: Vec<&TauResult> = reps.iter().map(|r| &r.per_tau[k]).collect();
                let rate = |f: fn(&TrustReport) -> Option<f64>| Stat::of(rows.iter().map(|t| t.report.as_ref().and_then(f)));
                TauAggregate {
                    tau,
                    skipped: rows.iter().filter(|t| t.skipped.is_some()).count(),
                    meta_f1: Stat::of(rows.iter().map(|t| t.meta_f1)),
                    meta_auc: Stat::of(rows.iter().map(|t| t.meta_auc)),
                    car: rate(|r| Some(r.car)),
                    cpr: rate(|r| r.cpr),
                    tpr_trust: rate(|r| r.tpr_trust),
                    ftr: rate(|r| Some(r.ftr)),
                    rar: rate(|r| Some(r.rar)),
                    mrr: rate(|r| r.mrr),
                    trr: rate(|r| r.trr),
                    frr: rate(|r| r.frr),
                }
            })
            .collect();
        Aggregates {
            base_f1: Stat::of(reps.iter().map(|r| Some(r.base_f1))),
            base_auc: Stat::of(reps.iter().map(|r| Some(r.base_auc))),
            per_tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub repetitions: Vec<RepetitionResult>,
    pub aggregates: Aggregates,
}

impl ExperimentReport {
    pub fn tau_aggregate(&self, tau: f64) -> Option<&TauAggregate> {
        self.aggregates.per_tau.iter().find(|a| a.tau == tau)
    }

    /// The same report restricted to one threshold.
    pub fn for_tau(&self, tau: f64) -> Option<ExperimentReport> {
        let k = self.config.taus.iter().position(|&t| t == tau)?;
        let repetitions: Vec<RepetitionResult> = self
            .repetitions
            .iter()
            .map(|r| RepetitionResult {
                per_tau: vec![r.per_tau[k].clone()],
                ..r.clone()
            })
            .collect();
        let config = ExperimentConfig {
            taus: vec![tau],
            ..self.config.clone()
        };
        let aggregates = Aggregates::compute(&repetitions, &config.taus);
        Some(ExperimentReport {
            config,
            repetitions,
            aggregates,
        })
    }
}

/// Indices (into the loaded dataset) touched by one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionTrace {
    pub repetition: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Rows the base tier was fitted on.
    pub base_fit_indices: Vec<usize>,
    /// Rows whose base predictions formed the meta-train set.
    pub meta_source_indices: Vec<usize>,
}

fn tune_config(cfg: &TrainConfig, epochs: usize, shuffle_seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        shuffle_seed,
        early_stop_patience: None,
        ..cfg.clone()
    }
}

/// Pick the candidate with the best validation F1 after a short training run
/// on a 70/30 stratified sub-split of `data`. Ties keep the earlier candidate.
pub fn tune_over(data: &Dataset, candidates: &[ArchSpec], seed: u64, cfg: &TrainConfig) -> Result<ArchSpec> {
    if candidates.is_empty() {
        return Err(Error::Empty("architecture candidates"));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    let split = stratified_split(data, TUNE_VALIDATION_FRACTION, seed::derive(seed, &[stream::SPLIT]))?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, arch)| {
            let k = k as u64;
            let net = init_network(arch, seed::derive(seed, &[stream::INIT, k]))?;
            let cfg = TrainConfig {
                shuffle_seed: seed::derive(seed, &[stream::SHUFFLE, k]),
                ..cfg.clone()
            };
            let net = train(&net, &split.train, &cfg)?;
            let probs = forward(&net, split.test.features().view(), DropoutMode::Disabled)?;
            f1_score(split.test.labels(), &argmax_rows(probs.view()))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    log::debug!("architecture search scores {scores:?}, chose {:?}", candidates[best].hidden_layers);
    Ok(candidates[best].clone())
}

/// Budgeted random search over 1-4 hidden layers of 16-512 units.
pub fn tune_architecture(data: &Dataset, budget: usize, seed: u64, cfg: &TrainConfig, dropout_rate: f64) -> Result<ArchSpec> {
    if budget == 0 {
        return Err(Error::InvalidArgument("search budget must be positive".into()));
    }
    let candidates: Vec<ArchSpec> = (0..budget as u64)
        .map(|k| sample_architecture(seed::derive(seed, &[stream::ARCH, k]), data.n_features()).with_dropout(dropout_rate))
        .collect();
    tune_over(data, &candidates, seed, cfg)
}

fn rep_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    seed::derive(cfg.master_seed, &[r as u64])
}

fn draw_test_fraction(cfg: &ExperimentConfig, rep_seed: u64) -> f64 {
    let [lo, hi] = cfg.test_fraction_range;
    let u: f64 = seed::rng(seed::derive(rep_seed, &[stream::TEST_FRACTION])).random();
    lo + (hi - lo) * u
}

fn rep_split(cfg: &ExperimentConfig, data: &Dataset, r: usize) -> Result<SplitPair> {
    let s = rep_seed(cfg, r);
    stratified_split(data, draw_test_fraction(cfg, s), seed::derive(s, &[stream::SPLIT]))
}

/// Train the base tier under `cfg.uq`.
fn train_base(cfg: &ExperimentConfig, data: &Dataset, mcd_arch: Option<&ArchSpec>, rep_seed: u64) -> Result<UqSetting> {
    let member = |n: usize, arch: ArchSpec| -> Result<Network> {
        let n = n as u64;
        let net = init_network(&arch, seed::derive(rep_seed, &[stream::INIT, n]))?;
        let tc = TrainConfig {
            shuffle_seed: seed::derive(rep_seed, &[stream::SHUFFLE, n]),
            ..cfg.base_train.clone()
        };
        train(&net, data, &tc)
    };
    let member_arch = |n: usize| match &cfg.base_hidden {
        Some(h) => ArchSpec::new(data.n_features(), h.clone()).with_dropout(cfg.dropout_rate),
        None => sample_architecture(seed::derive(rep_seed, &[stream::ARCH, n as u64]), data.n_features()).with_dropout(cfg.dropout_rate),
    };
    let mcd_seed = seed::derive(rep_seed, &[stream::MCD]);
    Ok(match cfg.uq {
        UqMethod::Mcd => {
            let arch = mcd_arch.cloned().unwrap_or_else(|| member_arch(0));
            UqSetting::Mcd {
                net: member(0, arch)?,
                passes: cfg.mcd_passes,
                seed: mcd_seed,
            }
        }
        UqMethod::Ensemble | UqMethod::Emcd => {
            let members = (0..cfg.ensemble_size)
                .into_par_iter()
                .map(|n| member(n, member_arch(n)))
                .collect::<Result<Vec<_>>>()?;
            if cfg.uq == UqMethod::Ensemble {
                UqSetting::Ensemble { members }
            } else {
                UqSetting::Emcd {
                    members,
                    passes: cfg.mcd_passes,
                    seed: mcd_seed,
                }
            }
        }
    })
}

fn mcd_arch_for(cfg: &ExperimentConfig, train: &Dataset, tune_seed: u64) -> Result<Option<ArchSpec>> {
    if cfg.uq != UqMethod::Mcd {
        return Ok(None);
    }
    Ok(Some(match &cfg.base_hidden {
        Some(h) => ArchSpec::new(train.n_features(), h.clone()).with_dropout(cfg.dropout_rate),
        None => tune_architecture(
            train,
            cfg.search_budget,
            tune_seed,
            &tune_config(&cfg.base_train, cfg.tune_epochs, 0),
            cfg.dropout_rate,
        )?,
    }))
}

struct BaseStage {
    repetition: usize,
    seed: u64,
    split: SplitPair,
    trace: RepetitionTrace,
    meta_source: Dataset,
    meta_source_preds: Vec<BasePrediction>,
    test_preds: Vec<BasePrediction>,
    base_f1: f64,
    base_auc: f64,
    mean_pe_correct: Option<f64>,
    mean_pe_incorrect: Option<f64>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn base_stage(cfg: &ExperimentConfig, data: &Dataset, r: usize, shared_arch: Option<&ArchSpec>) -> Result<BaseStage> {
    let seed = rep_seed(cfg, r);
    let split = rep_split(cfg, data, r)?;

    // Rows of the training split used to fit the base tier and to build the meta set.
    let (fit_local, meta_local): (Vec<usize>, Vec<usize>) = if cfg.meta_holdout {
        let inner = stratified_split(&split.train, META_HOLDOUT_FRACTION, seed::derive(seed, &[stream::HOLDOUT]))?;
        (inner.train_indices, inner.test_indices)
    } else {
        let all: Vec<usize> = (0..split.train.n_samples()).collect();
        (all.clone(), all)
    };
    let fit_set = split.train.select(&fit_local);
    let meta_source = split.train.select(&meta_local);

    let arch = match shared_arch {
        Some(a) => Some(a.clone()),
        None => mcd_arch_for(cfg, &fit_set, seed::derive(seed, &[stream::TUNE]))?,
    };
    let base = train_base(cfg, &fit_set, arch.as_ref(), seed)?;
    let meta_source_preds = base.predict_summary(meta_source.features().view())?;
    let test_preds = base.predict_summary(split.test.features().view())?;

    let labels: Vec<u8> = test_preds.iter().map(|p| p.predicted_label).collect();
    let scores: Vec<f64> = test_preds.iter().map(|p| p.positive_score()).collect();
    let truths = split.test.labels();
    let base_f1 = f1_score(truths, &labels)?;
    let base_auc = auc(truths, &scores)?;
    let mean_pe_correct = mean_of(test_preds.iter().zip(truths).filter(|(p, &y)| p.predicted_label == y).map(|(p, _)| p.pe));
    let mean_pe_incorrect = mean_of(test_preds.iter().zip(truths).filter(|(p, &y)| p.predicted_label != y).map(|(p, _)| p.pe));

    let to_parent = |local: &[usize]| local.iter().map(|&i| split.train_indices[i]).collect::<Vec<_>>();
    let trace = RepetitionTrace {
        repetition: r,
        train_indices: split.train_indices.clone(),
        test_indices: split.test_indices.clone(),
        base_fit_indices: to_parent(&fit_local),
        meta_source_indices: to_parent(&meta_local),
    };
    Ok(BaseStage {
        repetition: r,
        seed,
        split,
        trace,
        meta_source,
        meta_source_preds,
        test_preds,
        base_f1,
        base_auc,
        mean_pe_correct,
        mean_pe_incorrect,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MetaVariant {
    include_pe: bool,
}

fn meta_set(cfg: &ExperimentConfig, stage: &BaseStage, tau: f64, variant: MetaVariant) -> Result<MetaDataset> {
    Ok(build_meta_dataset(
        stage.meta_source.features().view(),
        &stage.meta_source_preds,
        stage.meta_source.labels(),
        tau,
        variant.include_pe,
    )?
    .with_probability_features(cfg.append_probs)
    .with_standardization(cfg.standardize))
}

fn is_degenerate(meta: &MetaDataset) -> bool {
    let t = meta.trusted_count();
    t == 0 || t == meta.len()
}

/// Meta architecture search on a meta-train set.
fn tune_meta(cfg: &ExperimentConfig, meta: &MetaDataset, tune_seed: u64) -> Result<ArchSpec> {
    let layout = meta.layout();
    let width = layout.width();
    if let Some(h) = &cfg.meta_hidden {
        return Ok(ArchSpec::new(width, h.clone()).with_dropout(cfg.dropout_rate));
    }
    let data = meta.to_dataset(&layout)?;
    let candidates: Vec<ArchSpec> = (0..cfg.search_budget as u64)
        .map(|k| sample_architecture(seed::derive(tune_seed, &[stream::ARCH, k]), width).with_dropout(cfg.dropout_rate))
        .collect();
    let tc = TrainConfig {
        class_weights: Some(crate::data::class_weights(data.labels())?),
        ..tune_config(&cfg.meta_train, cfg.tune_epochs, 0)
    };
    tune_over(&data, &candidates, tune_seed, &tc)
}

fn meta_stage(cfg: &ExperimentConfig, stage: &BaseStage, tau: f64, variant: MetaVariant, shared_arch: Option<&ArchSpec>) -> Result<TauResult> {
    let eval_tau = cfg.evaluation_tau.unwrap_or(tau);
    let meta = meta_set(cfg, stage, tau, variant)?;
    let width = meta.layout().width();
    let mut result = TauResult {
        tau,
        evaluation_tau: eval_tau,
        skipped: None,
        meta_train_size: meta.len(),
        meta_train_trusted: meta.trusted_count(),
        meta_input_width: width,
        meta_f1: None,
        meta_auc: None,
        matrix: None,
        report: None,
    };
    if is_degenerate(&meta) {
        let reason = format!(
            "degenerate meta labels at tau = {tau}: {} of {} trusted",
            meta.trusted_count(),
            meta.len()
        );
        log::warn!("repetition {}: {reason}; skipped", stage.repetition);
        result.skipped = Some(reason);
        return Ok(result);
    }
    let arch = match shared_arch {
        Some(a) => a.clone(),
        None => tune_meta(cfg, &meta, seed::derive(stage.seed, &[stream::TUNE, stream::META]))?,
    };
    let tc = TrainConfig {
        shuffle_seed: seed::derive(stage.seed, &[stream::META]),
        ..cfg.meta_train.clone()
    };
    let (net, layout) = train_meta(&meta, &tc, &arch)?;

    let test = &stage.split.test;
    let trust = meta_trust(&net, &layout, test.features().view(), &stage.test_preds)?;
    let records: Vec<EvalRecord> = stage
        .test_preds
        .iter()
        .zip(test.labels())
        .zip(&trust)
        .map(|((p, &y), t)| EvalRecord::new(y, p.predicted_label, p.pe, eval_tau, t.trust_flag))
        .collect();
    let z: Vec<u8> = records.iter().map(|r| r.trust_truth).collect();
    let z_hat: Vec<u8> = trust.iter().map(|t| t.trust_flag).collect();
    let probs: Vec<f64> = trust.iter().map(|t| t.trust_prob).collect();
    let matrix = trust_confusion(&records, eval_tau)?;
    result.meta_f1 = Some(f1_score(&z, &z_hat)?);
    result.meta_auc = match auc(&z, &probs) {
        Ok(v) => Some(v),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    result.report = Some(trust_report(&matrix)?);
    result.matrix = Some(matrix);
    Ok(result)
}

fn run_variants(cfg: &ExperimentConfig, variants: &[MetaVariant]) -> Result<(Vec<ExperimentReport>, Vec<RepetitionTrace>)> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    log::info!(
        "experiment: {} samples, {} features, uq {}, {} repetitions, master seed {}",
        data.n_samples(),
        data.n_features(),
        cfg.uq,
        cfg.repetitions,
        cfg.master_seed
    );
    cfg.in_pool(|| {
        // Base architecture: searched once on the first training split unless retuning.
        let shared_base_arch = if cfg.retune_per_repetition {
            None
        } else {
            let split = rep_split(cfg, &data, 0)?;
            mcd_arch_for(cfg, &split.train, seed::derive(cfg.master_seed, &[stream::TUNE]))?
        };
        let stages: Vec<BaseStage> = (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| base_stage(cfg, &data, r, shared_base_arch.as_ref()))
            .collect::<Result<_>>()?;

        let mut reports = Vec::with_capacity(variants.len());
        for &variant in variants {
            // Meta architecture per tau: searched once on the first repetition
            // whose meta-train set is not degenerate.
            let shared_meta: Vec<Option<ArchSpec>> = if cfg.retune_per_repetition {
                vec![None; cfg.taus.len()]
            } else {
                cfg.taus
                    .par_iter()
                    .enumerate()
                    .map(|(k, &tau)| -> Result<Option<ArchSpec>> {
                        for stage in &stages {
                            let meta = meta_set(cfg, stage, tau, variant)?;
                            if !is_degenerate(&meta) {
                                let s = seed::derive(cfg.master_seed, &[stream::TUNE, stream::META, k as u64]);
                                return tune_meta(cfg, &meta, s).map(Some);
                            }
                        }
                        Ok(None)
                    })
                    .collect::<Result<_>>()?
            };
            let repetitions: Vec<RepetitionResult> = stages
                .par_iter()
                .map(|stage| {
                    let per_tau = cfg
                        .taus
                        .par_iter()
                        .zip(&shared_meta)
                        .map(|(&tau, arch)| meta_stage(cfg, stage, tau, variant, arch.as_ref()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(RepetitionResult {
                        repetition: stage.repetition,
                        seed: stage.seed,
                        split_seed: stage.split.seed,
                        test_fraction: stage.split.test_fraction,
                        n_train: stage.split.train.n_samples(),
                        n_test: stage.split.test.n_samples(),
                        base_f1: stage.base_f1,
                        base_auc: stage.base_auc,
                        mean_pe_correct: stage.mean_pe_correct,
                        mean_pe_incorrect: stage.mean_pe_incorrect,
                        per_tau,
                    })
                })
                .collect::<Result<_>>()?;
            let config = ExperimentConfig {
                include_pe: variant.include_pe,
                ..cfg.clone()
            };
            let aggregates = Aggregates::compute(&repetitions, &config.taus);
            reports.push(ExperimentReport {
                config,
                repetitions,
                aggregates,
            });
        }
        Ok((reports, stages.into_iter().map(|s| s.trace).collect()))
    })?
}

/// Run the full protocol for every threshold in `cfg.taus`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_traced(cfg).map(|(r, _)| r)
}

/// As [`run_experiment`], also returning which dataset rows each repetition
/// used for what.
pub fn run_experiment_traced(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<RepetitionTrace>)> {
    let (mut reports, traces) = run_variants(cfg, &[MetaVariant { include_pe: cfg.include_pe }])?;
    Ok((reports.remove(0), traces))
}

/// One report per threshold. All thresholds share the same splits and base
/// models within a repetition.
pub fn threshold_sweep(cfg: &ExperimentConfig, taus: &[f64]) -> Result<SweepReport> {
    let cfg = ExperimentConfig {
        taus: taus.to_vec(),
        ..cfg.clone()
    };
    let combined = run_experiment(&cfg)?;
    let reports = taus
        .iter()
        .map(|&t| combined.for_tau(t).expect("tau present in combined report"))
        .collect();
    Ok(SweepReport { reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<ExperimentReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_pe: ExperimentReport,
    pub without_pe: ExperimentReport,
}

/// Paired runs with and without PE in the meta input; splits, base models and
/// meta seeds are shared.
pub fn ablation_pe(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let (mut reports, _) = run_variants(cfg, &[MetaVariant { include_pe: true }, MetaVariant { include_pe: false }])?;
    let without_pe = reports.pop().expect("two arms");
    let with_pe = reports.pop().expect("two arms");
    Ok(AblationReport { with_pe, without_pe })
}

/// Fit the whole two-tier predictor on `data` at one threshold.
pub fn fit_usnn(cfg: &ExperimentConfig, data: &Dataset, tau: f64) -> Result<UsnnModel> {
    cfg.validate()?;
    cfg.in_pool(|| {
        let seed = seed::derive(cfg.master_seed, &[u64::MAX]);
        let arch = mcd_arch_for(cfg, data, seed::derive(cfg.master_seed, &[stream::TUNE]))?;
        let base = train_base(cfg, data, arch.as_ref(), seed)?;
        let preds = base.predict_summary(data.features().view())?;
        let meta = build_meta_dataset(data.features().view(), &preds, data.labels(), tau, cfg.include_pe)?
            .with_probability_features(cfg.append_probs)
            .with_standardization(cfg.standardize);
        let arch = tune_meta(cfg, &meta, seed::derive(cfg.master_seed, &[stream::TUNE, stream::META]))?;
        let tc = TrainConfig {
            shuffle_seed: seed::derive(seed, &[stream::META]),
            ..cfg.meta_train.clone()
        };
        let (meta_net, layout): (Network, MetaLayout) = train_meta(&meta, &tc, &arch)?;
        Ok(UsnnModel {
            base,
            meta: meta_net,
            layout,
            tau,
        })
    })?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Reports that can be written as JSON or as one CSV row per
/// (arm, repetition, tau).
pub trait Reportable: Serialize {
    fn arms(&self) -> Vec<(&str, &ExperimentReport)>;
}

impl Reportable for ExperimentReport {
    fn arms(&self) -> Vec<(&str, &ExperimentReport)> {
        vec![("main", self)]
    }
}

impl Reportable for SweepReport {
    fn arms(&self) -> Vec<(&str, &ExperimentReport)> {
        self.reports.iter().map(|r| ("sweep", r)).collect()
    }
}

impl Reportable for AblationReport {
    fn arms(&self) -> Vec<(&str, &ExperimentReport)> {
        vec![("with_pe", &self.with_pe), ("without_pe", &self.without_pe)]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "arm",
        "include_pe",
        "repetition",
        "seed",
        "test_fraction",
        "n_train",
        "n_test",
        "tau",
        "evaluation_tau",
        "skipped",
        "base_f1",
        "base_auc",
        "meta_f1",
        "meta_auc",
        "car",
        "cpr",
        "tpr_trust",
        "ftr",
        "rar",
        "mrr",
        "trr",
        "frr",
        "tap",
        "ttp",
        "tup",
        "total",
    ]
    .map(String::from)
    .to_vec();
    let m = TrustConfusionMatrix::empty(0.0);
    h.extend(m.cells().map(|(c, t, _)| TrustConfusionMatrix::cell_name(c, t)));
    h
}

pub fn csv_rows(report: &impl Reportable) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (arm, rep) in report.arms() {
        for r in &rep.repetitions {
            for t in &r.per_tau {
                let mut row = vec![
                    arm.to_string(),
                    rep.config.include_pe.to_string(),
                    r.repetition.to_string(),
                    r.seed.to_string(),
                    r.test_fraction.to_string(),
                    r.n_train.to_string(),
                    r.n_test.to_string(),
                    t.tau.to_string(),
                    t.evaluation_tau.to_string(),
                    t.skipped.is_some().to_string(),
                    r.base_f1.to_string(),
                    r.base_auc.to_string(),
                    opt(t.meta_f1),
                    opt(t.meta_auc),
                ];
                match &t.report {
                    Some(tr) => {
                        row.extend(tr.rates().iter().map(|(_, v)| opt(*v)));
                        row.extend([tr.tap, tr.ttp, tr.tup, tr.total].map(|v| v.to_string()));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 12)),
                }
                match &t.matrix {
                    Some(m) => row.extend(m.cells().map(|(_, _, n)| n.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), 16)),
                }
                rows.push(row);
            }
        }
    }
    rows
}

pub fn emit_report(report: &impl Reportable, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report)?;
            std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(csv_header())?;
            for row in csv_rows(report) {
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// The stratified split repetition `r` uses.
pub fn repetition_split(cfg: &ExperimentConfig, data: &Dataset, r: usize) -> Result<SplitPair> {
    rep_split(cfg, data, r)
}
