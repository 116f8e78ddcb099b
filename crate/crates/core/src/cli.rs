//! Command-line front end. Every subcommand prints its resolved configuration
//! and master seed before doing any work.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, make_synthetic, write_dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{
    ablation_pe, emit_report, fit_usnn, threshold_sweep, AblationReport, DatasetSource, ExperimentConfig,
    ExperimentReport, ReportFormat, SweepReport, UqMethod,
};
use crate::metrics::{trust_confusion, trust_report, EvalRecord};
use crate::stacking::{write_outputs_csv, UsnnModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "usnn", version, about = "Uncertainty-aware stacked neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a two-Gaussian synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Fit the base tier and the meta-model on a dataset and save them as JSON.
    Train(TrainArgs),
    /// Score a saved model on a labelled CSV and print the trust matrix and rates.
    Evaluate(EvaluateArgs),
    /// Run the repeated-split protocol once per threshold.
    Sweep(RunArgs),
    /// Paired runs with and without PE in the meta input.
    Ablate(RunArgs),
    /// Convert a JSON report to CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Number of features.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Fraction of samples in class 1.
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    /// Distance between the class means along the first axis.
    #[arg(long, default_value_t = 1.5)]
    pub sep: f64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

/// Overrides applied on top of the JSON config (or the defaults).
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labelled CSV dataset; replaces the configured dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name of the label column in --data.
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Uncertainty method: mcd, ensemble or emcd.
    #[arg(long)]
    pub uq: Option<UqMethod>,
    /// Stochastic forward passes per network.
    #[arg(long)]
    pub passes: Option<usize>,
    /// Ensemble members.
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    /// Comma-separated confidence thresholds.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Score against trust labels at this threshold instead of the training one.
    #[arg(long)]
    pub evaluation_tau: Option<f64>,
    /// Repetitions of the split protocol.
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop PE from the meta input.
    #[arg(long)]
    pub no_pe: bool,
    /// Append base mean probabilities to the meta input.
    #[arg(long)]
    pub append_probs: bool,
    /// Standardize the meta input features.
    #[arg(long)]
    pub standardize: bool,
    /// Fixed comma-separated hidden widths for the base networks.
    #[arg(long, value_delimiter = ',')]
    pub base_hidden: Option<Vec<usize>>,
    /// Fixed comma-separated hidden widths for the meta-model.
    #[arg(long, value_delimiter = ',')]
    pub meta_hidden: Option<Vec<usize>>,
    /// Base training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Meta training epochs.
    #[arg(long)]
    pub meta_epochs: Option<usize>,
    /// Architecture-search candidates.
    #[arg(long)]
    pub search_budget: Option<usize>,
    /// Search again for every repetition.
    #[arg(long)]
    pub retune: bool,
    /// Build the meta-train set from a held-out part of the training split.
    #[arg(long)]
    pub meta_holdout: bool,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.data {
            cfg.dataset = DatasetSource::Csv {
                path: p.clone(),
                label_column: self.label_column.clone(),
            };
        }
        macro_rules! set {
            ($($field:ident = $value:expr),* $(,)?) => {
                $(if let Some(v) = $value.clone() { cfg.$field = v; })*
            };
        }
        set!(
            uq = self.uq,
            mcd_passes = self.passes,
            ensemble_size = self.ensemble_size,
            taus = self.taus,
            repetitions = self.repetitions,
            master_seed = self.seed,
            search_budget = self.search_budget,
        );
        if let Some(h) = &self.base_hidden {
            cfg.base_hidden = Some(h.clone());
        }
        if let Some(h) = &self.meta_hidden {
            cfg.meta_hidden = Some(h.clone());
        }
        if let Some(t) = self.evaluation_tau {
            cfg.evaluation_tau = Some(t);
        }
        if let Some(e) = self.epochs {
            cfg.base_train.epochs = e;
        }
        if let Some(e) = self.meta_epochs {
            cfg.meta_train.epochs = e;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        cfg.include_pe &= !self.no_pe;
        cfg.append_probs |= self.append_probs;
        cfg.standardize |= self.standardize;
        cfg.retune_per_repetition |= self.retune;
        cfg.meta_holdout |= self.meta_holdout;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Confidence threshold for the trust labels (default: first configured tau).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output model JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled CSV to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the label column in --data.
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Threshold for the reference trust labels (default: the model's).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Optional CSV of per-sample outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report from `sweep` or `ablate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

fn print_config(out: &mut impl Write, cfg: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    writeln!(out, "config:\n{text}\nmaster seed: {}", cfg.master_seed).map_err(|e| Error::io("<stdout>", e))
}

fn say(out: &mut impl Write, msg: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{msg}").map_err(|e| Error::io("<stdout>", e))
}

/// Execute a parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec::new(a.n, a.d, a.balance, a.sep, a.seed);
            say(out, format!("config:\n{}\nmaster seed: {}", serde_json::to_string_pretty(&spec)?, a.seed))?;
            let ds = make_synthetic(&spec)?;
            write_dataset(&ds, &a.out)?;
            say(out, format!("wrote {} rows to {}", ds.n_samples(), a.out.display()))
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            print_config(out, &cfg)?;
            let tau = a.tau.unwrap_or(cfg.taus[0]);
            let data = cfg.dataset.load()?;
            let model = fit_usnn(&cfg, &data, tau)?;
            model.save(&a.out)?;
            say(out, format!("saved model (tau = {tau}) to {}", a.out.display()))
        }
        Command::Evaluate(a) => {
            let model = UsnnModel::load(&a.model)?;
            let tau = a.tau.unwrap_or(model.tau);
            say(out, format!("config:\nmodel: {}\ndata: {}\ntau: {tau}\nmaster seed: n/a", a.model.display(), a.data.display()))?;
            let data = load_dataset(&a.data, &a.label_column)?;
            let outputs = model.predict(data.features().view())?;
            let records: Vec<EvalRecord> = outputs
                .iter()
                .zip(data.labels())
                .map(|(o, &y)| EvalRecord::new(y, o.label, o.pe, tau, o.trust.trust_flag))
                .collect();
            let matrix = trust_confusion(&records, tau)?;
            let report = trust_report(&matrix)?;
            say(out, &matrix)?;
            say(out, &report)?;
            if let Some(p) = &a.out {
                write_outputs_csv(&outputs, p)?;
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = a.config.resolve()?;
            print_config(out, &cfg)?;
            let report = threshold_sweep(&cfg, &cfg.taus)?;
            emit_report(&report, a.format.into(), &a.out)?;
            say(out, format!("wrote sweep over {} thresholds to {}", cfg.taus.len(), a.out.display()))
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            print_config(out, &cfg)?;
            let report = ablation_pe(&cfg)?;
            emit_report(&report, a.format.into(), &a.out)?;
            say(out, format!("wrote ablation to {}", a.out.display()))
        }
        Command::Report(a) => {
            let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let obj = value.as_object().ok_or_else(|| Error::Config("report must be a JSON object".into()))?;
            let seed = |r: &serde_json::Value| r["config"]["master_seed"].as_u64().unwrap_or(0);
            if obj.contains_key("with_pe") {
                let r: AblationReport = serde_json::from_value(value)?;
                say(out, format!("config: ablation report\nmaster seed: {}", r.with_pe.config.master_seed))?;
                emit_report(&r, ReportFormat::Csv, &a.out)?;
            } else if obj.contains_key("reports") {
                say(out, format!("config: sweep report\nmaster seed: {}", obj["reports"].get(0).map(seed).unwrap_or(0)))?;
                let r: SweepReport = serde_json::from_value(value)?;
                emit_report(&r, ReportFormat::Csv, &a.out)?;
            } else {
                say(out, format!("config: experiment report\nmaster seed: {}", seed(&value)))?;
                let r: ExperimentReport = serde_json::from_value(value)?;
                emit_report(&r, ReportFormat::Csv, &a.out)?;
            }
            say(out, format!("wrote {}", a.out.display()))
        }
    }
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}
