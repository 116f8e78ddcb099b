//! Uncertainty-aware stacked neural networks (U-SNN).
//!
//! A base classifier produces a label together with a predictive entropy (PE)
//! estimated by Monte-Carlo dropout, a deep ensemble, or both. A meta-model,
//! trained on the original features plus PE, flags every base prediction as
//! trustworthy or untrustworthy. The [`metrics`] module scores the pair of
//! outputs with a 16-cell trust-informed confusion matrix and its derived
//! rates, and [`harness`] runs the repeated-split evaluation protocol,
//! threshold sweeps and the PE ablation.
//!
//! ```no_run
//! use usnn::data::SyntheticSpec;
//! use usnn::harness::{run_experiment, ExperimentConfig, DatasetSource};
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.dataset = DatasetSource::Synthetic(SyntheticSpec::new(2000, 16, 0.5, 1.5, 7));
//! cfg.repetitions = 3;
//! let report = run_experiment(&cfg).unwrap();
//! println!("{}", serde_json::to_string_pretty(&report.aggregates).unwrap());
//! ```

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod stacking;
pub mod uq;

pub use error::{Error, Result};
