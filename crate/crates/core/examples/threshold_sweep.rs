//! Repeated-split evaluation across confidence thresholds: trusted accuracy
//! grows and the rejection rate falls as the threshold loosens.

use usnn::data::SyntheticSpec;
use usnn::harness::{threshold_sweep, DatasetSource, ExperimentConfig, DEFAULT_TAUS};

fn main() -> usnn::Result<()> {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec::new(2000, 16, 0.5, 1.5, 11)),
        repetitions: 5,
        mcd_passes: 50,
        base_hidden: Some(vec![64]),
        meta_hidden: Some(vec![32]),
        master_seed: 1,
        ..ExperimentConfig::default()
    };
    cfg.base_train.epochs = 20;
    cfg.meta_train.epochs = 20;

    let sweep = threshold_sweep(&cfg, &DEFAULT_TAUS)?;
    println!("{:>5} {:>8} {:>8} {:>8} {:>8} {:>8}", "tau", "skipped", "CAR", "CPR", "RAR", "metaAUC");
    for report in &sweep.reports {
        let a = &report.aggregates.per_tau[0];
        let m = |s: &usnn::harness::Stat| s.mean.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:>5} {:>8} {:>8} {:>8} {:>8} {:>8}", a.tau, a.skipped, m(&a.car), m(&a.cpr), m(&a.rar), m(&a.meta_auc));
    }
    let out = std::env::temp_dir().join("usnn_sweep.csv");
    usnn::harness::emit_report(&sweep, usnn::harness::ReportFormat::Csv, &out)?;
    println!("per-repetition rows in {}", out.display());
    Ok(())
}
