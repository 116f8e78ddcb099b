//! Paired ablation: the same splits and base models, with and without PE in
//! the meta-model input.

use usnn::data::SyntheticSpec;
use usnn::harness::{ablation_pe, DatasetSource, ExperimentConfig, UqMethod};

fn main() -> usnn::Result<()> {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec::new(2000, 16, 0.5, 1.5, 11)),
        uq: UqMethod::Ensemble,
        ensemble_size: 5,
        repetitions: 5,
        taus: vec![0.1, 0.3],
        base_hidden: Some(vec![64]),
        meta_hidden: Some(vec![32]),
        ..ExperimentConfig::default()
    };
    cfg.base_train.epochs = 15;
    cfg.meta_train.epochs = 20;

    let ab = ablation_pe(&cfg)?;
    for (w, wo) in ab.with_pe.aggregates.per_tau.iter().zip(&ab.without_pe.aggregates.per_tau) {
        let f = |s: &usnn::harness::Stat| s.mean.map_or(f64::NAN, |v| v);
        println!(
            "tau {}: meta AUC {:.3} vs {:.3}, FTR {:.4} vs {:.4} (with vs without PE)",
            w.tau,
            f(&w.meta_auc),
            f(&wo.meta_auc),
            f(&w.ftr),
            f(&wo.ftr)
        );
    }
    Ok(())
}
