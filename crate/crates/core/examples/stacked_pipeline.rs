//! The full two-tier predictor: an MC dropout base model, a meta-model trained
//! on its training-set predictions, and a (label, trust flag) per test point.

use usnn::data::{make_synthetic, stratified_split, SyntheticSpec};
use usnn::harness::{fit_usnn, ExperimentConfig, UqMethod};
use usnn::metrics::{trust_confusion, trust_report, EvalRecord};
use usnn::stacking::UsnnModel;

fn main() -> usnn::Result<()> {
    let ds = make_synthetic(&SyntheticSpec::new(2000, 16, 0.5, 1.5, 21))?;
    let split = stratified_split(&ds, 0.3, 4)?;
    let tau = 0.3;

    let mut cfg = ExperimentConfig {
        uq: UqMethod::Mcd,
        mcd_passes: 50,
        base_hidden: Some(vec![64]),
        meta_hidden: Some(vec![32]),
        ..ExperimentConfig::default()
    };
    cfg.base_train.epochs = 20;
    cfg.meta_train.epochs = 20;
    let model = fit_usnn(&cfg, &split.train, tau)?;

    let path = std::env::temp_dir().join("usnn_model.json");
    model.save(&path)?;
    let model = UsnnModel::load(&path)?;

    let outputs = model.predict(split.test.features().view())?;
    for o in outputs.iter().take(8) {
        println!("label {} trusted {} (p = {:.3}) pe {:.3}", o.label, o.trust.trust_flag, o.trust.trust_prob, o.pe);
    }
    let records: Vec<EvalRecord> = outputs
        .iter()
        .zip(split.test.labels())
        .map(|(o, &y)| EvalRecord::new(y, o.label, o.pe, tau, o.trust.trust_flag))
        .collect();
    let matrix = trust_confusion(&records, tau)?;
    println!("\n{matrix}\n{}", trust_report(&matrix)?);
    Ok(())
}
