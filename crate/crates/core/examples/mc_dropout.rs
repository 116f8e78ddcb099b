//! Train one dropout network and read its predictive entropy from Monte Carlo
//! dropout passes. Misclassified points carry more entropy than correct ones.

use usnn::data::{make_synthetic, stratified_split, SyntheticSpec};
use usnn::nn::{init_network, train, ArchSpec, TrainConfig};
use usnn::uq::UqSetting;

fn main() -> usnn::Result<()> {
    let ds = make_synthetic(&SyntheticSpec::new(1500, 8, 0.5, 1.5, 3))?;
    let split = stratified_split(&ds, 0.3, 11)?;

    let arch = ArchSpec::new(8, vec![64, 32]).with_dropout(0.3);
    let net = init_network(&arch, 1)?;
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let net = train(&net, &split.train, &cfg)?;

    let mcd = UqSetting::Mcd { net, passes: 100, seed: 5 };
    let preds = mcd.predict_summary(split.test.features().view())?;

    let (mut right, mut wrong) = (Vec::new(), Vec::new());
    for (p, &y) in preds.iter().zip(split.test.labels()) {
        if p.predicted_label == y { right.push(p.pe) } else { wrong.push(p.pe) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("accuracy {:.3}", right.len() as f64 / preds.len() as f64);
    println!("mean PE correct {:.3} ({} samples)", mean(&right), right.len());
    println!("mean PE wrong   {:.3} ({} samples)", mean(&wrong), wrong.len());
    for p in preds.iter().take(5) {
        println!("label {} p = [{:.3}, {:.3}] pe {:.3}", p.predicted_label, p.mean_probs[0], p.mean_probs[1], p.pe);
    }
    Ok(())
}
