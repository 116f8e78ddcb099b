//! Budgeted random architecture search scored by validation F1.

use usnn::data::{make_synthetic, SyntheticSpec};
use usnn::harness::tune_architecture;
use usnn::nn::TrainConfig;

fn main() -> usnn::Result<()> {
    let ds = make_synthetic(&SyntheticSpec::new(800, 8, 0.5, 2.0, 5))?;
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let arch = tune_architecture(&ds, 6, 13, &cfg, 0.3)?;
    println!("chosen hidden layers {:?}, dropout {}", arch.hidden_layers, arch.dropout_rate);
    Ok(())
}
