//! A deep ensemble of independently initialised networks with randomly
//! sampled architectures, and the per-member spread behind its entropy.

use rayon::prelude::*;

use usnn::data::{make_synthetic, stratified_split, SyntheticSpec};
use usnn::nn::{init_network, sample_architecture, train, TrainConfig};
use usnn::seed;
use usnn::uq::{predict_ensemble, prediction_entropy};

fn main() -> usnn::Result<()> {
    let ds = make_synthetic(&SyntheticSpec::new(1200, 8, 0.5, 1.5, 4))?;
    let split = stratified_split(&ds, 0.25, 2)?;

    let members = (0..5u64)
        .into_par_iter()
        .map(|n| {
            let arch = sample_architecture(seed::derive(9, &[seed::stream::ARCH, n]), 8).with_dropout(0.0);
            println!("member {n}: hidden {:?}", arch.hidden_layers);
            let net = init_network(&arch, seed::derive(9, &[seed::stream::INIT, n]))?;
            let cfg = TrainConfig {
                epochs: 10,
                shuffle_seed: n,
                ..TrainConfig::default()
            };
            train(&net, &split.train, &cfg)
        })
        .collect::<usnn::Result<Vec<_>>>()?;

    let dists = predict_ensemble(&members, split.test.features().view())?;
    let most_uncertain = (0..dists.len())
        .max_by(|&a, &b| prediction_entropy(&dists[a]).total_cmp(&prediction_entropy(&dists[b])))
        .unwrap();
    let d = &dists[most_uncertain];
    println!("most uncertain test point #{most_uncertain}: pe {:.3}", prediction_entropy(d));
    for (n, row) in d.samples().rows().into_iter().enumerate() {
        println!("  member {n}: p1 = {:.3}", row[1]);
    }
    Ok(())
}
