//! Ensemble Monte Carlo dropout: N members x M passes per input, and its two
//! degenerate cases (one member is MC dropout, one pass without dropout is the
//! plain ensemble).

use ndarray::Array2;

use usnn::nn::{init_network, ArchSpec};
use usnn::uq::{predict_emcd, predict_ensemble, predict_mcd, prediction_entropy, write_distributions_csv};

fn main() -> usnn::Result<()> {
    let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * (j as f64 + 1.0) * 0.7);
    let members: Vec<_> = (0..3)
        .map(|k| init_network(&ArchSpec::new(3, vec![16, 8]).with_dropout(0.3), k))
        .collect::<usnn::Result<_>>()?;

    let emcd = predict_emcd(&members, x.view(), 20, 42)?;
    println!("EMCD: {} samples per input", emcd[0].samples().nrows());
    for (i, d) in emcd.iter().enumerate() {
        println!("  input {i}: mean {:?} pe {:.3}", d.mean(), prediction_entropy(d));
    }

    let mcd = predict_mcd(&members[0], x.view(), 20, 42)?;
    let single = predict_emcd(&members[..1], x.view(), 20, 42)?;
    println!("EMCD with one member equals MCD: {}", mcd.iter().zip(&single).all(|(a, b)| a.samples() == b.samples()));

    let plain: Vec<_> = (0..3)
        .map(|k| init_network(&ArchSpec::new(3, vec![16, 8]).with_dropout(0.0), k))
        .collect::<usnn::Result<_>>()?;
    let ens = predict_ensemble(&plain, x.view())?;
    let one_pass = predict_emcd(&plain, x.view(), 1, 0)?;
    println!("EMCD with one pass and no dropout equals the ensemble: {}", ens.iter().zip(&one_pass).all(|(a, b)| a.samples() == b.samples()));

    let path = std::env::temp_dir().join("usnn_emcd_samples.csv");
    write_distributions_csv(&emcd, &path)?;
    println!("per-sample distributions in {}", path.display());
    Ok(())
}
