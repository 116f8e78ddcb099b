//! Generate the two-Gaussian benchmark, write it as CSV and read it back with
//! a stratified split.
//!
//! cargo run --example synthetic_data -- [out.csv]

use usnn::data::{class_weights, load_dataset, make_synthetic, stratified_split, write_dataset, SyntheticSpec};

fn main() -> usnn::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("usnn_synthetic.csv").display().to_string());
    let spec = SyntheticSpec::new(2000, 16, 0.3, 1.5, 7);
    let ds = make_synthetic(&spec)?;
    write_dataset(&ds, &out)?;

    let back = load_dataset(&out, "label")?;
    assert_eq!(back.features(), ds.features());
    println!("wrote {} rows x {} features to {out}", back.n_samples(), back.n_features());
    println!("class counts {:?}, balanced weights {:?}", back.class_counts(), class_weights(back.labels())?.0);

    let split = stratified_split(&back, 0.3, 1)?;
    println!(
        "stratified split: train {:?}, test {:?}",
        split.train.class_counts(),
        split.test.class_counts()
    );
    Ok(())
}
