//! Build the 16-cell trust-informed confusion matrix by hand and derive the
//! eight trust rates.

use usnn::metrics::{trust_confusion, trust_report, EvalRecord};

fn main() -> usnn::Result<()> {
    let tau = 0.2;
    // (truth, base label, pe, meta trust flag)
    let rows = [
        (1, 1, 0.05, 1), // confident and correct, trusted
        (1, 1, 0.10, 0), // confident and correct, rejected anyway
        (0, 0, 0.15, 1),
        (0, 0, 0.60, 1), // correct but uncertain, wrongly trusted
        (0, 0, 0.70, 0),
        (1, 0, 0.08, 0), // confidently wrong, caught
        (0, 1, 0.12, 1), // confidently wrong, missed
        (1, 0, 0.90, 0),
    ];
    let records: Vec<EvalRecord> = rows
        .iter()
        .map(|&(y, b, pe, flag)| EvalRecord::new(y, b, pe, tau, flag))
        .collect();
    let matrix = trust_confusion(&records, tau)?;
    println!("{matrix}");
    println!("{}", trust_report(&matrix)?);
    println!("{}", serde_json::to_string_pretty(&matrix)?);
    Ok(())
}
