//! Scores a toy classifier for accuracy, group gaps and dependence on `s`.
use nullsample::metrics::{hgr, FairnessReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let y = [1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0];
    let s = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    // Favours group 1.
    let preds = [1, 0, 0, 0, 1, 0, 1, 1, 1, 1, 0, 1];
    let report = FairnessReport::evaluate(&preds, &y, &s)?;
    println!("{}", report.to_json());
    println!("HGR(prediction, s) = {:.3}", hgr(&preds, &s)?);
    Ok(())
}
