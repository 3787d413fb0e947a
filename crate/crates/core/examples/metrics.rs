//! The evaluation metrics on a hand-made prediction set.
//!
//! cargo run --example metrics

use tcan::metrics::{acc2_f1, acc7, binary_confusion, evaluate, mae, pearson_corr, F1Mode};

fn main() -> tcan::Result<()> {
    let labels = [2.4, -1.0, 0.0, 0.6, -2.8, 1.5, -0.2, 3.0];
    let preds = [1.9, -0.4, 0.3, -0.1, -2.2, 1.1, -0.6, 2.7];

    println!("mae   {:.4}", mae(&preds, &labels)?);
    println!("corr  {:.4}", pearson_corr(&preds, &labels)?);
    println!("acc7  {:.4}", acc7(&preds, &labels)?);
    let c = binary_confusion(&preds, &labels)?;
    println!("zero labels excluded: tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
    for mode in [F1Mode::Binary, F1Mode::Weighted] {
        let (acc, f1) = acc2_f1(&preds, &labels, mode)?;
        println!("{mode:?}: acc2 {acc:.4} f1 {f1:.4}");
    }
    println!("{}", evaluate(&preds, &labels, F1Mode::Binary)?.to_json());

    // correlation against a constant is reported as zero
    let flat = [0.5; 8];
    println!("constant predictions: {:?}", evaluate(&flat, &labels, F1Mode::Binary).map(|r| r.corr));
    Ok(())
}
