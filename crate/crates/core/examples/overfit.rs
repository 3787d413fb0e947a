//! Memorises a 32-sample synthetic set with a small model and reports the
//! final training MAE.
//!
//! cargo run --release --example overfit

use std::time::Instant;

use tcan::data::{generate_synthetic, SyntheticConfig};
use tcan::model::{ModelConfig, Tcan};
use tcan::train::{evaluate_split, train, TrainConfig};

fn main() -> tcan::Result<()> {
    let mut data = generate_synthetic(&SyntheticConfig {
        n_samples: 32,
        seed: 1,
        val_fraction: 0.0,
        test_fraction: 0.0,
        ..Default::default()
    })?;
    // validate on the training set itself: this run is about memorisation
    data.val = data.train.clone();

    let cfg = ModelConfig {
        d: 16,
        seq_len: 16,
        depth: 2,
        heads: 2,
        ..Default::default()
    };
    let mut model = Tcan::new(cfg, data.widths, 1)?;
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let start = Instant::now();
    let report = train(
        &mut model,
        &data,
        &TrainConfig {
            epochs,
            ..Default::default()
        },
    )?;
    let mae = evaluate_split(&model, &data.train, Default::default())?.mae;
    for r in report.history.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:4}  loss {:.4}  train mae {:.4}", r.epoch, r.loss_total, r.val.mae);
    }
    println!("best epoch {}  train mae {mae:.4}  {:.1}s", report.best_epoch, start.elapsed().as_secs_f64());
    Ok(())
}
