//! Trains with checkpointing, resumes from the saved parameters and
//! optimizer moments, then evaluates on the test split.
//!
//! cargo run --release --example train_resume

use tcan::data::{generate_synthetic, BatchIter, SyntheticConfig};
use tcan::metrics::F1Mode;
use tcan::model::{ModelConfig, Tcan};
use tcan::train::{evaluate_split, load_checkpoint, train, train_step, TrainConfig, BEST_CHECKPOINT};

fn main() -> tcan::Result<()> {
    let data = generate_synthetic(&SyntheticConfig {
        n_samples: 400,
        seed: 3,
        ..Default::default()
    })?;
    let dir = std::env::temp_dir().join("tcan-train-resume");
    let cfg = TrainConfig {
        epochs: 4,
        checkpoint_dir: Some(dir.clone()),
        ..Default::default()
    };
    let model_cfg = ModelConfig {
        d: 16,
        seq_len: 8,
        depth: 1,
        heads: 2,
        ..Default::default()
    };
    let mut model = Tcan::new(model_cfg, data.widths, 0)?;
    let report = train(&mut model, &data, &cfg)?;
    for r in &report.history {
        println!("epoch {}  loss {:.4}  val mae {:.4}", r.epoch, r.loss_total, r.val.mae);
    }
    println!("best epoch {} written to {}", report.best_epoch, dir.join(BEST_CHECKPOINT).display());

    let (mut resumed, optim) = load_checkpoint(dir.join(BEST_CHECKPOINT))?.into_model()?;
    let mut optim = optim.expect("training checkpoints carry optimizer state");
    println!("resuming at optimizer step {}", optim.step);
    for epoch in report.best_epoch..report.best_epoch + 3 {
        let mut total = 0.0;
        let mut batches = 0;
        for batch in BatchIter::new(&data.train, cfg.batch_size, cfg.seed, epoch) {
            total += train_step(&mut resumed, &batch, &mut optim, &cfg.optim)?.2;
            batches += 1;
        }
        let val = evaluate_split(&resumed, &data.val, F1Mode::Binary)?;
        println!("resumed epoch {}  loss {:.4}  val mae {:.4}", epoch + 1, total / batches as f32, val.mae);
    }

    let test = evaluate_split(&resumed, &data.test, F1Mode::Weighted)?;
    println!("test {}", test.to_json());
    Ok(())
}
