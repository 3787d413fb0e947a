//! Generates a synthetic corpus, writes it in both record formats and
//! reads it back.
//!
//! cargo run --release --example dataset_io

use tcan::data::{generate_synthetic, load_dataset, write_dataset, RecordFormat, SyntheticConfig};
use tcan::model::Modality;

fn main() -> tcan::Result<()> {
    let cfg = SyntheticConfig {
        n_samples: 200,
        seed: 42,
        snr: [4.0, 0.5, 1.0],
        ..Default::default()
    };
    let data = generate_synthetic(&cfg)?;
    println!("splits {} / {} / {}", data.train.len(), data.val.len(), data.test.len());
    let s = &data.train[0];
    for m in Modality::ALL {
        println!("  {} {m}: {} x {}", s.id, s.len(m), s.width(m));
    }
    println!("  label {:+.3}", s.label);

    let root = std::env::temp_dir().join("tcan-dataset-io");
    for format in [RecordFormat::Json, RecordFormat::Binary] {
        let dir = root.join(format!("{format:?}").to_lowercase());
        write_dataset(&dir, &data, format)?;
        let back = load_dataset(&dir)?;
        let same = back.train.iter().zip(&data.train).all(|(a, b)| a == b);
        println!("{format:?} -> {} : identical {same}", dir.display());
    }
    Ok(())
}
