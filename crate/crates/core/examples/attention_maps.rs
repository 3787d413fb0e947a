//! Forward pass on one sample with attention weights and gate activations
//! pulled from the tape.
//!
//! cargo run --example attention_maps

use tcan::data::{generate_synthetic, SyntheticConfig};
use tcan::model::{AttentionKind, Mode, ModelConfig, Tcan};
use tcan::Tape;

fn main() -> tcan::Result<()> {
    let data = generate_synthetic(&SyntheticConfig {
        n_samples: 4,
        seed: 8,
        ..Default::default()
    })?;
    let cfg = ModelConfig {
        d: 8,
        seq_len: 5,
        depth: 2,
        heads: 2,
        ..Default::default()
    };
    let model = Tcan::new(cfg.clone(), data.widths, 0)?;
    let mut tape = Tape::new();
    let sample = &data.train[0];
    let out = model.forward(&mut tape, sample, Mode::Eval)?;
    println!("{} label {:+.3} prediction {:+.3}", sample.id, sample.label, tape.scalar(out.y_pred));

    for trace in out.diagnostics.attention.iter().filter(|t| t.kind == AttentionKind::Cross) {
        println!("\nlayer {} cross attention {} <- {}, head 0", trace.layer, trace.query, trace.key);
        for row in tape.value(trace.weights[0]).chunks(cfg.seq_len) {
            println!("  {}", row.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" "));
        }
    }
    println!();
    for (partner, layer, memory, fuse) in out.diagnostics.gate_means(&tape) {
        println!("gate {partner} layer {layer}: memory {memory:.3} fuse {fuse:.3}");
    }
    Ok(())
}
