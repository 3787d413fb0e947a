//! A small ablation grid over gates and joint learning, three seeds per
//! cell, run on the rayon pool.
//!
//! cargo run --release --example ablation

use tcan::ablation::{run_ablation, AblationSpec};

const SPEC: &str = r#"{
    "data": {"synthetic": {"n_samples": 300, "seed": 5, "burst_rate": 0.3}},
    "model": {"d": 8, "L": 6, "N": 1, "h": 2},
    "train": {"epochs": 3, "batch_size": 16},
    "axes": {"gates": [true, false], "joint_learning": [true, false]},
    "seeds": [0, 1, 2]
}"#;

fn main() -> tcan::Result<()> {
    let spec = AblationSpec::from_json(SPEC)?;
    println!("{} cells x {} seeds", spec.cells().len(), spec.seeds.len());
    let result = run_ablation(&spec)?;
    print!("{}", result.grid_csv());
    for cell in &result.cells {
        let (mean, sd) = cell.summary("mae");
        println!("{:<36} mae {mean:.4} +- {sd:.4}", cell.cell.label());
    }
    Ok(())
}
