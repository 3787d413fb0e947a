//! Finite-difference check of every parameter group of a small model,
//! followed by the same check with a sabotaged backward rule.
//!
//! cargo run --release --example gradcheck [op]

use tcan::cli::gradcheck_base_config;
use tcan::gradcheck::{check_model, GradCheckConfig};
use tcan::OpKind;

fn main() -> tcan::Result<()> {
    let fault: OpKind = std::env::args().nth(1).unwrap_or_else(|| "matmul".into()).parse()?;
    let cfg = GradCheckConfig {
        max_coords: Some(400),
        ..Default::default()
    };

    let report = check_model(&gradcheck_base_config(), 0, &cfg, None)?;
    println!("{} coordinates, passed: {}", report.coords.len(), report.passed());
    for (group, c) in report.worst_by_group() {
        println!("  {group:<28} worst rel err {:.2e}  ({}[{}])", c.rel_err, c.param, c.index);
    }
    for (name, n) in report.skipped.iter().filter(|(_, n)| *n > 0) {
        println!("  skipped {n} kink-straddling coordinates in {name}");
    }

    let broken = check_model(&gradcheck_base_config(), 0, &cfg, Some(fault))?;
    println!("\nwith a faulty {fault:?} backward: passed: {}", broken.passed());
    for c in broken.worst_offenders(5) {
        println!("  {}[{}] analytic {:+.5} numeric {:+.5}", c.param, c.index, c.analytic, c.numeric);
    }
    Ok(())
}
