//! Compares tape gradients with central differences for the routing step
//! and for the full desk generator.
//!
//! cargo run --release --example gradcheck

use cvgan::checks::gradcheck_suite;
use cvgan::pipeline::ModelPreset;

fn main() -> cvgan::Result<()> {
    for outcome in gradcheck_suite(ModelPreset::Desk, 0)? {
        println!(
            "{:<45} max rel err {:.2e} ({} coords) {}",
            outcome.name,
            outcome.report.max_rel_error,
            outcome.report.checked,
            if outcome.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
