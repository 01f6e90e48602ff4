//! Routes random child predictions into parent capsules and prints how the
//! coupling coefficients sharpen over the iterations.
//!
//! cargo run --example routing

use cvgan::capsule::{route, RoutingOptions};
use cvgan::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cvgan::Result<()> {
    let (children, parents, digits) = (4, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f64>::new();
    let u_hat = tape.constant(Tensor::randn(&[children, parents, digits], 1.0, &mut rng));
    let routed = route(&mut tape, u_hat, &RoutingOptions::new(3))?;

    for (k, step) in routed.steps.iter().enumerate() {
        println!("iteration {}: coupling (child x parent)", k + 1);
        for row in tape.value(step.coupling).data().chunks(parents) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:.3}")).collect();
            println!("  {}", cells.join("  "));
        }
    }
    for (j, v) in tape.value(routed.v).data().chunks(digits).enumerate() {
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("parent {j}: |v| = {len:.4}");
    }
    Ok(())
}
