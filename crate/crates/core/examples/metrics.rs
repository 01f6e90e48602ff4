//! Scores degraded images against their clean references and prints the
//! report table.
//!
//! cargo run --release --example metrics

use cvgan::degrade::{synth_pair, Preset};
use cvgan::metrics::{evaluate, inception_score, EvalItem, MetricOptions, MetricSet};

fn main() -> cvgan::Result<()> {
    let items: Vec<EvalItem<f32>> = Preset::ALL
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (clean, degraded) = synth_pair(i as u64, p, (64, 64));
            EvalItem {
                path: format!("{p}.png"),
                image: degraded,
                reference: Some(clean),
            }
        })
        .collect();
    let report = evaluate(&items, MetricSet::ALL, &MetricOptions::default())?;
    print!("{}", report.to_table());

    let one_hots: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let (mean, std) = inception_score(&one_hots, 1)?;
    println!("inception score of 4 distinct one-hot predictions: {mean:.6} ± {std}");
    Ok(())
}
