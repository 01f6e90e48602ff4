//! The Inception-Score statistic over caller-supplied class probabilities.

use crate::error::{Error, Result};

/// Tolerance on `|sum p - 1|` for a vector to count as a distribution.
pub const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(i: usize, p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::Contract(format!(
            "probability vector {i} has {} classes, expected {classes}",
            p.len()
        )));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("probability vector {i} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("probability vector {i} sums to {s}, not 1")));
    }
    Ok(())
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over one group of vectors.
fn split_score(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let first = &rows[0];
    // Shifted mean: identical rows reproduce the first row exactly.
    let marginal: Vec<f64> = (0..first.len())
        .map(|y| first[y] + rows.iter().map(|r| r[y] - first[y]).sum::<f64>() / n)
        .collect();
    let kl: f64 = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    kl.exp()
}

/// Mean and population standard deviation of the score over `splits`
/// contiguous groups of near-equal size.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::Contract("inception score needs at least one vector".into()));
    }
    if splits == 0 || splits > probs.len() {
        return Err(Error::Contract(format!(
            "splits must be in 1..={}, got {splits}",
            probs.len()
        )));
    }
    let classes = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        check_simplex(i, p, classes)?;
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|k| split_score(&probs[k * n / splits..(k + 1) * n / splits]))
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}
