//! Top-k Lorenz curves of importance weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzCurve {
    /// `(k/n, share of the k largest weights)` for `k = 0..=n`.
    pub points: Vec<(f64, f64)>,
    pub gini: f64,
}

/// Sorts the weights in decreasing order and accumulates their share.
/// The Gini coefficient is twice the trapezoid area between the curve and
/// the diagonal.
pub fn lorenz(weights: &[f64]) -> Result<LorenzCurve> {
    if weights.is_empty() {
        return Err(Error::contract("lorenz curve of no weights"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract(format!(
            "weights must be finite and nonnegative, got {w}"
        )));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("all weights are zero"));
    }
    let n = sorted.len() as f64;
    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push((0.0, 0.0));
    let mut cum = 0.0;
    for (k, w) in sorted.iter().enumerate() {
        cum += w;
        points.push(((k + 1) as f64 / n, (cum / total).min(1.0)));
    }
    if let Some(last) = points.last_mut() {
        last.1 = 1.0;
    }
    let area: f64 = points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) * 0.5)
        .sum();
    let gini = (2.0 * (area - 0.5)).max(0.0);
    Ok(LorenzCurve { points, gini })
}
