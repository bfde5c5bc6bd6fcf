//! Median importance weight over a 2-D grid of signed feature contributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCell {
    pub bin_x: usize,
    pub bin_y: usize,
    pub median: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub n_bins: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Row-major over `(bin_x, bin_y)`.
    pub cells: Vec<BinCell>,
}

impl BinGrid {
    pub fn cell(&self, bin_x: usize, bin_y: usize) -> &BinCell {
        &self.cells[bin_x * self.n_bins + bin_y]
    }
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Result<f64> {
    percentile(values, 50.0)
}

fn bin_index(v: f64, (lo, hi): (f64, f64), n: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    let t = ((v - lo) / (hi - lo) * n as f64).floor();
    t.clamp(0.0, (n - 1) as f64) as usize
}

/// Groups `(contribution_easy, contribution_hard) → weight` points into an
/// `n_bins × n_bins` equal-width grid and reports the median weight per
/// cell. Without explicit ranges each axis spans its 1st to 99th
/// percentile; points outside fall into the edge bins.
pub fn binned_median_importance(
    points: &[([f64; 2], f64)],
    n_bins: usize,
    ranges: Option<[(f64, f64); 2]>,
) -> Result<BinGrid> {
    if n_bins == 0 {
        return Err(Error::contract("need at least one bin per axis"));
    }
    if points.is_empty() {
        return Err(Error::contract("no points to bin"));
    }
    let [x_range, y_range] = match ranges {
        Some(r) => r,
        None => {
            let xs: Vec<f64> = points.iter().map(|p| p.0[0]).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.0[1]).collect();
            [
                (percentile(&xs, 1.0)?, percentile(&xs, 99.0)?),
                (percentile(&ys, 1.0)?, percentile(&ys, 99.0)?),
            ]
        }
    };
    let mut buckets = vec![Vec::new(); n_bins * n_bins];
    for (c, w) in points {
        let i = bin_index(c[0], x_range, n_bins);
        let j = bin_index(c[1], y_range, n_bins);
        buckets[i * n_bins + j].push(*w);
    }
    let cells = buckets
        .iter()
        .enumerate()
        .map(|(k, b)| BinCell {
            bin_x: k / n_bins,
            bin_y: k % n_bins,
            median: median(b).ok(),
            count: b.len(),
        })
        .collect();
    Ok(BinGrid {
        n_bins,
        x_range,
        y_range,
        cells,
    })
}
