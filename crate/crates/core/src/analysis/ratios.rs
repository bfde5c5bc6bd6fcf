//! Real and phantom last-layer weight ratios over training.

use serde::{Deserialize, Serialize};

use crate::optim::StepRecord;

/// Denominators at or below this magnitude leave the ratio missing.
pub const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub step: usize,
    /// `v_hard / v_easy`
    pub real: Option<f64>,
    /// `ṽ_hard / ṽ_easy`
    pub phantom: Option<f64>,
    /// `ṽ_easy / v_easy`
    pub easy_factor: Option<f64>,
    /// `ṽ_hard / v_hard`
    pub hard_factor: Option<f64>,
}

pub fn safe_ratio(num: f64, den: f64) -> Option<f64> {
    if den.abs() > RATIO_FLOOR {
        Some(num / den).filter(|r| r.is_finite())
    } else {
        None
    }
}

pub fn ratio_row(r: &StepRecord) -> RatioRow {
    RatioRow {
        step: r.step,
        real: safe_ratio(r.v_hard, r.v_easy),
        phantom: safe_ratio(r.v_tilde_hard, r.v_tilde_easy),
        easy_factor: safe_ratio(r.v_tilde_easy, r.v_easy),
        hard_factor: safe_ratio(r.v_tilde_hard, r.v_hard),
    }
}

pub fn ratio_trace(records: &[StepRecord]) -> Vec<RatioRow> {
    records.iter().map(ratio_row).collect()
}

/// Mean over the rows where the selected ratio is present.
pub fn mean_ratio(rows: &[RatioRow], pick: impl Fn(&RatioRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(pick).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
