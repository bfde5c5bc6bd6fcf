//! Diagnostics over trained models: gradient decomposition, importance
//! weight statistics, probes and closed-form checks.

pub mod bins;
pub mod decomp;
pub mod lorenz;
pub mod probe;
pub mod ratios;
pub mod theory;

pub use bins::{binned_median_importance, BinCell, BinGrid};
pub use decomp::{
    dataset_phantom, decompose, decompose_phantom, importance_points, reconstruct, DecompEntry,
    DecompRecord, ImportancePoint, Weights,
};
pub use lorenz::{lorenz, LorenzCurve};
pub use probe::{fit_linear_probe, ProbeFit, ProbeOptions};
pub use ratios::{ratio_trace, RatioRow};
pub use theory::{
    numeric_feature_grad_norm, taylor_ratio_check, theory_feature_grad_norm, Activation, TaylorRow,
    TheoryKind, TheoryNet,
};
