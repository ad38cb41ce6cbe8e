//! Bits-per-byte, the analytical MAC model, evaluation reports and correlation analysis.

mod eval;
mod macs;
mod stats;

pub use eval::{eval_model, per_sample_bpb_increase, score_batch, soft_hard_divergence, DeletionProfile, EvalReport, SequenceScores};
pub use macs::{compute_reduction_curve, delta_grid, macs_total, write_curve_csv, CurveRow, MacsConfig, MacsResult};
pub use stats::{bits_per_byte, fisher_avg_correlation, median, pearson};
