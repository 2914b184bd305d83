//! Sample-quality metrics and the AGD / CFG / GD comparison harness.

mod harness;
mod metrics;

pub use harness::{
    endpoint_mse, eval_seeds, guidance_sweep, render_report, sample_points, scheduler_transfer, sig6, Candidate,
    EvalConfig, EvalReport, Method, SweepRow, TransferReport, SWEEP_COLUMNS,
};
pub use metrics::{energy_distance, knn_precision_recall};
