//! Evaluation, end-to-end pipeline, reports and the correlation experiment.

mod eval;

pub use eval::{
    compute_metrics, evaluate, npd_report, CameraMetrics, DepthMetrics, EvalReport, Metrics,
    NpdReport, PointMetrics, DEPTH_DELTA, POSE_THRESHOLDS,
};

mod correlation;

pub use correlation::{correlation_experiment, pearson, CorrelationReport, CorrelationRow};

mod pipeline;
mod report;

pub use pipeline::{
    artifacts, calibrate_stage, fisher_stage, load_calibrated, load_trained, report_stage,
    run_pipeline, train_stage, DataConfig, Method, RunConfig, RunReport, TrainSummary,
    SCHEMA_VERSION,
};
pub use report::{emit_report, format_npd, read_report, render_text};
