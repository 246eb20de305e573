//! Image- and pixel-level detection metrics and grouped evaluation reports.

pub mod curve;
pub mod pro;
mod report;

pub use curve::{auroc, average_precision, f1_max, iou_max, trapezoid, Optimum, Sweep};
pub use pro::{aupro, label_regions, pro_curve, DEFAULT_FPR_CAP};
pub use report::{
    evaluate, evaluate_with_cap, report_csv, write_report_csv, GroupRow, Grouping, LevelMetrics,
    LevelSummary, MetricReport, SharedThresholds,
};
