//! Detection mAP and grounding precision/recall.

mod detection;
mod pr;

pub use detection::{
    average_precision, detection_records, load_split, map_by_category, render_table,
    report_from_records, CategoryCounts, DetectionRecord, Detector, EvalReport, LoadedEntry,
};
pub(crate) use detection::scored_record;
pub use pr::{
    bbox_pr_point, evaluate_grounding, pr_curve, threshold_grid, Averaging, BoxPrPoint,
    GroundingMode, GroundingOptions, GroundingReport, PrAccumulator, PrCurve, PrPoint,
};
