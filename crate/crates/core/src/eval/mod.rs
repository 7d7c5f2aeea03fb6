//! Detection metrics, stratified recall, results files and visualisation.

mod metrics;
mod report;
mod results;
mod stratified;
mod visual;

pub use metrics::{
    average_precision, iou, mean_average_precision, nms, threshold_sweep_ap, Detection, GroundTruth,
    MapReport, PrCurve,
};
pub use report::{fmt_percent, Table};
pub use results::{format_results, parse_results, read_results, write_results, ResultRecord};
pub use stratified::{stratified_report, StratumRow, VisibilityBin, DEFAULT_BINS};
pub use visual::{
    bilinear_resize, project_attention, render_frame, save_gray, ProjectedMap, GROUND_TRUTH_COLOR,
    PREDICTION_COLOR,
};

/// Post-processing and matching thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub max_detections: usize,
    pub pre_nms_top_k: usize,
    pub recall_score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            nms_iou: 0.5,
            score_floor: 0.05,
            max_detections: 100,
            pre_nms_top_k: 1000,
            recall_score_thresh: 0.5,
        }
    }
}
