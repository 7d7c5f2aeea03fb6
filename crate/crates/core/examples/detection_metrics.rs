//! Scores a handful of hand-made detections: NMS, AP, mAP and recall per
//! visibility bin.
//!
//! Run with `cargo run --example detection_metrics`.

use blendnet::bbox::BBox;
use blendnet::eval::{
    average_precision, mean_average_precision, nms, stratified_report, Detection, GroundTruth, DEFAULT_BINS,
};

fn main() {
    let gt = |x: f64, class, visibility| GroundTruth { image: 0, bbox: BBox::new(x, 10.0, x + 20.0, 30.0), class, visibility };
    let det = |x: f64, class, score| Detection { image: 0, bbox: BBox::new(x, 10.0, x + 20.0, 30.0), class, score };
    let gts = vec![gt(0.0, 0, 0.9), gt(40.0, 0, 0.2), gt(80.0, 1, 0.6)];
    let raw = vec![det(0.0, 0, 0.9), det(1.0, 0, 0.8), det(60.0, 0, 0.7), det(41.0, 0, 0.4), det(80.0, 1, 0.6)];

    let kept = nms(&raw, 0.5);
    println!("NMS keeps {} of {} detections", kept.len(), raw.len());
    let curve = average_precision(&kept, &gts, 0.5);
    println!("class 0 AP {:.4}", curve.ap);
    println!("mAP {:.4}", mean_average_precision(&kept, &gts, 2, 0.5).map);
    for row in stratified_report(&kept, &gts, &DEFAULT_BINS, 0.05, 0.5) {
        println!("visibility {}: recall {:?}", row.bin.label(), row.recall());
    }
}
