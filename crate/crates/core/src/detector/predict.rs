//! Turning head outputs into scored boxes.

use super::anchors::AnchorSet;
use super::network::FrameOutput;
use super::targets::decode;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::{nms, Detection, EvalConfig};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawDetection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Thresholds, decodes, clips to `img_w × img_h` and suppresses the head
/// outputs of one frame. At most `cfg.max_detections` survive, best first.
pub fn decode_detections(
    g: &Graph,
    out: &FrameOutput,
    anchors: &AnchorSet,
    num_classes: usize,
    img_w: f64,
    img_h: f64,
    cfg: &EvalConfig,
) -> Result<Vec<RawDetection>> {
    if out.levels.len() != anchors.levels.len() {
        return Err(Error::invalid("anchor levels do not match head levels"));
    }
    let a_per = anchors.per_location;
    let mut candidates: Vec<Detection> = Vec::new();
    for (lv, al) in out.levels.iter().zip(&anchors.levels) {
        let hw = al.height * al.width;
        let cls = g.value(lv.cls).data();
        let boxes = g.value(lv.boxes).data();
        if cls.len() != a_per * num_classes * hw || boxes.len() != a_per * 4 * hw {
            return Err(Error::ShapeMismatch {
                op: "decode_detections",
                lhs: g.shape(lv.cls).to_vec(),
                rhs: vec![a_per * num_classes, al.height, al.width],
            });
        }
        let mut level: Vec<(f64, usize, usize, usize)> = Vec::new();
        for pos in 0..hw {
            for a in 0..a_per {
                for k in 0..num_classes {
                    let s = cls[(a * num_classes + k) * hw + pos];
                    if s > cfg.score_floor {
                        level.push((s, pos, a, k));
                    }
                }
            }
        }
        level.sort_by(|x, y| y.0.total_cmp(&x.0));
        level.truncate(cfg.pre_nms_top_k);
        for (score, pos, a, class) in level {
            let d = [0, 1, 2, 3].map(|j| boxes[(a * 4 + j) * hw + pos]);
            let bbox = decode(&al.anchors[pos * a_per + a], &d).clamp_to(img_w, img_h);
            if bbox.is_valid() {
                candidates.push(Detection { image: 0, bbox, class, score });
            }
        }
    }
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept
        .into_iter()
        .map(|d| RawDetection {
            bbox: d.bbox,
            class: d.class,
            score: d.score,
        })
        .collect())
}
