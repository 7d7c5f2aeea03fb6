//! Anchor labelling and box encoding.

use super::anchors::{Anchor, AnchorSet};
use crate::bbox::{iou_unchecked, BBox};

/// Largest accepted log-scale delta when decoding, so a wild prediction
/// cannot overflow `exp`.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetConfig {
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            fg_iou: 0.5,
            bg_iou: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Background,
    Ignore,
    Foreground { class: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// One label per anchor, in [`AnchorSet`] order.
    pub labels: Vec<AnchorLabel>,
    /// `(Δx, Δy, Δw, Δh)`; only meaningful for foreground anchors.
    pub deltas: Vec<[f64; 4]>,
}

impl DetectionTargets {
    pub fn num_foreground(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Foreground { .. }))
            .count()
    }
}

pub fn encode(anchor: &Anchor, gt: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    [
        (gx - anchor.cx) / anchor.w,
        (gy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

pub fn decode(anchor: &Anchor, d: &[f64; 4]) -> BBox {
    let cx = anchor.cx + d[0] * anchor.w;
    let cy = anchor.cy + d[1] * anchor.h;
    let w = anchor.w * d[2].min(MAX_LOG_DELTA).exp();
    let h = anchor.h * d[3].min(MAX_LOG_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Labels every anchor against `gts` (box, class). Each GT also claims its
/// single best anchor regardless of thresholds.
pub fn assign_targets(anchors: &AnchorSet, gts: &[(BBox, usize)], cfg: &TargetConfig) -> DetectionTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Background; n];
    let mut deltas = vec![[0.0; 4]; n];
    if gts.is_empty() {
        return DetectionTargets { labels, deltas };
    }
    let mut best_gt = vec![(0usize, -1.0f64); n];
    let mut best_anchor = vec![(0usize, -1.0f64); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let ab = a.to_bbox();
        for (gi, (g, _)) in gts.iter().enumerate() {
            let o = iou_unchecked(&ab, g);
            if o > best_gt[ai].1 {
                best_gt[ai] = (gi, o);
            }
            if o > best_anchor[gi].1 {
                best_anchor[gi] = (ai, o);
            }
        }
    }
    let mut matched: Vec<Option<usize>> = best_gt
        .iter()
        .map(|&(gi, o)| {
            if o >= cfg.fg_iou {
                Some(gi)
            } else {
                None
            }
        })
        .collect();
    for (ai, &(_, o)) in best_gt.iter().enumerate() {
        labels[ai] = if o < cfg.bg_iou { AnchorLabel::Background } else { AnchorLabel::Ignore };
    }
    for (gi, &(ai, o)) in best_anchor.iter().enumerate() {
        if o > 0.0 {
            matched[ai] = Some(gi);
        }
    }
    for (ai, a) in anchors.iter().enumerate() {
        if let Some(gi) = matched[ai] {
            let (g, class) = &gts[gi];
            labels[ai] = AnchorLabel::Foreground { class: *class };
            deltas[ai] = encode(a, g);
        }
    }
    DetectionTargets { labels, deltas }
}

/// Targets laid out like one level of head output: classification
/// channel `a·K + k` and box channel `a·4 + j` over `H·W` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// 1 positive, 0 negative, -1 ignored.
    pub cls: Vec<i8>,
    pub boxes: Vec<f64>,
    pub box_mask: Vec<bool>,
}

pub fn level_targets(anchors: &AnchorSet, targets: &DetectionTargets, num_classes: usize) -> Vec<LevelTargets> {
    let a_per = anchors.per_location;
    let offsets = anchors.level_offsets();
    anchors
        .levels
        .iter()
        .zip(offsets)
        .map(|(level, start)| {
            let hw = level.height * level.width;
            let mut cls = vec![0i8; a_per * num_classes * hw];
            let mut boxes = vec![0.0; a_per * 4 * hw];
            let mut box_mask = vec![false; a_per * 4 * hw];
            for pos in 0..hw {
                for a in 0..a_per {
                    let ai = start + pos * a_per + a;
                    match targets.labels[ai] {
                        AnchorLabel::Background => {}
                        AnchorLabel::Ignore => {
                            for k in 0..num_classes {
                                cls[(a * num_classes + k) * hw + pos] = -1;
                            }
                        }
                        AnchorLabel::Foreground { class } => {
                            cls[(a * num_classes + class) * hw + pos] = 1;
                            for j in 0..4 {
                                let idx = (a * 4 + j) * hw + pos;
                                boxes[idx] = targets.deltas[ai][j];
                                box_mask[idx] = true;
                            }
                        }
                    }
                }
            }
            LevelTargets {
                cls,
                boxes,
                box_mask,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::anchors::{generate_anchors, AnchorSpec};
    use super::*;

    fn single(b: BBox) -> AnchorSet {
        let (cx, cy) = b.center();
        AnchorSet {
            levels: vec![super::super::anchors::AnchorLevel {
                stride: 8,
                height: 1,
                width: 1,
                anchors: vec![Anchor { cx, cy, w: b.width(), h: b.height() }],
            }],
            per_location: 1,
        }
    }

    #[test]
    fn identical_anchor_is_foreground_with_zero_deltas() {
        let b = BBox::new(10.0, 20.0, 42.0, 36.0);
        let t = assign_targets(&single(b), &[(b, 0)], &TargetConfig::default());
        assert_eq!(t.labels[0], AnchorLabel::Foreground { class: 0 });
        assert_eq!(t.deltas[0], [0.0; 4]);
    }

    #[test]
    fn no_gt_is_all_background() {
        let set = generate_anchors(128, 128, &AnchorSpec::for_input(128));
        let t = assign_targets(&set, &[], &TargetConfig::default());
        assert_eq!(t.num_foreground(), 0);
        assert!(t.labels.iter().all(|l| *l == AnchorLabel::Background));
    }

    #[test]
    fn low_overlap_is_background_unless_rescued() {
        let a = BBox::new(0.0, 0.0, 32.0, 32.0);
        let g = BBox::new(16.0, 16.0, 48.0, 48.0);
        assert!((iou_unchecked(&a, &g) - 1.0 / 7.0).abs() < 1e-15);
        let mut set = single(a);
        // A second anchor exactly on the GT takes the rescue.
        let (cx, cy) = g.center();
        set.levels[0].anchors.push(Anchor { cx, cy, w: 32.0, h: 32.0 });
        set.levels[0].width = 2;
        let t = assign_targets(&set, &[(g, 0)], &TargetConfig::default());
        assert_eq!(t.labels[0], AnchorLabel::Background);
        // Alone, the same anchor is the GT's best and gets claimed.
        let t = assign_targets(&single(a), &[(g, 0)], &TargetConfig::default());
        assert_eq!(t.labels[0], AnchorLabel::Foreground { class: 0 });
    }

    #[test]
    fn zero_deltas_decode_to_anchor() {
        let a = Anchor { cx: 5.0, cy: 7.0, w: 4.0, h: 8.0 };
        assert_eq!(decode(&a, &[0.0; 4]), a.to_bbox());
    }

    #[test]
    fn level_layout_places_foreground() {
        let set = generate_anchors(128, 128, &AnchorSpec::for_input(128));
        let g = BBox::new(40.0, 40.0, 60.0, 60.0);
        let t = assign_targets(&set, &[(g, 0)], &TargetConfig::default());
        let lv = level_targets(&set, &t, 1);
        let pos: usize = lv.iter().map(|l| l.cls.iter().filter(|&&c| c == 1).count()).sum();
        assert_eq!(pos, t.num_foreground());
        let masked: usize = lv.iter().map(|l| l.box_mask.iter().filter(|&&m| m).count()).sum();
        assert_eq!(masked, 4 * pos);
    }
}
