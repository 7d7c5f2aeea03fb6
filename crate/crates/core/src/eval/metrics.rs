//! IoU, greedy NMS and all-point average precision.

use crate::bbox::{iou_unchecked, BBox};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Evaluation-wide image id; matching never crosses images.
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    /// Unoccluded fraction in `[0, 1]`, or -1 when unknown.
    pub visibility: f64,
}

/// Intersection over union. Errors on degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// Score-descending order, ties resolved by the lower index.
pub(crate) fn ranked_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression within each `(image, class)` group. Kept detections
/// are returned in descending score order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let order = ranked_order(dets.iter().map(|d| d.score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.image == d.image && k.class == d.class && iou_unchecked(&k.bbox, &d.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    /// NaN when there is nothing to evaluate.
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Greedily matches each detection, in the given rank order, to its
/// highest-IoU unclaimed GT of the same image. Returns the claimed GT index
/// per detection; `None` marks a false positive.
pub(crate) fn match_ranked(
    ranked: &[&Detection],
    gts: &[&GroundTruth],
    iou_thresh: f64,
) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image != d.image {
                    continue;
                }
                let o = iou_unchecked(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            let (gi, _) = best?;
            used[gi] = true;
            Some(gi)
        })
        .collect()
}

/// Area under the monotone precision envelope, sampled at every recall step.
pub(crate) fn all_point_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        area += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    area
}

/// AP for a single class. `dets` and `gts` are pooled over all images.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> PrCurve {
    let order = ranked_order(dets.iter().map(|d| d.score));
    let ranked: Vec<&Detection> = order.iter().map(|&i| &dets[i]).collect();
    let gt_refs: Vec<&GroundTruth> = gts.iter().collect();
    let tp = match_ranked(&ranked, &gt_refs, iou_thresh);
    let n_gt = gts.len();
    if n_gt == 0 {
        return PrCurve {
            points: Vec::new(),
            ap: f64::NAN,
            num_gt: 0,
            num_det: dets.len(),
        };
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t.is_some() as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let ap = all_point_area(&points);
    PrCurve {
        points,
        ap,
        num_gt: n_gt,
        num_det: dets.len(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub per_class: Vec<(usize, PrCurve)>,
    /// Mean over classes with a defined AP; NaN when none is defined.
    pub map: f64,
}

pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> MapReport {
    let per_class: Vec<(usize, PrCurve)> = (0..num_classes)
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class == c).copied().collect();
            (c, average_precision(&d, &g, iou_thresh))
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().map(|(_, c)| c.ap).filter(|a| !a.is_nan()).collect();
    let map = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapReport { per_class, map }
}

/// Brute-force AP: for every distinct score threshold, matches the
/// detections at or above it from scratch and records precision and recall.
/// The area is then taken under the best precision reachable at each recall.
pub fn threshold_sweep_ap(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return f64::NAN;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for thr in thresholds {
        let mut active: Vec<(usize, &Detection)> =
            dets.iter().enumerate().filter(|(_, d)| d.score >= thr).collect();
        active.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for (_, d) in &active {
            let mut best = None;
            let mut best_iou = iou_thresh;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.image != d.image {
                    continue;
                }
                let o = iou_unchecked(&d.bbox, &g.bbox);
                if o > best_iou || (o == best_iou && best.is_none()) {
                    best = Some(gi);
                    best_iou = o;
                }
            }
            if let Some(gi) = best {
                taken[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / active.len() as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, b: BBox, score: f64) -> Detection {
        Detection { image, bbox: b, class: 0, score }
    }

    fn gt(image: usize, b: BBox) -> GroundTruth {
        GroundTruth { image, bbox: b, class: 0, visibility: 1.0 }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let v = iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn nms_identical_keeps_best() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(0, b, 0.8), det(0, b, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_chain_keeps_ends() {
        let a = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.9);
        let b = det(0, BBox::new(3.0, 0.0, 13.0, 10.0), 0.8);
        let c = det(0, BBox::new(11.0, 0.0, 21.0, 10.0), 0.7);
        let kept = nms(&[a, b, c], 0.5);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_never_crosses_images_or_classes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut other = det(0, b, 0.5);
        other.class = 1;
        let kept = nms(&[det(0, b, 0.9), det(1, b, 0.8), other], 0.5);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let d1 = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.5);
        let d2 = det(0, BBox::new(1.0, 0.0, 11.0, 10.0), 0.5);
        assert_eq!(nms(&[d1, d2], 0.5), vec![d1]);
    }

    #[test]
    fn hand_computed_ap() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(20.0, 0.0, 30.0, 10.0);
        let fp = BBox::new(50.0, 50.0, 60.0, 60.0);
        let dets = [det(0, g1, 0.9), det(0, fp, 0.8), det(0, g2, 0.7)];
        let gts = [gt(0, g1), gt(0, g2)];
        let curve = average_precision(&dets, &gts, 0.5);
        assert!((curve.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(curve.ap, threshold_sweep_ap(&dets, &gts, 0.5));
    }

    #[test]
    fn ap_edge_cases() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(average_precision(&[], &[gt(0, g1)], 0.5).ap, 0.0);
        assert!(average_precision(&[], &[], 0.5).ap.is_nan());
        assert_eq!(average_precision(&[det(0, g1, 0.3)], &[gt(0, g1)], 0.5).ap, 1.0);
        // Same box in another image is not a match.
        assert_eq!(average_precision(&[det(1, g1, 0.3)], &[gt(0, g1)], 0.5).ap, 0.0);
    }

    #[test]
    fn map_skips_undefined_classes() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = mean_average_precision(&[det(0, g1, 0.3)], &[gt(0, g1)], 3, 0.5);
        assert_eq!(r.map, 1.0);
        assert!(r.per_class[2].1.ap.is_nan());
    }
}
