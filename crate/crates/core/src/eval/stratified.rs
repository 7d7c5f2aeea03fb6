//! Recall per visibility bin.

use super::metrics::{match_ranked, ranked_order, Detection, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityBin {
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` itself belongs to the bin.
    pub closed: bool,
}

impl VisibilityBin {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && (v < self.hi || (self.closed && v == self.hi))
    }

    pub fn label(&self) -> String {
        format!("[{}, {}{}", self.lo, self.hi, if self.closed { "]" } else { ")" })
    }
}

pub const DEFAULT_BINS: [VisibilityBin; 3] = [
    VisibilityBin { lo: 0.0, hi: 0.3, closed: false },
    VisibilityBin { lo: 0.3, hi: 0.7, closed: false },
    VisibilityBin { lo: 0.7, hi: 1.0, closed: true },
];

#[derive(Clone, Debug, PartialEq)]
pub struct StratumRow {
    pub bin: VisibilityBin,
    pub num_gt: usize,
    pub recalled: usize,
}

impl StratumRow {
    /// `None` for an empty bin.
    pub fn recall(&self) -> Option<f64> {
        (self.num_gt > 0).then(|| self.recalled as f64 / self.num_gt as f64)
    }
}

/// Recall of the detections scoring at least `score_thresh`, per visibility
/// bin. GTs with unknown visibility are left out.
pub fn stratified_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    bins: &[VisibilityBin],
    score_thresh: f64,
    iou_thresh: f64,
) -> Vec<StratumRow> {
    let mut hit = vec![false; gts.len()];
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let cd: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.class == c && d.score >= score_thresh)
            .collect();
        let order = ranked_order(cd.iter().map(|d| d.score));
        let ranked: Vec<&Detection> = order.iter().map(|&i| cd[i]).collect();
        let idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class == c).collect();
        let cg: Vec<&GroundTruth> = idx.iter().map(|&i| &gts[i]).collect();
        for gi in match_ranked(&ranked, &cg, iou_thresh).into_iter().flatten() {
            hit[idx[gi]] = true;
        }
    }
    bins.iter()
        .map(|bin| {
            let members: Vec<usize> = (0..gts.len())
                .filter(|&i| gts[i].visibility >= 0.0 && bin.contains(gts[i].visibility))
                .collect();
            StratumRow {
                bin: *bin,
                num_gt: members.len(),
                recalled: members.iter().filter(|&&i| hit[i]).count(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;

    fn gt(x: f64, visibility: f64) -> GroundTruth {
        GroundTruth { image: 0, bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class: 0, visibility }
    }

    fn det(g: &GroundTruth, score: f64) -> Detection {
        Detection { image: g.image, bbox: g.bbox, class: g.class, score }
    }

    #[test]
    fn fully_visible_fills_one_bin() {
        let gts = [gt(0.0, 1.0), gt(20.0, 1.0)];
        let rows = stratified_report(&[], &gts, &DEFAULT_BINS, 0.5, 0.5);
        assert_eq!(rows.iter().filter(|r| r.num_gt > 0).count(), 1);
        assert_eq!(rows[2].recall(), Some(0.0));
        assert_eq!(rows[0].recall(), None);
    }

    #[test]
    fn perfect_detector_recalls_everything() {
        let gts = [gt(0.0, 0.1), gt(20.0, 0.5), gt(40.0, 0.9)];
        let dets: Vec<_> = gts.iter().map(|g| det(g, 0.9)).collect();
        let rows = stratified_report(&dets, &gts, &DEFAULT_BINS, 0.5, 0.5);
        assert!(rows.iter().all(|r| r.recall() == Some(1.0)));
    }

    #[test]
    fn ignoring_occluded_objects_zeroes_lowest_bin() {
        let gts = [gt(0.0, 0.1), gt(20.0, 0.9)];
        let dets = [det(&gts[1], 0.9), det(&gts[0], 0.4)];
        let rows = stratified_report(&dets, &gts, &DEFAULT_BINS, 0.5, 0.5);
        assert_eq!(rows[0].recall(), Some(0.0));
        assert_eq!(rows[2].recall(), Some(1.0));
    }

    #[test]
    fn bin_edges() {
        assert!(DEFAULT_BINS[0].contains(0.0) && !DEFAULT_BINS[0].contains(0.3));
        assert!(DEFAULT_BINS[2].contains(1.0));
        assert_eq!(DEFAULT_BINS[2].label(), "[0.7, 1]");
    }
}
