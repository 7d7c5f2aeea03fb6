//! Inference over clips and metric computation.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::detector::{decode_detections, generate_anchors, Binder, Detector, RawDetection, StemValues};
use crate::error::{Error, Result};
use crate::eval::{
    mean_average_precision, stratified_report, Detection, GroundTruth, MapReport, ResultRecord, StratumRow,
    DEFAULT_BINS,
};
use crate::tensor::{Graph, Tensor};
use crate::video::{snippet_indices, Letterbox, VideoClip};

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub map: MapReport,
    pub strata: Vec<StratumRow>,
    pub records: Vec<ResultRecord>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Frames a detector actually looks at per centre during evaluation.
pub fn effective_t_test(det: &Detector, cfg: &RunConfig) -> usize {
    if det.uses_window() {
        cfg.blend.t_test
    } else {
        1
    }
}

/// Letterboxed, normalised backbone activations for every frame of a clip.
pub fn clip_stems(det: &Detector, clip: &VideoClip, input_short: usize) -> Result<(Vec<StemValues>, Letterbox)> {
    let lb = Letterbox::new(clip.width, clip.height, input_short);
    let stems = clip
        .frames
        .iter()
        .map(|f| {
            let mut g = Graph::new();
            let mut b = Binder::new(&det.params, false);
            let x = g.constant(Detector::normalize_frame(&lb.apply(f)));
            let s = det.stem(&mut g, &mut b, x)?;
            Ok(StemValues::capture(&g, &s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stems, lb))
}

/// Output of one centre frame.
#[derive(Clone, Debug)]
pub struct CenterResult {
    /// Boxes in source-frame coordinates.
    pub detections: Vec<RawDetection>,
    /// Temporal attention maps `[T, H', W']` when TCM is active.
    pub attention: Option<Tensor>,
    /// Clip frame index of every window slot.
    pub window: Vec<usize>,
}

pub fn detect_center(
    det: &Detector,
    stems: &[StemValues],
    lb: &Letterbox,
    t: usize,
    t_test: usize,
    stride: usize,
    cfg: &RunConfig,
) -> Result<CenterResult> {
    let window = snippet_indices(stems.len(), t, t_test, stride)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&det.params, false);
    let vars: Vec<_> = window.iter().map(|&i| stems[i].constants(&mut g)).collect();
    let out = det.detect(&mut g, &mut b, &vars, window.len() / 2)?;
    let anchors = generate_anchors(lb.out_w, lb.out_h, &cfg.anchor_spec());
    let raw = decode_detections(
        &g,
        &out,
        &anchors,
        det.config.num_classes,
        lb.content_w as f64,
        lb.content_h as f64,
        &cfg.eval.metrics,
    )?;
    let detections = raw
        .into_iter()
        .filter_map(|d| {
            let bbox = lb.inverse_box(&d.bbox);
            bbox.is_valid().then_some(RawDetection { bbox, ..d })
        })
        .collect();
    Ok(CenterResult {
        detections,
        attention: out.tcm.map(|t| g.value(t.maps).clone()),
        window,
    })
}

/// Detections for every frame of a clip, each frame as a window centre.
pub fn detect_clip(det: &Detector, clip: &VideoClip, cfg: &RunConfig) -> Result<Vec<Vec<RawDetection>>> {
    let (stems, lb) = clip_stems(det, clip, cfg.model.input_short)?;
    let t_test = effective_t_test(det, cfg);
    (0..clip.len())
        .map(|t| detect_center(det, &stems, &lb, t, t_test, cfg.eval.stride, cfg).map(|r| r.detections))
        .collect()
}

pub fn evaluate(det: &Detector, clips: &[VideoClip], cfg: &RunConfig) -> Result<EvalOutcome> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation split has no clips"));
    }
    let per_clip: Vec<Vec<Vec<RawDetection>>> = clips
        .par_iter()
        .map(|c| detect_clip(det, c, cfg))
        .collect::<Result<_>>()?;
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    let mut records = Vec::new();
    let mut image = 0;
    for (clip, frames) in clips.iter().zip(per_clip) {
        for (f, dets) in frames.into_iter().enumerate() {
            for d in dets {
                detections.push(Detection { image, bbox: d.bbox, class: d.class, score: d.score });
                records.push(ResultRecord {
                    clip_id: clip.id.clone(),
                    frame: f,
                    bbox: d.bbox,
                    class: d.class,
                    score: d.score,
                });
            }
            for a in &clip.annotations[f] {
                ground_truth.push(GroundTruth {
                    image,
                    bbox: a.bbox,
                    class: a.class,
                    visibility: a.visibility,
                });
            }
            image += 1;
        }
    }
    let m = &cfg.eval.metrics;
    let map = mean_average_precision(&detections, &ground_truth, det.config.num_classes, m.iou_thresh);
    let strata = stratified_report(&detections, &ground_truth, &DEFAULT_BINS, m.recall_score_thresh, m.iou_thresh);
    Ok(EvalOutcome {
        map,
        strata,
        records,
        detections,
        ground_truth,
    })
}

/// Recall of the lowest visibility bin, if populated.
pub fn occluded_recall(strata: &[StratumRow]) -> Option<f64> {
    strata.first().and_then(StratumRow::recall)
}
