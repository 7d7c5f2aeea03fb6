//! Property tests for the geometric, metric and blending invariants.

use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blendnet::bbox::{iou_unchecked, BBox};
use blendnet::blend::{ScmWeights, TcmWeights};
use blendnet::config::RunConfig;
use blendnet::detector::{decode, encode, Anchor};
use blendnet::eval::{
    average_precision, format_results, iou, nms, parse_results, threshold_sweep_ap, Detection, GroundTruth,
    ResultRecord,
};
use blendnet::oracle;
use blendnet::tensor::{checkpoint_bytes, parse_checkpoint, ParamStore, Tensor};
use blendnet::video::{
    augment_with, format_annotations, parse_annotations, sample_snippet, snippet_indices, Annotation, AnnotationFile,
    AugmentDraws, Letterbox, VideoClip, MIN_BOX_SIDE,
};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..3usize, bbox(), 0..2usize, 0.0..1.0f64), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(image, bbox, class, score)| Detection { image, bbox, class, score })
            .collect()
    })
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0..3.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn clip(len: usize, w: usize, h: usize, boxes: Vec<BBox>) -> VideoClip {
    let frames = (0..len)
        .map(|i| Tensor::new([3, h, w], (0..3 * h * w).map(|k| ((k * 7 + i) % 11) as f64 / 10.0).collect()).unwrap())
        .collect();
    let annotations = (0..len)
        .map(|_| boxes.iter().map(|&b| Annotation { bbox: b, class: 0, visibility: 0.5 }).collect())
        .collect();
    VideoClip { id: "c".into(), width: w, height: h, frames, annotations }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_is_idempotent_and_separating(dets in detections(30), thresh in 0.1..0.9f64) {
        let kept = nms(&dets, thresh);
        prop_assert_eq!(nms(&kept, thresh), kept.clone());
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                if a.image == b.image && a.class == b.class {
                    prop_assert!(iou_unchecked(&a.bbox, &b.bbox) <= thresh);
                }
            }
        }
    }

    #[test]
    fn ap_matches_sweep_and_ignores_trailing_false_positives(
        picks in prop::collection::vec((0..4usize, 0.0..1.0f64), 0..12),
    ) {
        let gts: Vec<GroundTruth> = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0), BBox::new(0.0, 40.0, 8.0, 52.0)]
            .iter()
            .map(|&b| GroundTruth { image: 0, bbox: b, class: 0, visibility: 1.0 })
            .collect();
        let kinds = [gts[0].bbox, gts[1].bbox, gts[2].bbox, BBox::new(70.0, 70.0, 80.0, 80.0)];
        let mut dets: Vec<Detection> = picks
            .iter()
            .enumerate()
            // Distinct scores: ties rank differently under the two definitions.
            .map(|(i, &(k, s))| Detection { image: 0, bbox: kinds[k], class: 0, score: s * 0.5 + i as f64 * 1e-6 + 0.4 })
            .collect();
        let ap = average_precision(&dets, &gts, 0.5).ap;
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - threshold_sweep_ap(&dets, &gts, 0.5)).abs() < 1e-12);
        dets.push(Detection { image: 0, bbox: kinds[3], class: 0, score: 0.1 });
        prop_assert!((average_precision(&dets, &gts, 0.5).ap - ap).abs() < 1e-12);
    }

    #[test]
    fn box_encoding_roundtrips(b in bbox(), cx in 0.0..128.0f64, cy in 0.0..128.0f64, w in 8.0..64.0f64, h in 8.0..64.0f64) {
        let a = Anchor { cx, cy, w, h };
        let back = decode(&a, &encode(&a, &b));
        for (x, y) in [(back.x_min, b.x_min), (back.y_min, b.y_min), (back.x_max, b.x_max), (back.y_max, b.y_max)] {
            prop_assert!((x - y).abs() < 1e-9, "{back:?} vs {b:?}");
        }
    }

    #[test]
    fn snippet_sampling_is_total(len in 1..30usize, t_frac in 0.0..1.0f64, half in 0..6usize, stride in 1..5usize) {
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let support = 2 * half + 1;
        let idx = snippet_indices(len, t, support, stride).unwrap();
        prop_assert_eq!(idx.len(), support);
        prop_assert_eq!(idx[half], t);
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn augmentation_stays_in_bounds(
        boxes in prop::collection::vec(bbox(), 0..4),
        brightness in 0.7..1.3f64,
        flip in any::<bool>(),
        crop in 0.0..0.1f64,
    ) {
        let boxes: Vec<BBox> = boxes.iter().map(|b| b.clamp_to(40.0, 30.0)).filter(BBox::is_valid).collect();
        let c = clip(3, 40, 30, boxes);
        let s = sample_snippet(&c, 1, 3, 1).unwrap();
        let out = augment_with(&s, &AugmentDraws { brightness, flip, crop });
        let (w, h) = out.size();
        prop_assert!(w <= 40 && h <= 30);
        for f in &out.frames {
            prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for anns in &out.annotations {
            for a in anns {
                prop_assert!(a.bbox.x_min >= 0.0 && a.bbox.y_min >= 0.0);
                prop_assert!(a.bbox.x_max <= w as f64 && a.bbox.y_max <= h as f64);
                prop_assert!(a.bbox.width() >= MIN_BOX_SIDE && a.bbox.height() >= MIN_BOX_SIDE);
            }
        }
    }

    #[test]
    fn letterbox_inverse_within_half_pixel(w in 64..400usize, h in 64..400usize, short in 64..256usize, fx in 0.0..0.9f64, fy in 0.0..0.9f64) {
        let lb = Letterbox::new(w, h, short);
        let b = BBox::new(fx * w as f64, fy * h as f64, (fx + 0.1) * w as f64, (fy + 0.1) * h as f64);
        let back = lb.inverse_box(&lb.forward_box(&b));
        for (x, y) in [(back.x_min, b.x_min), (back.y_min, b.y_min), (back.x_max, b.x_max), (back.y_max, b.y_max)] {
            prop_assert!((x - y).abs() <= 0.5);
        }
        prop_assert!(lb.content_w <= lb.out_w && lb.content_h <= lb.out_h);
    }

    #[test]
    fn scm_is_permutation_equivariant(x in tensor(vec![4, 3, 3]), seed in any::<u64>(), perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ScmWeights::init(4, 2, &mut rng).unwrap();
        // Sharpen the attention so the context is far from a plain mean.
        let w = ScmWeights::new(w.w1.map(|v| v * 50.0), w.w2.clone(), w.w3.clone()).unwrap();
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..4 {
                for (dst, &src) in perm.iter().enumerate() {
                    out.set(&[c, dst / 3, dst % 3], t.get(&[c, src / 3, src % 3]));
                }
            }
            out
        };
        let direct = permute(&w.forward(&x).unwrap());
        let permuted = w.forward(&permute(&x)).unwrap();
        let scale = direct.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(direct.max_abs_diff(&permuted) < 1e-12 * scale);
    }

    #[test]
    fn tcm_matches_oracle_on_random_windows(frames in prop::collection::vec(tensor(vec![2, 2, 3]), 1..=4), seed in any::<u64>()) {
        let t = if frames.len() % 2 == 0 { frames.len() - 1 } else { frames.len() };
        let frames = &frames[..t];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = TcmWeights::init(2, 3, &mut rng).unwrap();
        let graph = w.forward(frames, t / 2, blendnet::blend::EmbeddingStrategy::Positional).unwrap();
        prop_assert!(graph.max_abs_diff(&oracle::tcm(frames, t / 2, &w)) < 1e-12);
    }

    #[test]
    fn checkpoints_roundtrip_bitwise(values in prop::collection::vec(any::<f64>(), 1..40), name in "[a-z]{1,8}(\\.[a-z0-9]{1,4}){0,3}") {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::from_vec(values.clone()));
        p.insert("zz.scalar", Tensor::scalar(values[0]));
        let back = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
        prop_assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&p));
    }

    #[test]
    fn results_roundtrip(recs in prop::collection::vec((0..5usize, 0..50usize, bbox(), 0..3usize, any::<f64>()), 0..20)) {
        let records: Vec<ResultRecord> = recs
            .into_iter()
            .filter(|r| r.4.is_finite())
            .map(|(c, frame, bbox, class, score)| ResultRecord { clip_id: format!("clip_{c}"), frame, bbox, class, score })
            .collect();
        prop_assert_eq!(parse_results(&format_results(&records), Path::new("r")).unwrap(), records);
    }

    #[test]
    fn annotations_roundtrip(cents in prop::collection::vec((0..3usize, 0u32..10000, 0u32..10000, 1u32..3000, 1u32..3000, 0u32..=10000), 0..12)) {
        let mut frames = vec![Vec::new(); 3];
        for (f, x, y, w, h, v) in cents {
            let x0 = x as f64 / 100.0;
            let y0 = y as f64 / 100.0;
            let bbox = BBox::new(x0, y0, ((x + w).min(12800)) as f64 / 100.0, ((y + h).min(12800)) as f64 / 100.0);
            if bbox.is_valid() {
                frames[f].push(Annotation { bbox, class: f % 2, visibility: v as f64 / 1e4 });
            }
        }
        let file = AnnotationFile { clip_id: "clip_x".into(), width: 128, height: 128, frames };
        prop_assert_eq!(parse_annotations(&format_annotations(&file), Path::new("a")).unwrap(), file);
    }

    #[test]
    fn config_echo_reparses(seed in any::<u64>(), epochs in 1..30usize, lr in 1e-5..1.0f64, t in 0..4usize) {
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.train.epochs = epochs;
        cfg.train.lr_peak = lr;
        cfg.blend.t_train = 2 * t + 1;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text(), Path::new("c")).unwrap(), cfg);
    }
}

#[test]
fn temporal_softmax_oracle_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = Tensor::randn([5, 3, 4], 4.0, &mut rng);
    let s = oracle::temporal_softmax(&e);
    for y in 0..3 {
        for x in 0..4 {
            let sum: f64 = (0..5).map(|m| s.get(&[m, y, x])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
