//! Sequence-level augmentation: one set of draws applied to every frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, Snippet};
use crate::tensor::Tensor;

/// Boxes thinner than this after cropping are dropped.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraws {
    pub brightness: f64,
    pub flip: bool,
    /// Fraction of each side removed by the central crop.
    pub crop: f64,
}

impl AugmentDraws {
    pub const IDENTITY: AugmentDraws = AugmentDraws {
        brightness: 1.0,
        flip: false,
        crop: 0.0,
    };
}

pub fn draw_augment<R: Rng + ?Sized>(rng: &mut R) -> AugmentDraws {
    AugmentDraws {
        brightness: rng.random_range(0.7..1.3),
        flip: rng.random_bool(0.5),
        crop: rng.random_range(0.0..0.1),
    }
}

pub fn augment(snippet: &Snippet, seed: u64) -> Snippet {
    let draws = draw_augment(&mut ChaCha8Rng::seed_from_u64(seed));
    augment_with(snippet, &draws)
}

fn transform_frame(frame: &Tensor, d: &AugmentDraws, cx: usize, cy: usize) -> Tensor {
    let &[c, h, w] = frame.shape() else {
        unreachable!("frames are [C,H,W]")
    };
    let (nh, nw) = (h - 2 * cy, w - 2 * cx);
    let src = frame.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            let row = (ch * h + y + cy) * w;
            for x in 0..nw {
                let sx = if d.flip { w - 1 - (x + cx) } else { x + cx };
                out.push((src[row + sx] * d.brightness).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([c, nh, nw], out).expect("cropped size")
}

pub fn augment_with(snippet: &Snippet, d: &AugmentDraws) -> Snippet {
    if *d == AugmentDraws::IDENTITY {
        return snippet.clone();
    }
    let (w, h) = snippet.size();
    let cx = ((d.crop * w as f64).round() as usize).min((w - 1) / 2);
    let cy = ((d.crop * h as f64).round() as usize).min((h - 1) / 2);
    let (nw, nh) = ((w - 2 * cx) as f64, (h - 2 * cy) as f64);
    let frames = snippet
        .frames
        .iter()
        .map(|f| transform_frame(f, d, cx, cy))
        .collect();
    let annotations = snippet
        .annotations
        .iter()
        .map(|anns| {
            anns.iter()
                .filter_map(|a| {
                    let b = if d.flip { a.bbox.flip_horizontal(w as f64) } else { a.bbox };
                    let b = b.translate(-(cx as f64), -(cy as f64)).clamp_to(nw, nh);
                    (b.width() >= MIN_BOX_SIDE && b.height() >= MIN_BOX_SIDE).then_some(Annotation { bbox: b, ..*a })
                })
                .collect()
        })
        .collect();
    Snippet {
        frames,
        annotations,
        ..snippet.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;

    fn snippet() -> Snippet {
        let mut f = Tensor::zeros([3, 10, 100]);
        f.set(&[0, 0, 10], 0.5);
        let ann = Annotation {
            bbox: BBox::new(10.0, 2.0, 20.0, 8.0),
            class: 0,
            visibility: 1.0,
        };
        Snippet {
            center: 1,
            stride: 1,
            indices: vec![0, 1, 2],
            frames: vec![f.clone(), f.clone(), f],
            annotations: vec![vec![ann]; 3],
        }
    }

    #[test]
    fn identity_draws_change_nothing() {
        let s = snippet();
        assert_eq!(augment_with(&s, &AugmentDraws::IDENTITY), s);
    }

    #[test]
    fn flip_mirrors_boxes_and_pixels() {
        let s = snippet();
        let d = AugmentDraws { flip: true, ..AugmentDraws::IDENTITY };
        let out = augment_with(&s, &d);
        for anns in &out.annotations {
            assert_eq!(anns[0].bbox, BBox::new(80.0, 2.0, 90.0, 8.0));
        }
        assert_eq!(out.frames[2].get(&[0, 0, 89]), 0.5);
    }

    #[test]
    fn crop_shifts_and_drops() {
        let s = snippet();
        let d = AugmentDraws { crop: 0.1, ..AugmentDraws::IDENTITY };
        let out = augment_with(&s, &d);
        assert_eq!(out.size(), (80, 8));
        assert_eq!(out.annotations[0][0].bbox, BBox::new(0.0, 1.0, 10.0, 7.0));
        let d = AugmentDraws { crop: 0.19, ..AugmentDraws::IDENTITY };
        // Box [10, 20] minus 19 px leaves 1 px of width.
        assert!(augment_with(&s, &d).annotations[0].is_empty());
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let s = snippet();
        let d = AugmentDraws { brightness: 3.0, ..AugmentDraws::IDENTITY };
        assert_eq!(augment_with(&s, &d).frames[0].get(&[0, 0, 10]), 1.0);
    }
}
