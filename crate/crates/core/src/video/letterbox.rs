//! Aspect-preserving resize plus right/bottom padding.

use crate::bbox::BBox;
use crate::eval::bilinear_resize;
use crate::tensor::Tensor;

/// Padded sides are multiples of the coarsest pyramid stride.
pub const PAD_MULTIPLE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub src_w: usize,
    pub src_h: usize,
    /// Size of the resized content before padding.
    pub content_w: usize,
    pub content_h: usize,
    pub out_w: usize,
    pub out_h: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, target_short: usize) -> Self {
        let scale = target_short as f64 / src_w.min(src_h) as f64;
        let content_w = ((src_w as f64 * scale).round() as usize).max(1);
        let content_h = ((src_h as f64 * scale).round() as usize).max(1);
        Self {
            scale,
            src_w,
            src_h,
            content_w,
            content_h,
            out_w: content_w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
            out_h: content_h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.out_w == self.src_w && self.out_h == self.src_h
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        b.scale(self.scale)
    }

    /// Maps a box in letterboxed coordinates back to the source frame.
    pub fn inverse_box(&self, b: &BBox) -> BBox {
        b.scale(1.0 / self.scale).clamp_to(self.src_w as f64, self.src_h as f64)
    }

    pub fn apply(&self, frame: &Tensor) -> Tensor {
        if self.is_identity() {
            return frame.clone();
        }
        let &[c, h, w] = frame.shape() else {
            unreachable!("frames are [C,H,W]")
        };
        let mut out = vec![0.0; c * self.out_h * self.out_w];
        for ch in 0..c {
            let plane = &frame.data()[ch * h * w..(ch + 1) * h * w];
            let resized = bilinear_resize(plane, h, w, self.content_w, self.content_h);
            for y in 0..self.content_h {
                let dst = (ch * self.out_h + y) * self.out_w;
                out[dst..dst + self.content_w]
                    .copy_from_slice(&resized[y * self.content_w..(y + 1) * self.content_w]);
            }
        }
        Tensor::new([c, self.out_h, self.out_w], out).expect("letterbox size")
    }
}

pub fn resize_bilinear(frame: &Tensor, out_w: usize, out_h: usize) -> Tensor {
    let &[c, h, w] = frame.shape() else {
        unreachable!("frames are [C,H,W]")
    };
    let mut out = Vec::with_capacity(c * out_w * out_h);
    for ch in 0..c {
        out.extend(bilinear_resize(&frame.data()[ch * h * w..(ch + 1) * h * w], h, w, out_w, out_h));
    }
    Tensor::new([c, out_h, out_w], out).expect("resize size")
}

/// Resizes so the shorter side equals `target_short`, pads right/bottom and
/// scales the boxes identically.
pub fn resize_letterbox(frame: &Tensor, boxes: &[BBox], target_short: usize) -> (Tensor, Vec<BBox>, Letterbox) {
    let s = frame.shape();
    let lb = Letterbox::new(s[2], s[1], target_short);
    let boxes = boxes.iter().map(|b| lb.forward_box(b)).collect();
    (lb.apply(frame), boxes, lb)
}
