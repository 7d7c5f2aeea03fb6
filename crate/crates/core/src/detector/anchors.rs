//! Anchor boxes: three scales × three aspect ratios at every cell of every
//! pyramid level.

use crate::bbox::BBox;

/// Pyramid levels P3..P7.
pub const NUM_LEVELS: usize = 5;
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [8, 16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    /// Square side of the base anchor on each level, in pixels.
    pub base_sizes: [f64; NUM_LEVELS],
    pub scales: [f64; 3],
    /// Width-to-height ratios.
    pub ratios: [f64; 3],
}

impl AnchorSpec {
    /// Base areas 32²..512² at 512-pixel inputs, scaled linearly with the
    /// shorter input side.
    pub fn for_input(short_side: usize) -> Self {
        let s = short_side as f64 / 512.0;
        Self {
            base_sizes: [32.0 * s, 64.0 * s, 128.0 * s, 256.0 * s, 512.0 * s],
            scales: [1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: [0.5, 1.0, 2.0],
        }
    }

    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// `(w, h)` of anchor `a` (scale-major) on `level`.
    pub fn anchor_size(&self, level: usize, a: usize) -> (f64, f64) {
        let area = self.base_sizes[level] * self.base_sizes[level];
        let s = self.scales[a / self.ratios.len()];
        let ar = self.ratios[a % self.ratios.len()];
        let h = (area / ar).sqrt();
        (s * h * ar, s * h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Position-major: anchor `a` at cell `(y, x)` is `(y·W + x)·A + a`.
    pub anchors: Vec<Anchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
    pub per_location: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.levels.iter().flat_map(|l| l.anchors.iter())
    }

    /// Offset of each level's first anchor in the flattened order.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.anchors.len();
                o
            })
            .collect()
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Feature-map sizes of P3..P7 for an input, following the stride-2
/// convolution arithmetic of the backbone.
pub fn level_shapes(img_w: usize, img_h: usize) -> [(usize, usize); NUM_LEVELS] {
    let (mut h, mut w) = (img_h, img_w);
    for _ in 0..3 {
        h = halve(h);
        w = halve(w);
    }
    let mut out = [(0, 0); NUM_LEVELS];
    for slot in &mut out {
        *slot = (h, w);
        h = halve(h);
        w = halve(w);
    }
    out
}

pub fn generate_anchors(img_w: usize, img_h: usize, spec: &AnchorSpec) -> AnchorSet {
    let per_location = spec.per_location();
    let levels = level_shapes(img_w, img_h)
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let stride = LEVEL_STRIDES[l];
            let mut anchors = Vec::with_capacity(h * w * per_location);
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for a in 0..per_location {
                        let (aw, ah) = spec.anchor_size(l, a);
                        anchors.push(Anchor { cx, cy, w: aw, h: ah });
                    }
                }
            }
            AnchorLevel {
                stride,
                height: h,
                width: w,
                anchors,
            }
        })
        .collect();
    AnchorSet {
        levels,
        per_location,
    }
}
