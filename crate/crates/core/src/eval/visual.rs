//! Attention back-projection and annotated frame rendering.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedMap {
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale pixels.
    pub pixels: Vec<u8>,
    /// Set when the map had no dynamic range and was emitted all-zero.
    pub flat: bool,
}

impl ProjectedMap {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::invalid("pixel buffer does not match image size"))?;
        img.save(path)?;
        Ok(())
    }
}

/// Sample coordinate in a source axis of `n_in` cells for output pixel `o`
/// of `n_out`, aligning cell centres.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling of a float field `[h, w]` to `out_w × out_h`.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Upsamples an attention map `[H', W']` to image resolution and min-max
/// normalises it to `0..=255`.
pub fn project_attention(map: &Tensor, img_w: usize, img_h: usize) -> Result<ProjectedMap> {
    let &[h, w] = map.shape() else {
        return Err(Error::invalid(format!("attention map must be [H,W], got {:?}", map.shape())));
    };
    if h == 0 || w == 0 || img_w == 0 || img_h == 0 {
        return Err(Error::invalid("attention projection with an empty extent"));
    }
    let up = bilinear_resize(map.data(), h, w, img_w, img_h);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let flat = !(range > 1e-12 * hi.abs().max(1.0));
    let pixels = if flat {
        vec![0; up.len()]
    } else {
        up.iter().map(|v| ((v - lo) / range * 255.0).round() as u8).collect()
    };
    Ok(ProjectedMap {
        width: img_w,
        height: img_h,
        pixels,
        flat,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn draw_rect(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let x0 = (b.x_min.round() as i64).clamp(0, w - 1);
    let x1 = ((b.x_max.round() as i64) - 1).clamp(0, w - 1);
    let y0 = (b.y_min.round() as i64).clamp(0, h - 1);
    let y1 = ((b.y_max.round() as i64) - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, Rgb(color));
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, Rgb(color));
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
    }
}

pub const PREDICTION_COLOR: [u8; 3] = [255, 40, 40];
pub const GROUND_TRUTH_COLOR: [u8; 3] = [40, 220, 40];

/// Renders a planar `[3, H, W]` (or `[1, H, W]`) frame in `[0, 1]` with box
/// outlines burned in.
pub fn render_frame(frame: &Tensor, boxes: &[(BBox, [u8; 3])]) -> Result<RgbImage> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::invalid(format!("frame must be [C,H,W], got {:?}", frame.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot render {c}-channel frame")));
    }
    let d = frame.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| to_u8(d[(ch.min(c - 1) * h + y) * w + x]);
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    for (b, color) in boxes {
        draw_rect(&mut img, b, *color);
    }
    Ok(img)
}

pub fn save_gray(pixels: &[u8], w: usize, h: usize, path: &Path) -> Result<()> {
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, p) in pixels.iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, Luma([*p]));
    }
    img.save(path)?;
    Ok(())
}
