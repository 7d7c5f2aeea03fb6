//! Frame storage: a raw planar f64 container or one PNG per frame.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAMES_MAGIC: &[u8; 8] = b"BLNDFRMS";
const FRAMES_VERSION: u8 = 1;

/// `magic, version:u8, count:u32, C:u32, H:u32, W:u32, data:f64[]`, all
/// little-endian. Every frame must share one shape.
pub fn encode_frames(frames: &[Tensor]) -> Result<Vec<u8>> {
    let shape = frames.first().map(|f| f.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
    if shape.len() != 3 {
        return Err(Error::invalid(format!("frames must be [C,H,W], got {shape:?}")));
    }
    let mut out = Vec::with_capacity(25 + frames.len() * shape.iter().product::<usize>() * 8);
    out.extend_from_slice(FRAMES_MAGIC);
    out.push(FRAMES_VERSION);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for &d in &shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "frame container",
                lhs: shape,
                rhs: f.shape().to_vec(),
            });
        }
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_frames(buf: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |m: &str| Error::invalid(format!("frame container: {m}"));
    if buf.len() < 25 || &buf[..8] != FRAMES_MAGIC {
        return Err(bad("missing BLNDFRMS magic"));
    }
    if buf[8] != FRAMES_VERSION {
        return Err(bad("unsupported version"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[9 + 4 * i..13 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w) = (word(0), word(1), word(2), word(3));
    let per = c * h * w;
    if buf.len() != 25 + n * per * 8 {
        return Err(bad("size does not match header"));
    }
    let mut vals = buf[25..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    (0..n)
        .map(|_| Tensor::new([c, h, w], vals.by_ref().take(per).collect()))
        .collect()
}

pub fn write_frames(path: &Path, frames: &[Tensor]) -> Result<()> {
    std::fs::write(path, encode_frames(frames)?).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<Tensor>> {
    decode_frames(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// 8-bit RGB PNG; exact for frames already quantised to multiples of 1/255.
pub fn save_png_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let &[3, h, w] = frame.shape() else {
        return Err(Error::invalid(format!("PNG frames must be [3,H,W], got {:?}", frame.shape())));
    };
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_png_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}
