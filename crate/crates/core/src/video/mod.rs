//! Clips, snippet sampling, augmentation, letterboxing, the synthetic
//! occluded-video generator and on-disk formats.

mod annotations;
mod augment;
mod dataset;
mod frames;
mod letterbox;
mod synth;

pub use annotations::{format_annotations, load_annotations, parse_annotations, save_annotations, AnnotationFile};
pub use augment::{augment, augment_with, draw_augment, AugmentDraws, MIN_BOX_SIDE};
pub use dataset::{load_dataset, write_dataset, Dataset, FrameFormat, DATASET_MANIFEST};
pub use frames::{decode_frames, encode_frames, load_png_frame, read_frames, save_png_frame, write_frames, FRAMES_MAGIC};
pub use letterbox::{resize_bilinear, resize_letterbox, Letterbox};
pub use synth::{generate_clip, generate_synthetic, SynthConfig};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: usize,
    /// Unoccluded fraction, or -1 when unknown.
    pub visibility: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]` images with values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// One list per frame.
    pub annotations: Vec<Vec<Annotation>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub center: usize,
    pub stride: usize,
    /// Source frame indices, in time order.
    pub indices: Vec<usize>,
    pub frames: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
}

impl Snippet {
    /// Position of the centre frame within the snippet.
    pub fn main(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[2], s[1])
    }
}

/// Frame indices `t + stride·k`, `k ∈ [−τ, τ]`, clamped to the clip.
pub fn snippet_indices(len: usize, t: usize, support: usize, stride: usize) -> Result<Vec<usize>> {
    if support % 2 == 0 {
        return Err(Error::invalid(format!("snippet length must be odd, got {support}")));
    }
    if stride == 0 {
        return Err(Error::invalid("snippet stride must be at least 1"));
    }
    if t >= len {
        return Err(Error::invalid(format!("centre frame {t} outside a clip of {len} frames")));
    }
    let r = (support / 2) as isize;
    let last = len as isize - 1;
    Ok((-r..=r)
        .map(|k| (t as isize + k * stride as isize).clamp(0, last) as usize)
        .collect())
}

pub fn sample_snippet(clip: &VideoClip, t: usize, support: usize, stride: usize) -> Result<Snippet> {
    let indices = snippet_indices(clip.len(), t, support, stride)?;
    Ok(Snippet {
        center: t,
        stride,
        frames: indices.iter().map(|&i| clip.frames[i].clone()).collect(),
        annotations: indices.iter().map(|&i| clip.annotations[i].clone()).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snippet_index_cases() {
        assert_eq!(snippet_indices(40, 10, 3, 1).unwrap(), vec![9, 10, 11]);
        assert_eq!(snippet_indices(40, 0, 3, 1).unwrap(), vec![0, 0, 1]);
        assert_eq!(snippet_indices(40, 10, 3, 5).unwrap(), vec![5, 10, 15]);
        assert_eq!(snippet_indices(1, 0, 5, 2).unwrap(), vec![0; 5]);
        assert!(snippet_indices(40, 10, 4, 1).is_err());
        assert!(snippet_indices(40, 40, 3, 1).is_err());
    }
}
