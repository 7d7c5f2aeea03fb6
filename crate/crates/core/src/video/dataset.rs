//! On-disk dataset layout:
//!
//! ```text
//! <dir>/dataset.txt                      manifest with per-clip hashes
//! <dir>/<split>/<clip_id>/annotations.txt
//! <dir>/<split>/<clip_id>/frames.f64     or frame_000000.png, ...
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::annotations::{format_annotations, load_annotations, AnnotationFile};
use super::frames::{load_png_frame, read_frames, save_png_frame, write_frames};
use super::VideoClip;
use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "dataset.txt";
const MANIFEST_HEADER: &str = "#blendnet-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Png,
    F64,
}

impl FrameFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameFormat::Png => "png",
            FrameFormat::F64 => "f64",
        }
    }
}

impl fmt::Display for FrameFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(FrameFormat::Png),
            "f64" => Ok(FrameFormat::F64),
            _ => Err(Error::invalid(format!("unknown frame format {s:?} (expected png or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
    /// Digest over every clip's annotations and pixels.
    pub hash: String,
}

impl Dataset {
    /// Splits off the last `test_clips` clips as the test set.
    pub fn from_clips(mut clips: Vec<VideoClip>, test_clips: usize) -> Self {
        let test = clips.split_off(clips.len() - test_clips.min(clips.len()));
        let mut ds = Self {
            train: clips,
            test,
            hash: String::new(),
        };
        ds.hash = dataset_hash(&ds.clip_lines());
        ds
    }

    pub fn split(&self, name: &str) -> Result<&[VideoClip]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            _ => Err(Error::invalid(format!("unknown split {name:?} (expected train or test)"))),
        }
    }

    fn clip_lines(&self) -> Vec<String> {
        let lines = |split: &str, clips: &[VideoClip]| -> Vec<String> {
            clips
                .par_iter()
                .map(|c| format!("clip {split} {} {} {}", c.id, c.len(), clip_hash(c)))
                .collect()
        };
        let mut out = lines("train", &self.train);
        out.extend(lines("test", &self.test));
        out
    }
}

fn annotation_file(clip: &VideoClip) -> AnnotationFile {
    AnnotationFile {
        clip_id: clip.id.clone(),
        width: clip.width,
        height: clip.height,
        frames: clip.annotations.clone(),
    }
}

pub fn clip_hash(clip: &VideoClip) -> String {
    let mut h = Sha256::new();
    h.update(format_annotations(&annotation_file(clip)).as_bytes());
    for f in &clip.frames {
        for v in f.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn dataset_hash(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn clip_dir(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(id)
}

fn frame_png(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:06}.png"))
}

fn write_clip(root: &Path, split: &str, clip: &VideoClip, format: FrameFormat) -> Result<()> {
    let dir = clip_dir(root, split, &clip.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ann = dir.join("annotations.txt");
    std::fs::write(&ann, format_annotations(&annotation_file(clip))).map_err(|e| Error::io(&ann, e))?;
    match format {
        FrameFormat::F64 => write_frames(&dir.join("frames.f64"), &clip.frames),
        FrameFormat::Png => clip
            .frames
            .iter()
            .enumerate()
            .try_for_each(|(i, f)| save_png_frame(&frame_png(&dir, i), f)),
    }
}

/// Writes every clip and the manifest. `seed` is recorded for provenance.
pub fn write_dataset(root: &Path, ds: &Dataset, format: FrameFormat, seed: u64) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let jobs: Vec<(&str, &VideoClip)> = ds
        .train
        .iter()
        .map(|c| ("train", c))
        .chain(ds.test.iter().map(|c| ("test", c)))
        .collect();
    jobs.par_iter().try_for_each(|(split, c)| write_clip(root, split, c, format))?;
    let mut text = format!("{MANIFEST_HEADER}\nseed = {seed}\nframe_format = {format}\n");
    for l in ds.clip_lines() {
        text.push_str(&l);
        text.push('\n');
    }
    text.push_str(&format!("hash = {}\n", ds.hash));
    let path = root.join(DATASET_MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_clip(root: &Path, split: &str, id: &str, n: usize, format: FrameFormat) -> Result<VideoClip> {
    let dir = clip_dir(root, split, id);
    let ann = load_annotations(&dir.join("annotations.txt"))?;
    let frames = match format {
        FrameFormat::F64 => read_frames(&dir.join("frames.f64"))?,
        FrameFormat::Png => (0..n).map(|i| load_png_frame(&frame_png(&dir, i))).collect::<Result<_>>()?,
    };
    if frames.len() != n || ann.frames.len() != n {
        return Err(Error::invalid(format!(
            "clip {id}: manifest lists {n} frames, found {} images and {} annotated frames",
            frames.len(),
            ann.frames.len()
        )));
    }
    Ok(VideoClip {
        id: id.to_string(),
        width: ann.width,
        height: ann.height,
        frames,
        annotations: ann.frames,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut format = FrameFormat::Png;
    let mut entries = Vec::new();
    let mut recorded_hash = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            _ if ln == 1 && line != MANIFEST_HEADER => return Err(err(ln, format!("expected `{MANIFEST_HEADER}`"))),
            _ if ln == 1 => {}
            ["seed", "=", _] => {}
            ["frame_format", "=", v] => format = v.parse().map_err(|e: Error| err(ln, e.to_string()))?,
            ["clip", split @ ("train" | "test"), id, n, digest] => {
                let n = n.parse::<usize>().map_err(|e| err(ln, format!("bad frame count: {e}")))?;
                entries.push((split.to_string(), id.to_string(), n, digest.to_string(), ln));
            }
            ["hash", "=", h] => recorded_hash = Some(h.to_string()),
            _ => return Err(err(ln, format!("unrecognised line {line:?}"))),
        }
    }
    let clips: Vec<(String, VideoClip)> = entries
        .par_iter()
        .map(|(split, id, n, digest, ln)| {
            let clip = load_clip(root, split, id, *n, format)?;
            if clip_hash(&clip) != *digest {
                return Err(err(*ln, format!("clip {id} does not match its recorded hash")));
            }
            Ok((split.clone(), clip))
        })
        .collect::<Result<_>>()?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (split, c) in clips {
        if split == "train" { train.push(c) } else { test.push(c) }
    }
    let mut ds = Dataset {
        train,
        test,
        hash: String::new(),
    };
    ds.hash = dataset_hash(&ds.clip_lines());
    if let Some(h) = recorded_hash {
        if h != ds.hash {
            return Err(Error::invalid(format!("{}: dataset hash mismatch", path.display())));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{generate_synthetic, SynthConfig};

    #[test]
    fn write_then_load_is_lossless() {
        let cfg = SynthConfig {
            num_clips: 3,
            test_clips: 1,
            frames_per_clip: 3,
            width: 64,
            height: 64,
            min_object_size: 10.0,
            max_object_size: 20.0,
            min_occluder_width: 6,
            max_occluder_width: 12,
            ..SynthConfig::default()
        };
        let ds = Dataset::from_clips(generate_synthetic(&cfg).unwrap(), cfg.test_clips);
        assert_eq!((ds.train.len(), ds.test.len()), (2, 1));
        for format in [FrameFormat::Png, FrameFormat::F64] {
            let dir = tempfile::tempdir().unwrap();
            write_dataset(dir.path(), &ds, format, cfg.seed).unwrap();
            assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        }
    }
}
