//! Per-clip annotation files.
//!
//! ```text
//! #blendnet-ann v1 <clip_id> <W> <H> <num_frames>
//! frame_idx x_min y_min x_max y_max class_id visibility
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::Annotation;
use crate::bbox::BBox;
use crate::error::{Error, Result};

const HEADER_TAG: &str = "#blendnet-ann";
const FORMAT_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationFile {
    pub clip_id: String,
    pub width: usize,
    pub height: usize,
    /// One list per frame; its length is the clip's frame count.
    pub frames: Vec<Vec<Annotation>>,
}

pub fn format_annotations(file: &AnnotationFile) -> String {
    let mut out = format!(
        "{HEADER_TAG} {FORMAT_VERSION} {} {} {} {}\n",
        file.clip_id,
        file.width,
        file.height,
        file.frames.len()
    );
    for (f, anns) in file.frames.iter().enumerate() {
        for a in anns {
            let b = &a.bbox;
            let vis = if a.visibility < 0.0 { "-1".to_string() } else { format!("{:.4}", a.visibility) };
            writeln!(
                out,
                "{f} {:.2} {:.2} {:.2} {:.2} {} {vis}",
                b.x_min, b.y_min, b.x_max, b.y_max, a.class
            )
            .expect("writing to a String");
        }
    }
    out
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationFile> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(AnnotationFile {
            clip_id: String::new(),
            width: 0,
            height: 0,
            frames: Vec::new(),
        });
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 || h[0] != HEADER_TAG || h[1] != FORMAT_VERSION {
        return Err(err(1, format!("expected `{HEADER_TAG} {FORMAT_VERSION} <clip_id> <W> <H> <num_frames>`")));
    }
    let dim = |s: &str, what: &str| s.parse::<usize>().map_err(|e| err(1, format!("bad {what} {s:?}: {e}")));
    let (width, height, n) = (dim(h[3], "width")?, dim(h[4], "height")?, dim(h[5], "frame count")?);
    let mut frames = vec![Vec::new(); n];
    for (i, line) in lines {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(ln, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(ln, format!("bad number {s:?}: {e}")));
        let frame = f[0].parse::<usize>().map_err(|e| err(ln, format!("bad frame index {:?}: {e}", f[0])))?;
        if frame >= n {
            return Err(err(ln, format!("frame {frame} beyond the declared {n} frames")));
        }
        let raw = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        let class = f[5].parse::<usize>().map_err(|e| err(ln, format!("bad class id {:?}: {e}", f[5])))?;
        let visibility = num(f[6])?;
        if !(visibility == -1.0 || (0.0..=1.0).contains(&visibility)) {
            return Err(err(ln, format!("visibility {visibility} outside [0, 1]")));
        }
        let bbox = raw.clamp_to(width as f64, height as f64);
        if bbox != raw {
            log::warn!("{}:{ln}: box {raw:?} clamped to the {width}x{height} frame", path.display());
        }
        if !bbox.is_valid() {
            return Err(err(ln, format!("degenerate box {raw:?}")));
        }
        frames[frame].push(Annotation { bbox, class, visibility });
    }
    Ok(AnnotationFile {
        clip_id: h[2].to_string(),
        width,
        height,
        frames,
    })
}

pub fn save_annotations(file: &AnnotationFile, path: &Path) -> Result<()> {
    std::fs::write(path, format_annotations(file)).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("ann.txt")
    }

    #[test]
    fn empty_file_is_valid() {
        let f = parse_annotations("", p()).unwrap();
        assert!(f.frames.is_empty());
        let f = parse_annotations("#blendnet-ann v1 c 64 64 3\n", p()).unwrap();
        assert_eq!(f.frames.len(), 3);
        assert!(f.frames.iter().all(Vec::is_empty));
    }

    #[test]
    fn short_line_names_its_number() {
        let text = "#blendnet-ann v1 c 64 64 3\n0 1 2 3 4 0 1\n1 1 2 3 4\n";
        let e = parse_annotations(text, p()).unwrap_err().to_string();
        assert!(e.contains("ann.txt:3") && e.contains("7 fields"), "{e}");
    }

    #[test]
    fn out_of_bounds_box_is_clamped() {
        let text = "#blendnet-ann v1 c 64 64 1\n0 -3.00 2.00 70.00 10.00 0 -1\n";
        let f = parse_annotations(text, p()).unwrap();
        assert_eq!(f.frames[0][0].bbox, BBox::new(0.0, 2.0, 64.0, 10.0));
        assert_eq!(f.frames[0][0].visibility, -1.0);
    }

    #[test]
    fn roundtrip_of_quantized_values() {
        let file = AnnotationFile {
            clip_id: "clip_0001".into(),
            width: 128,
            height: 96,
            frames: vec![
                vec![Annotation { bbox: BBox::new(0.1, 7.35, 33.33, 90.07), class: 2, visibility: 0.1234 }],
                vec![],
                vec![Annotation { bbox: BBox::new(5.0, 5.0, 6.0, 6.0), class: 0, visibility: -1.0 }],
            ],
        };
        assert_eq!(parse_annotations(&format_annotations(&file), p()).unwrap(), file);
    }
}
