//! Detection results files: one `clip_id frame_idx x_min y_min x_max y_max
//! class_id score` record per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub clip_id: String,
    pub frame: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Shortest round-trip float formatting keeps reparsed values bit-equal.
pub fn format_results(records: &[ResultRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = &r.bbox;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            r.clip_id, r.frame, b.x_min, b.y_min, b.x_max, b.y_max, r.class, r.score
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_results(text: &str, path: &Path) -> Result<Vec<ResultRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(err(n, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(n, format!("bad number {s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("bad integer {s:?}: {e}")));
        records.push(ResultRecord {
            clip_id: f[0].to_string(),
            frame: int(f[1])?,
            bbox: BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?),
            class: int(f[6])?,
            score: num(f[7])?,
        });
    }
    Ok(records)
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    std::fs::write(path, format_results(records)).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, path)
}
