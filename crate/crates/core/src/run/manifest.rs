//! Run manifest: a deterministic, append-only text record of a training
//! run. Wall-clock timings go to a separate file so that two identical runs
//! produce byte-identical manifests.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMING_FILE: &str = "timing.txt";
const HEADER: &str = "#blendnet-manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Debug)]
pub struct ManifestWriter {
    manifest: File,
    timing: File,
    path: PathBuf,
}

fn open_truncate(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

impl ManifestWriter {
    pub fn create(dir: &Path, config_hash: &str, dataset_hash: &str) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = open_truncate(&path)?;
        writeln!(manifest, "{HEADER}\nconfig_hash = {config_hash}\ndataset_hash = {dataset_hash}")
            .map_err(|e| Error::io(&path, e))?;
        let timing = open_truncate(&dir.join(TIMING_FILE))?;
        Ok(Self { manifest, timing, path })
    }

    /// Appends the lr lines of one epoch followed by its summary line.
    pub fn append_epoch(&mut self, rec: &EpochRecord, first_iter: usize, lrs: &[f64], seconds: f64) -> Result<()> {
        let mut text = String::new();
        for (i, lr) in lrs.iter().enumerate() {
            text.push_str(&format!("lr {} {lr}\n", first_iter + i));
        }
        text.push_str(&format_epoch(rec));
        text.push('\n');
        self.manifest
            .write_all(text.as_bytes())
            .and_then(|_| self.manifest.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        let timing_path = self.path.with_file_name(TIMING_FILE);
        writeln!(self.timing, "epoch {} {seconds:.3}s", rec.epoch).map_err(|e| Error::io(&timing_path, e))
    }
}

fn format_epoch(rec: &EpochRecord) -> String {
    format!(
        "epoch {} loss {} val_map {} checkpoint {}",
        rec.epoch,
        rec.mean_loss,
        rec.val_map.map_or("-".to_string(), |m| m.to_string()),
        rec.checkpoint.as_deref().unwrap_or("-")
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub dataset_hash: String,
    /// `(iteration, lr)` in file order.
    pub lrs: Vec<(usize, f64)>,
    pub epochs: Vec<EpochRecord>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(err(1, format!("expected `{HEADER}`"))),
    }
    let mut m = Manifest {
        config_hash: String::new(),
        dataset_hash: String::new(),
        lrs: Vec::new(),
        epochs: Vec::new(),
    };
    for (n, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(n, format!("bad number `{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("bad integer `{s}`: {e}")));
        match f.as_slice() {
            [] => {}
            ["config_hash", "=", h] => m.config_hash = h.to_string(),
            ["dataset_hash", "=", h] => m.dataset_hash = h.to_string(),
            ["lr", i, v] => m.lrs.push((int(i)?, num(v)?)),
            ["epoch", e, "loss", l, "val_map", v, "checkpoint", c] => m.epochs.push(EpochRecord {
                epoch: int(e)?,
                mean_loss: num(l)?,
                val_map: if *v == "-" { None } else { Some(num(v)?) },
                checkpoint: (*c != "-").then(|| c.to_string()),
            }),
            _ => return Err(err(n, format!("unrecognised line `{line}`"))),
        }
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_manifest_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ManifestWriter::create(dir.path(), "abc", "def").unwrap();
        let r1 = EpochRecord { epoch: 1, mean_loss: 0.75, val_map: Some(0.125), checkpoint: Some("epoch_01.ckpt".into()) };
        let r2 = EpochRecord { epoch: 2, mean_loss: 0.5, val_map: None, checkpoint: None };
        w.append_epoch(&r1, 0, &[0.002, 0.0021], 1.0).unwrap();
        w.append_epoch(&r2, 2, &[0.0022], 1.0).unwrap();
        drop(w);
        let m = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.config_hash, "abc");
        assert_eq!(m.dataset_hash, "def");
        assert_eq!(m.lrs, vec![(0, 0.002), (1, 0.0021), (2, 0.0022)]);
        assert_eq!(m.epochs, vec![r1, r2]);
        assert!(dir.path().join(TIMING_FILE).exists());
    }

    #[test]
    fn garbage_line_is_located() {
        let e = parse_manifest("#blendnet-manifest v1\nlr 0 x\n", Path::new("m.txt")).unwrap_err();
        assert!(e.to_string().starts_with("m.txt:2:"), "{e}");
    }
}
