//! Generates the default synthetic benchmark and prints its visibility
//! distribution. Pass a directory to also write it to disk.
//!
//! Run with `cargo run --example generate_dataset [-- <dir>]`.

use std::path::PathBuf;

use blendnet::eval::DEFAULT_BINS;
use blendnet::video::{generate_synthetic, write_dataset, Dataset, FrameFormat, SynthConfig};

fn main() -> blendnet::Result<()> {
    let cfg = SynthConfig::default();
    let ds = Dataset::from_clips(generate_synthetic(&cfg)?, cfg.test_clips);
    println!("{} train / {} test clips, hash {}", ds.train.len(), ds.test.len(), ds.hash);
    for (name, clips) in [("train", &ds.train), ("test", &ds.test)] {
        let vis: Vec<f64> = clips
            .iter()
            .flat_map(|c| c.annotations.iter().flatten().map(|a| a.visibility))
            .collect();
        let counts: Vec<String> = DEFAULT_BINS
            .iter()
            .map(|b| format!("{} {}", b.label(), vis.iter().filter(|&&v| b.contains(v)).count()))
            .collect();
        println!("{name}: {} boxes, visibility {}", vis.len(), counts.join(", "));
    }
    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        write_dataset(&dir, &ds, FrameFormat::Png, cfg.seed)?;
        println!("written to {}", dir.display());
    }
    Ok(())
}
