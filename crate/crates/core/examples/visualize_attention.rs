//! Writes the temporal attention maps and the annotated centre frame of a
//! synthetic clip. Without a checkpoint the weights are freshly initialised.
//!
//! Run with `cargo run --example visualize_attention -- <out dir> [checkpoint]`.

use std::path::PathBuf;

use blendnet::config::RunConfig;
use blendnet::detector::Detector;
use blendnet::run::commands::{load_detector, visualize_clip};
use blendnet::video::generate_clip;

fn main() -> blendnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "attention_maps".into()));
    let cfg = RunConfig::default();
    let det = match args.next() {
        Some(ckpt) => load_detector(&cfg, &PathBuf::from(ckpt))?,
        None => Detector::new(cfg.detector_config(), cfg.model.init_seed)?,
    };
    std::fs::create_dir_all(&out).map_err(|e| blendnet::Error::io(&out, e))?;
    let clip = generate_clip(&cfg.synth, 45)?;
    let written = visualize_clip(&det, &clip, 12, &cfg, &out)?;
    for f in &written.attention_files {
        println!("{}", f.display());
    }
    println!("{}", written.frame_file.display());
    if !written.flat_offsets.is_empty() {
        println!("flat maps at offsets {:?}", written.flat_offsets);
    }
    Ok(())
}
