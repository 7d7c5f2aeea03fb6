//! Saves a freshly initialised detector, reloads it, and shows that a
//! checkpoint for a different blend configuration is refused with the
//! offending record named.
//!
//! Run with `cargo run --example checkpoint_roundtrip`.

use blendnet::blend::BlendOrder;
use blendnet::config::RunConfig;
use blendnet::detector::Detector;
use blendnet::tensor::{checkpoint_bytes, read_checkpoint, write_checkpoint};

fn main() -> blendnet::Result<()> {
    let cfg = RunConfig::default();
    let det = Detector::new(cfg.detector_config(), cfg.model.init_seed)?;
    let dir = tempfile::tempdir().map_err(|e| blendnet::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &det.params)?;
    let bytes = checkpoint_bytes(&det.params);
    println!("{} records, {} bytes", det.params.len(), bytes.len());

    let back = Detector::from_params(cfg.detector_config(), read_checkpoint(&path)?)?;
    println!("reloaded bitwise identical: {}", checkpoint_bytes(&back.params) == bytes);

    let mut other = cfg.clone();
    other.blend.order = BlendOrder::ScmOnly;
    other.blend.t_train = 1;
    other.blend.t_test = 1;
    let shrunk = Detector::new(other.detector_config(), 0)?;
    match Detector::from_params(cfg.detector_config(), shrunk.params) {
        Ok(_) => println!("unexpectedly accepted a mismatched checkpoint"),
        Err(e) => println!("mismatched checkpoint refused: {e}"),
    }
    Ok(())
}
