//! Memorises a single snippet, then evaluates on the clip it came from.
//!
//! Run with `cargo run --example overfit_snippet`.

use blendnet::config::RunConfig;
use blendnet::detector::Detector;
use blendnet::run::{evaluate, overfit_snippet, prepare_snippet};
use blendnet::video::generate_clip;

fn main() -> blendnet::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.synth.frames_per_clip = 3;
    cfg.blend.t_train = 3;
    cfg.blend.t_test = 3;
    cfg.train.stride = 1;
    let clip = generate_clip(&cfg.synth, 0)?;
    let snippet = prepare_snippet(&clip, 1, &cfg, cfg.blend.t_train, None)?;
    let mut det = Detector::new(cfg.detector_config(), cfg.model.init_seed)?;
    let losses = overfit_snippet(&mut det, &snippet, &cfg, 200, 0.01)?;
    let (first, last) = (losses[0], *losses.last().unwrap());
    println!("loss {first:.4} -> {last:.4} ({:.1}% reduction)", 100.0 * (1.0 - last / first));
    let outcome = evaluate(&det, std::slice::from_ref(&clip), &cfg)?;
    println!("mAP on the memorised clip: {:.4}", outcome.map.map);
    Ok(())
}
