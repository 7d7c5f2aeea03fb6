//! Trains the single-frame baseline and the temporally blended detector
//! with shared seeds on the default synthetic benchmark and compares mAP
//! and recall of heavily occluded objects.
//!
//! Run with `cargo run --example compare_blending [-- <snippets_per_clip> <epochs>]`.

use std::time::Instant;

use blendnet::blend::BlendOrder;
use blendnet::config::RunConfig;
use blendnet::eval::fmt_percent;
use blendnet::run::{evaluate, occluded_recall, train};
use blendnet::video::{generate_synthetic, Dataset};

fn main() -> blendnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let mut base = RunConfig::default();
    base.train.snippets_per_clip = args.next().unwrap_or(10);
    base.train.epochs = args.next().unwrap_or(base.train.epochs);
    base.train.val_every = 0;
    let ds = Dataset::from_clips(generate_synthetic(&base.synth)?, base.synth.test_clips);

    let mut baseline = base.clone();
    baseline.blend.order = BlendOrder::None;
    baseline.blend.t_train = 1;
    baseline.blend.t_test = 1;

    for (name, cfg) in [("baseline T=1", &baseline), ("tcm+scm 5/9", &base)] {
        let started = Instant::now();
        let trained = train(cfg, &ds, None)?;
        let outcome = evaluate(&trained.detector, &ds.test, cfg)?;
        println!(
            "{name}: mAP {} recall vis<0.3 {} ({:.0}s)",
            fmt_percent(Some(outcome.map.map)),
            fmt_percent(occluded_recall(&outcome.strata)),
            started.elapsed().as_secs_f64()
        );
        if cfg.blend.t_test > 1 {
            let mut single = cfg.clone();
            single.blend.t_test = 1;
            let o = evaluate(&trained.detector, &ds.test, &single)?;
            println!("  same model at T_test=1: mAP {} recall vis<0.3 {}", fmt_percent(Some(o.map.map)), fmt_percent(occluded_recall(&o.strata)));
        }
        for row in &outcome.strata {
            println!("  {} {} / {}", row.bin.label(), row.recalled, row.num_gt);
        }
    }
    Ok(())
}
