//! Training loop.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::evaluate::evaluate;
use super::manifest::{EpochRecord, ManifestWriter};
use super::schedule::LrSchedule;
use crate::config::RunConfig;
use crate::detector::{assign_targets, generate_anchors, level_targets, AnchorSet, Binder, Detector};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{clip_grad_norm, read_checkpoint, write_checkpoint, Graph, Sgd, Tensor};
use crate::video::{augment, resize_letterbox, sample_snippet, Dataset, Snippet, VideoClip};

/// Samples the training snippet centred on frame `t`, augments it when
/// `aug_seed` is given and letterboxes every frame.
pub fn prepare_snippet(clip: &VideoClip, t: usize, cfg: &RunConfig, support: usize, aug_seed: Option<u64>) -> Result<Snippet> {
    let raw = sample_snippet(clip, t, support, cfg.train.stride)?;
    let mut s = match aug_seed {
        Some(seed) => augment(&raw, seed),
        None => raw,
    };
    for (frame, anns) in s.frames.iter_mut().zip(s.annotations.iter_mut()) {
        let boxes: Vec<_> = anns.iter().map(|a| a.bbox).collect();
        let (f, b, _) = resize_letterbox(frame, &boxes, cfg.model.input_short);
        *frame = f;
        for (a, nb) in anns.iter_mut().zip(b) {
            a.bbox = nb;
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
}

/// Loss on the snippet's main frame and the gradient of every parameter.
pub fn snippet_loss(
    det: &Detector,
    snippet: &Snippet,
    anchors: &AnchorSet,
    cfg: &RunConfig,
) -> Result<(StepLoss, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&det.params, true);
    let main = snippet.main();
    let frames: Vec<usize> = if det.uses_window() { (0..snippet.frames.len()).collect() } else { vec![main] };
    let mut stems = Vec::with_capacity(frames.len());
    for &i in &frames {
        let x = g.constant(Detector::normalize_frame(&snippet.frames[i]));
        stems.push(det.stem(&mut g, &mut b, x)?);
    }
    let local_main = frames.iter().position(|&i| i == main).expect("main frame sampled");
    let out = det.detect(&mut g, &mut b, &stems, local_main)?;
    let gts: Vec<_> = snippet.annotations[main].iter().map(|a| (a.bbox, a.class)).collect();
    let loss_cfg = cfg.loss_config();
    let targets = assign_targets(anchors, &gts, &loss_cfg.targets);
    let levels = level_targets(anchors, &targets, det.config.num_classes);
    let parts = det.loss(&mut g, &out, &levels, targets.num_foreground(), &loss_cfg)?;
    let value = |v| g.value(v).data()[0];
    let loss = StepLoss {
        total: value(parts.total),
        cls: value(parts.cls),
        boxes: value(parts.boxes),
    };
    if !loss.total.is_finite() {
        return Ok((loss, BTreeMap::new()));
    }
    g.backward(parts.total)?;
    Ok((loss, b.grads(&g)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every iteration.
    pub lr_trace: Vec<f64>,
    /// Loss of every iteration (mean over the accumulated snippets).
    pub losses: Vec<f64>,
}

/// Initial weights: fresh, or a warm start overlaying every checkpoint
/// record whose name and shape match.
pub fn initial_detector(cfg: &RunConfig) -> Result<Detector> {
    let mut det = Detector::new(cfg.detector_config(), cfg.model.init_seed)?;
    if let Some(path) = &cfg.train.warm_start {
        let loaded = read_checkpoint(path)?;
        let mut reused = 0;
        let names: Vec<String> = det.params.names().map(str::to_string).collect();
        for name in names {
            if let (Some(src), Some(dst)) = (loaded.get(&name), det.params.get_mut(&name)) {
                if src.shape() == dst.shape() {
                    *dst = src.clone();
                    reused += 1;
                }
            }
        }
        log::info!("warm start from {}: reused {reused}/{} records", path.display(), det.params.len());
    }
    Ok(det)
}

/// `(clip, centre)` visits of one epoch, in training order.
pub fn epoch_plan(train: &[VideoClip], cfg: &RunConfig, epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = rng_for(cfg.train.seed, epoch as u64);
    let mut plan = Vec::new();
    for (ci, clip) in train.iter().enumerate() {
        if clip.is_empty() {
            continue;
        }
        if cfg.train.snippets_per_clip == 0 {
            plan.extend((0..clip.len()).map(|t| (ci, t)));
        } else {
            for _ in 0..cfg.train.snippets_per_clip {
                plan.push((ci, rng.random_range(0..clip.len())));
            }
        }
    }
    plan.shuffle(&mut rng);
    plan
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:02}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite_dump.txt";

fn anchors_for<'a>(cache: &'a mut HashMap<(usize, usize), AnchorSet>, s: &Snippet, cfg: &RunConfig) -> &'a AnchorSet {
    let (w, h) = s.size();
    cache
        .entry((w, h))
        .or_insert_with(|| generate_anchors(w, h, &cfg.anchor_spec()))
}

/// Trains on `ds.train`. With `out`, writes per-epoch checkpoints, the
/// manifest and timings there.
pub fn train(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::invalid("training split has no clips"));
    }
    let mut det = initial_detector(cfg)?;
    let schedule = LrSchedule::from_settings(&cfg.train);
    let mut sgd = Sgd::new(&det.params, cfg.train.momentum);
    let mut manifest = match out {
        Some(dir) => Some(ManifestWriter::create(dir, &cfg.hash(), &ds.hash)?),
        None => None,
    };
    let support = if det.uses_window() { cfg.blend.t_train } else { 1 };
    let mut anchors = HashMap::new();
    let mut lr_trace = Vec::new();
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut iteration = 0usize;
    for epoch in 1..=cfg.train.epochs {
        let started = Instant::now();
        let plan = epoch_plan(&ds.train, cfg, epoch);
        let epoch_seed = derive_seed(cfg.train.seed, 1_000_000 + epoch as u64);
        let first_iter = lr_trace.len();
        let mut epoch_loss = 0.0;
        for batch in plan.chunks(cfg.train.batch_snippets) {
            let lr = schedule.lr(iteration, epoch);
            let mut acc: Option<BTreeMap<String, Tensor>> = None;
            let mut batch_loss = 0.0;
            for (k, &(ci, t)) in batch.iter().enumerate() {
                let aug_seed = derive_seed(epoch_seed, (iteration * cfg.train.batch_snippets + k) as u64);
                let clip = &ds.train[ci];
                let s = prepare_snippet(clip, t, cfg, support, cfg.train.augment.then_some(aug_seed))?;
                let anchor_set = anchors_for(&mut anchors, &s, cfg);
                let (loss, grads) = snippet_loss(&det, &s, anchor_set, cfg)?;
                if !loss.total.is_finite() {
                    let err = Error::NonFiniteLoss {
                        epoch,
                        iteration,
                        clip: clip.id.clone(),
                        frame: t,
                        seed: aug_seed,
                    };
                    if let Some(dir) = out {
                        let dump = format!(
                            "{err}\ncls_loss = {}\nbox_loss = {}\nlr = {lr}\nsnippet_frames = {:?}\n",
                            loss.cls, loss.boxes, s.indices
                        );
                        let p = dir.join(NONFINITE_DUMP);
                        std::fs::write(&p, dump).map_err(|e| Error::io(&p, e))?;
                    }
                    return Err(err);
                }
                batch_loss += loss.total;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (name, g) in grads {
                            let dst = a.get_mut(&name).expect("same parameter set");
                            dst.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let n = batch.len() as f64;
            if n > 1.0 {
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v /= n);
                }
            }
            if cfg.train.clip_grad_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.train.clip_grad_norm);
            }
            sgd.step(&mut det.params, &grads, lr);
            lr_trace.push(lr);
            losses.push(batch_loss / n);
            epoch_loss += batch_loss / n;
            iteration += 1;
        }
        let steps = lr_trace.len() - first_iter;
        let mean_loss = epoch_loss / steps.max(1) as f64;
        let val_map = if cfg.train.val_every > 0 && epoch % cfg.train.val_every == 0 && !ds.test.is_empty() {
            Some(evaluate(&det, &ds.test, cfg)?.map.map)
        } else {
            None
        };
        let checkpoint = match out {
            Some(dir) => {
                let name = checkpoint_name(epoch);
                write_checkpoint(&dir.join(&name), &det.params)?;
                Some(name)
            }
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            mean_loss,
            val_map,
            checkpoint,
        };
        log::info!(
            "epoch {epoch}/{}: loss {mean_loss:.5}, val mAP {}, {:.1}s",
            cfg.train.epochs,
            val_map.map_or("n/a".to_string(), |m| format!("{:.4}", m)),
            started.elapsed().as_secs_f64()
        );
        if let Some(m) = manifest.as_mut() {
            m.append_epoch(&rec, first_iter, &lr_trace[first_iter..], started.elapsed().as_secs_f64())?;
        }
        epochs.push(rec);
    }
    if let Some(dir) = out {
        write_checkpoint(&dir.join(FINAL_CHECKPOINT), &det.params)?;
    }
    Ok(TrainOutcome {
        detector: det,
        epochs,
        lr_trace,
        losses,
    })
}

/// Plain SGD on one fixed, unaugmented snippet; returns the loss before
/// every step and after the last one.
pub fn overfit_snippet(det: &mut Detector, snippet: &Snippet, cfg: &RunConfig, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let (w, h) = snippet.size();
    let anchors = generate_anchors(w, h, &cfg.anchor_spec());
    let mut sgd = Sgd::new(&det.params, cfg.train.momentum);
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, mut grads) = snippet_loss(det, snippet, &anchors, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::invalid(format!("overfit loss diverged at step {}", trace.len())));
        }
        trace.push(loss.total);
        if cfg.train.clip_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.train.clip_grad_norm);
        }
        sgd.step(&mut det.params, &grads, lr);
    }
    trace.push(snippet_loss(det, snippet, &anchors, cfg)?.0.total);
    Ok(trace)
}
