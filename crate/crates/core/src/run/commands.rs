//! Implementations behind the `blendnet` subcommands. Each command echoes
//! its effective configuration into its output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;

use super::evaluate::{clip_stems, detect_center, effective_t_test, evaluate, occluded_recall, EvalOutcome};
use super::train::{train, TrainOutcome, FINAL_CHECKPOINT};
use crate::blend::{BlendOrder, EmbeddingStrategy, InsertionPoint};
use crate::config::RunConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{
    fmt_percent, project_attention, render_frame, write_results, PrCurve, Table, GROUND_TRUTH_COLOR, PREDICTION_COLOR,
};
use crate::tensor::read_checkpoint;
use crate::video::{generate_synthetic, load_dataset, write_dataset, Dataset, VideoClip};

pub const CONFIG_ECHO: &str = "config.txt";

/// Axis names accepted by [`cmd_ablate`].
pub const ABLATION_AXES: [&str; 5] = ["insertion_point", "embedding_strategy", "T_train", "T_test", "order"];

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (use --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the synthetic benchmark into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<Dataset> {
    cfg.synth.validate()?;
    prepare_out_dir(out, force)?;
    let clips = generate_synthetic(&cfg.synth)?;
    let ds = Dataset::from_clips(clips, cfg.synth.test_clips);
    write_dataset(out, &ds, cfg.frame_format, cfg.synth.seed)?;
    echo_config(cfg, out)?;
    log::info!(
        "wrote {} train and {} test clips to {} (hash {})",
        ds.train.len(),
        ds.test.len(),
        out.display(),
        ds.hash
    );
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.paths.dataset)?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    train(cfg, &ds, Some(out))
}

/// Loads a checkpoint for the configured architecture.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<Detector> {
    let params = read_checkpoint(checkpoint)?;
    Detector::from_params(cfg.detector_config(), params)
}

/// Checkpoint used by `eval` and `visualize` when none is given.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join(FINAL_CHECKPOINT)
}

fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut text = String::from("rank,recall,precision\n");
    for (i, (r, p)) in curve.points.iter().enumerate() {
        text.push_str(&format!("{},{r},{p}\n", i + 1));
    }
    text
}

fn defined(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Writes results, PR curves and metric tables for an evaluation.
pub fn write_eval_report(outcome: &EvalOutcome, out: &Path) -> Result<String> {
    write_results(&out.join("results.txt"), &outcome.records)?;
    let mut map_table = Table::new(&["class", "AP(%)", "num_gt"]);
    for (class, curve) in &outcome.map.per_class {
        write_text(&out.join(format!("pr_curve_class{class}.csv")), &pr_curve_csv(curve))?;
        map_table.push(vec![class.to_string(), fmt_percent(defined(curve.ap)), curve.num_gt.to_string()]);
    }
    map_table.push(vec!["mAP".into(), fmt_percent(defined(outcome.map.map)), outcome.ground_truth.len().to_string()]);
    let mut strata = Table::new(&["visibility", "num_gt", "recalled", "recall(%)"]);
    for row in &outcome.strata {
        strata.push(vec![
            row.bin.label(),
            row.num_gt.to_string(),
            row.recalled.to_string(),
            fmt_percent(row.recall()),
        ]);
    }
    write_text(&out.join("map.txt"), &map_table.render_text())?;
    write_text(&out.join("map.csv"), &map_table.render_csv())?;
    write_text(&out.join("strata.txt"), &strata.render_text())?;
    write_text(&out.join("strata.csv"), &strata.render_csv())?;
    Ok(format!("{}\n{}", map_table.render_text(), strata.render_text()))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, force: bool) -> Result<EvalOutcome> {
    cfg.validate()?;
    let det = load_detector(cfg, checkpoint)?;
    let ds = load_dataset(&cfg.paths.dataset)?;
    let clips = ds.split(&cfg.eval.split)?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let outcome = evaluate(&det, clips, cfg)?;
    let report = write_eval_report(&outcome, out)?;
    log::info!("evaluation on {} split:\n{report}", cfg.eval.split);
    Ok(outcome)
}

/// One configuration of an ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationCase {
    /// `(axis, value)` for every swept axis.
    pub labels: Vec<(String, String)>,
    pub config: RunConfig,
}

/// Cross product of the requested axes around `base`. An empty axis list
/// yields the base configuration alone.
pub fn ablation_grid(base: &RunConfig, axes: &[String]) -> Result<Vec<AblationCase>> {
    let mut cases = vec![AblationCase {
        labels: Vec::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let values: Vec<(String, Box<dyn Fn(&mut RunConfig)>)> = match axis.as_str() {
            "insertion_point" => InsertionPoint::ALL
                .iter()
                .map(|&p| (p.to_string(), Box::new(move |c: &mut RunConfig| c.blend.insertion_point = p) as Box<_>))
                .collect(),
            "embedding_strategy" => EmbeddingStrategy::ALL
                .iter()
                .map(|&e| (e.to_string(), Box::new(move |c: &mut RunConfig| c.blend.embedding = e) as Box<_>))
                .collect(),
            "order" => BlendOrder::ALL
                .iter()
                .map(|&o| (o.to_string(), Box::new(move |c: &mut RunConfig| c.blend.order = o) as Box<_>))
                .collect(),
            "T_train" => base
                .ablate
                .t_train_values
                .iter()
                .map(|&t| (t.to_string(), Box::new(move |c: &mut RunConfig| c.blend.t_train = t) as Box<_>))
                .collect(),
            "T_test" => base
                .ablate
                .t_test_values
                .iter()
                .map(|&t| (t.to_string(), Box::new(move |c: &mut RunConfig| c.blend.t_test = t) as Box<_>))
                .collect(),
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation axis `{other}` (valid axes: {})",
                    ABLATION_AXES.join(", ")
                )))
            }
        };
        let mut next = Vec::with_capacity(cases.len() * values.len());
        for case in &cases {
            for (label, apply) in &values {
                let mut c = case.clone();
                apply(&mut c.config);
                c.labels.push((axis.clone(), label.clone()));
                next.push(c);
            }
        }
        cases = next;
    }
    for c in &cases {
        c.config.validate()?;
    }
    Ok(cases)
}

/// Identifies the trained model of a case: everything except `t_test`.
fn training_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.blend.t_test = c.blend.t_train;
    c.to_text()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub labels: Vec<(String, String)>,
    pub map: f64,
    pub occluded_recall: Option<f64>,
}

pub fn ablation_table(rows: &[AblationRow], axes: &[String]) -> Table {
    let mut headers: Vec<&str> = if axes.is_empty() { vec!["config"] } else { axes.iter().map(String::as_str).collect() };
    headers.extend(["mAP(%)", "recall vis<0.3 (%)"]);
    let mut table = Table::new(&headers);
    for r in rows {
        let mut cells: Vec<String> = if axes.is_empty() {
            vec!["baseline".into()]
        } else {
            r.labels.iter().map(|(_, v)| v.clone()).collect()
        };
        cells.push(fmt_percent(defined(r.map)));
        cells.push(fmt_percent(r.occluded_recall));
        table.push(cells);
    }
    table
}

/// Trains and evaluates every case of the sweep with the shared seeds.
/// Models differing only in `T_test` are trained once.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let cases = ablation_grid(cfg, &cfg.ablate.axes)?;
    let test = ds.split(&cfg.eval.split)?;
    let mut models: HashMap<String, Detector> = HashMap::new();
    let mut rows = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let key = training_key(&case.config);
        if !models.contains_key(&key) {
            let dir = match out {
                Some(o) => {
                    let d = o.join(format!("model_{:02}", models.len()));
                    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    echo_config(&case.config, &d)?;
                    Some(d)
                }
                None => None,
            };
            log::info!("ablation case {}/{}: training {:?}", i + 1, cases.len(), case.labels);
            let trained = train(&case.config, ds, dir.as_deref())?;
            models.insert(key.clone(), trained.detector);
        }
        let outcome = evaluate(&models[&key], test, &case.config)?;
        rows.push(AblationRow {
            labels: case.labels.clone(),
            map: outcome.map.map,
            occluded_recall: occluded_recall(&outcome.strata),
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Table> {
    // Validate axes before touching the disk.
    ablation_grid(cfg, &cfg.ablate.axes)?;
    let ds = load_dataset(&cfg.paths.dataset)?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let rows = run_ablation(cfg, &ds, Some(out))?;
    let table = ablation_table(&rows, &cfg.ablate.axes);
    write_text(&out.join("ablation.txt"), &table.render_text())?;
    write_text(&out.join("ablation.csv"), &table.render_csv())?;
    log::info!("ablation:\n{}", table.render_text());
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeOutput {
    pub attention_files: Vec<PathBuf>,
    /// Offsets whose map had no dynamic range.
    pub flat_offsets: Vec<isize>,
    pub frame_file: PathBuf,
}

pub fn attention_file_name(clip: &str, t: usize, offset: isize) -> String {
    format!("attn_{clip}_{t}_{offset}.png")
}

pub fn frame_file_name(clip: &str, t: usize) -> String {
    format!("frame_{clip}_{t}.png")
}

/// Writes the temporal attention map of every window slot, projected back
/// onto the source frame, plus the centre frame with predicted and ground
/// truth boxes.
pub fn visualize_clip(det: &Detector, clip: &VideoClip, t: usize, cfg: &RunConfig, out: &Path) -> Result<VisualizeOutput> {
    if !det.config.blend.order.uses_tcm() {
        return Err(Error::invalid(format!(
            "no attention to visualize: blend order {} has no temporal module",
            det.config.blend.order
        )));
    }
    if t >= clip.len() {
        return Err(Error::invalid(format!("frame {t} outside clip {} of {} frames", clip.id, clip.len())));
    }
    let (stems, lb) = clip_stems(det, clip, cfg.model.input_short)?;
    let res = detect_center(det, &stems, &lb, t, effective_t_test(det, cfg), cfg.eval.stride, cfg)?;
    let maps = res.attention.ok_or_else(|| Error::invalid("no attention to visualize"))?;
    let slots = maps.shape()[0];
    let centre = (slots / 2) as isize;
    let mut attention_files = Vec::with_capacity(slots);
    let mut flat_offsets = Vec::new();
    for slot in 0..slots {
        let offset = slot as isize - centre;
        let projected = project_attention(&maps.index0(slot), lb.out_w, lb.out_h)?;
        let full = GrayImage::from_raw(lb.out_w as u32, lb.out_h as u32, projected.pixels)
            .ok_or_else(|| Error::invalid("projected map size mismatch"))?;
        let content = imageops::crop_imm(&full, 0, 0, lb.content_w as u32, lb.content_h as u32).to_image();
        let img = if (lb.content_w, lb.content_h) == (clip.width, clip.height) {
            content
        } else {
            imageops::resize(&content, clip.width as u32, clip.height as u32, FilterType::Triangle)
        };
        let path = out.join(attention_file_name(&clip.id, t, offset));
        img.save(&path)?;
        if projected.flat {
            log::warn!("attention map at offset {offset} is flat (no dynamic range)");
            flat_offsets.push(offset);
        }
        attention_files.push(path);
    }
    let mut boxes: Vec<_> = clip.annotations[t].iter().map(|a| (a.bbox, GROUND_TRUTH_COLOR)).collect();
    boxes.extend(
        res.detections
            .iter()
            .filter(|d| d.score >= cfg.eval.metrics.recall_score_thresh)
            .map(|d| (d.bbox, PREDICTION_COLOR)),
    );
    let frame_file = out.join(frame_file_name(&clip.id, t));
    render_frame(&clip.frames[t], &boxes)?.save(&frame_file)?;
    Ok(VisualizeOutput {
        attention_files,
        flat_offsets,
        frame_file,
    })
}

pub fn find_clip<'a>(ds: &'a Dataset, id: &str) -> Result<&'a VideoClip> {
    ds.train
        .iter()
        .chain(&ds.test)
        .find(|c| c.id == id)
        .ok_or_else(|| Error::invalid(format!("no clip named {id:?} in the dataset")))
}

pub fn cmd_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    clip_id: &str,
    t: usize,
    out: &Path,
    force: bool,
) -> Result<VisualizeOutput> {
    if !cfg.blend.order.uses_tcm() {
        return Err(Error::invalid(format!(
            "no attention to visualize: blend order {} has no temporal module",
            cfg.blend.order
        )));
    }
    let det = load_detector(cfg, checkpoint)?;
    let ds = load_dataset(&cfg.paths.dataset)?;
    let clip = find_clip(&ds, clip_id)?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    visualize_clip(&det, clip, t, cfg, out)
}
