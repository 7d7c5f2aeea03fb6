//! Experiment configuration: flat `key = value` lines under `[section]`
//! headers. [`RunConfig::to_text`] output reparses to an identical value.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::blend::{BlendConfig, BlendOrder, EmbeddingStrategy, InsertionPoint};
use crate::detector::{AnchorSpec, DetectorConfig, LossConfig, TargetConfig, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::video::{FrameFormat, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BlendSettings {
    pub t_train: usize,
    pub t_test: usize,
    pub insertion_point: InsertionPoint,
    pub embedding: EmbeddingStrategy,
    pub reduction_ratio: usize,
    pub order: BlendOrder,
}

impl Default for BlendSettings {
    fn default() -> Self {
        let b = BlendConfig::default();
        Self {
            t_train: 5,
            t_test: 9,
            insertion_point: b.insertion_point,
            embedding: b.embedding,
            reduction_ratio: b.reduction_ratio,
            order: b.order,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub stage_channels: [usize; 5],
    pub bottleneck_channels: usize,
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub head_layers: usize,
    pub norm_groups: usize,
    pub num_classes: usize,
    pub prior_prob: f64,
    /// Shorter side after letterboxing.
    pub input_short: usize,
    pub anchor_sizes: [f64; NUM_LEVELS],
    pub anchor_scales: [f64; 3],
    pub anchor_ratios: [f64; 3],
    pub init_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = DetectorConfig::default();
        let a = AnchorSpec::for_input(128);
        Self {
            stage_channels: d.stage_channels,
            bottleneck_channels: d.bottleneck_channels,
            fpn_channels: d.fpn_channels,
            head_channels: d.head_channels,
            head_layers: d.head_layers,
            norm_groups: d.norm_groups,
            num_classes: d.num_classes,
            prior_prob: d.prior_prob,
            input_short: 128,
            anchor_sizes: a.base_sizes,
            anchor_scales: a.scales,
            anchor_ratios: a.ratios,
            init_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_iters: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    /// 1-based epochs from which another decay factor applies.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    /// Snippets per step (gradient accumulation).
    pub batch_snippets: usize,
    /// Centres drawn per clip and epoch; 0 visits every frame once.
    pub snippets_per_clip: usize,
    pub stride: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_grad_norm: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    pub augment: bool,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Optional checkpoint to start from.
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            seed: 7,
            epochs: 14,
            warmup_iters: 500,
            lr_start: 0.002,
            lr_peak: 0.01,
            decay_epochs: vec![6, 11],
            decay_factor: 0.1,
            momentum: 0.9,
            batch_snippets: 1,
            snippets_per_clip: 0,
            stride: 2,
            clip_grad_norm: 35.0,
            val_every: 1,
            augment: true,
            fg_iou: l.targets.fg_iou,
            bg_iou: l.targets.bg_iou,
            focal_alpha: l.focal_alpha,
            focal_gamma: l.focal_gamma,
            smooth_l1_beta: l.smooth_l1_beta,
            warm_start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub metrics: EvalConfig,
    pub stride: usize,
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metrics: EvalConfig::default(),
            stride: 1,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateSettings {
    pub axes: Vec<String>,
    pub t_train_values: Vec<usize>,
    pub t_test_values: Vec<usize>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            axes: Vec::new(),
            t_train_values: vec![1, 3, 5],
            t_test_values: vec![1, 5, 9],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSettings {
    pub dataset: PathBuf,
    pub out: PathBuf,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub frame_format: FrameFormat,
    pub blend: BlendSettings,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            frame_format: FrameFormat::Png,
            blend: BlendSettings::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            ablate: AblateSettings::default(),
            paths: PathSettings::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// The detector configuration used for training (bank size `t_train`).
    pub fn detector_config(&self) -> DetectorConfig {
        let m = &self.model;
        DetectorConfig {
            stage_channels: m.stage_channels,
            bottleneck_channels: m.bottleneck_channels,
            fpn_channels: m.fpn_channels,
            head_channels: m.head_channels,
            head_layers: m.head_layers,
            norm_groups: m.norm_groups,
            num_classes: m.num_classes,
            prior_prob: m.prior_prob,
            blend: BlendConfig {
                temporal_support: self.blend.t_train,
                insertion_point: self.blend.insertion_point,
                embedding: self.blend.embedding,
                reduction_ratio: self.blend.reduction_ratio,
                order: self.blend.order,
            },
        }
    }

    pub fn anchor_spec(&self) -> AnchorSpec {
        AnchorSpec {
            base_sizes: self.model.anchor_sizes,
            scales: self.model.anchor_scales,
            ratios: self.model.anchor_ratios,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let t = &self.train;
        LossConfig {
            targets: TargetConfig {
                fg_iou: t.fg_iou,
                bg_iou: t.bg_iou,
            },
            focal_alpha: t.focal_alpha,
            focal_gamma: t.focal_gamma,
            smooth_l1_beta: t.smooth_l1_beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.detector_config().validate()?;
        let bad = |m: String| Err(Error::invalid(m));
        if self.blend.t_test % 2 == 0 {
            return bad(format!("t_test must be odd, got {}", self.blend.t_test));
        }
        if self.model.input_short < crate::detector::MIN_INPUT_SIDE {
            return bad(format!("input_short {} below {}", self.model.input_short, crate::detector::MIN_INPUT_SIDE));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_snippets == 0 || t.stride == 0 || self.eval.stride == 0 {
            return bad("epochs, batch size and strides must be positive".into());
        }
        if !(t.lr_start >= 0.0 && t.lr_peak >= 0.0 && t.decay_factor > 0.0 && (0.0..1.0).contains(&t.momentum)) {
            return bad("learning-rate schedule values out of range".into());
        }
        if !(t.bg_iou <= t.fg_iou) {
            return bad(format!("bg_iou {} above fg_iou {}", t.bg_iou, t.fg_iou));
        }
        if self.eval.split != "train" && self.eval.split != "test" {
            return bad(format!("unknown split {:?}", self.eval.split));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let b = &self.blend;
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let em = &e.metrics;
        let a = &self.ablate;
        let warm = t.warm_start.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        format!(
            "[synth]
seed = {}
num_clips = {}
test_clips = {}
frames_per_clip = {}
width = {}
height = {}
min_objects = {}
max_objects = {}
min_object_size = {}
max_object_size = {}
max_speed = {}
occluder_density = {}
min_occluder_width = {}
max_occluder_width = {}
lighting_jitter = {}
camouflage_contrast = {}
frame_format = {}

[blend]
t_train = {}
t_test = {}
insertion_point = {}
embedding_strategy = {}
reduction_ratio = {}
order = {}

[model]
stage_channels = {}
bottleneck_channels = {}
fpn_channels = {}
head_channels = {}
head_layers = {}
norm_groups = {}
num_classes = {}
prior_prob = {}
input_short = {}
anchor_sizes = {}
anchor_scales = {}
anchor_ratios = {}
init_seed = {}

[train]
seed = {}
epochs = {}
warmup_iters = {}
lr_start = {}
lr_peak = {}
decay_epochs = {}
decay_factor = {}
momentum = {}
batch_snippets = {}
snippets_per_clip = {}
stride = {}
clip_grad_norm = {}
val_every = {}
augment = {}
fg_iou = {}
bg_iou = {}
focal_alpha = {}
focal_gamma = {}
smooth_l1_beta = {}
warm_start = {}

[eval]
split = {}
stride = {}
iou_thresh = {}
nms_iou = {}
score_floor = {}
max_detections = {}
pre_nms_top_k = {}
recall_score_thresh = {}

[ablate]
axes = {}
t_train_values = {}
t_test_values = {}

[paths]
dataset = {}
out = {}
",
            s.seed,
            s.num_clips,
            s.test_clips,
            s.frames_per_clip,
            s.width,
            s.height,
            s.min_objects,
            s.max_objects,
            s.min_object_size,
            s.max_object_size,
            s.max_speed,
            s.occluder_density,
            s.min_occluder_width,
            s.max_occluder_width,
            s.lighting_jitter,
            s.camouflage_contrast,
            self.frame_format,
            b.t_train,
            b.t_test,
            b.insertion_point,
            b.embedding,
            b.reduction_ratio,
            b.order,
            list(&m.stage_channels),
            m.bottleneck_channels,
            m.fpn_channels,
            m.head_channels,
            m.head_layers,
            m.norm_groups,
            m.num_classes,
            m.prior_prob,
            m.input_short,
            list(&m.anchor_sizes),
            list(&m.anchor_scales),
            list(&m.anchor_ratios),
            m.init_seed,
            t.seed,
            t.epochs,
            t.warmup_iters,
            t.lr_start,
            t.lr_peak,
            list(&t.decay_epochs),
            t.decay_factor,
            t.momentum,
            t.batch_snippets,
            t.snippets_per_clip,
            t.stride,
            t.clip_grad_norm,
            t.val_every,
            t.augment,
            t.fg_iou,
            t.bg_iou,
            t.focal_alpha,
            t.focal_gamma,
            t.smooth_l1_beta,
            warm,
            e.split,
            e.stride,
            em.iou_thresh,
            em.nms_iou,
            em.score_floor,
            em.max_detections,
            em.pre_nms_top_k,
            em.recall_score_thresh,
            a.axes.join(", "),
            list(&a.t_train_values),
            list(&a.t_test_values),
            self.paths.dataset.display(),
            self.paths.out.display(),
        )
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Parses a config; keys not mentioned keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            cfg.set(&section, key, value).map_err(|e| err(format!("[{section}] {key}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        let b = &mut self.blend;
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        let a = &mut self.ablate;
        match (section, key) {
            ("synth", "seed") => s.seed = val(v)?,
            ("synth", "num_clips") => s.num_clips = val(v)?,
            ("synth", "test_clips") => s.test_clips = val(v)?,
            ("synth", "frames_per_clip") => s.frames_per_clip = val(v)?,
            ("synth", "width") => s.width = val(v)?,
            ("synth", "height") => s.height = val(v)?,
            ("synth", "min_objects") => s.min_objects = val(v)?,
            ("synth", "max_objects") => s.max_objects = val(v)?,
            ("synth", "min_object_size") => s.min_object_size = val(v)?,
            ("synth", "max_object_size") => s.max_object_size = val(v)?,
            ("synth", "max_speed") => s.max_speed = val(v)?,
            ("synth", "occluder_density") => s.occluder_density = val(v)?,
            ("synth", "min_occluder_width") => s.min_occluder_width = val(v)?,
            ("synth", "max_occluder_width") => s.max_occluder_width = val(v)?,
            ("synth", "lighting_jitter") => s.lighting_jitter = val(v)?,
            ("synth", "camouflage_contrast") => s.camouflage_contrast = val(v)?,
            ("synth", "frame_format") => self.frame_format = v.parse().map_err(|e: Error| e.to_string())?,
            ("blend", "t_train") => b.t_train = val(v)?,
            ("blend", "t_test") => b.t_test = val(v)?,
            ("blend", "insertion_point") => b.insertion_point = val(v)?,
            ("blend", "embedding_strategy") => b.embedding = val(v)?,
            ("blend", "reduction_ratio") => b.reduction_ratio = val(v)?,
            ("blend", "order") => b.order = val(v)?,
            ("model", "stage_channels") => m.stage_channels = array(v)?,
            ("model", "bottleneck_channels") => m.bottleneck_channels = val(v)?,
            ("model", "fpn_channels") => m.fpn_channels = val(v)?,
            ("model", "head_channels") => m.head_channels = val(v)?,
            ("model", "head_layers") => m.head_layers = val(v)?,
            ("model", "norm_groups") => m.norm_groups = val(v)?,
            ("model", "num_classes") => m.num_classes = val(v)?,
            ("model", "prior_prob") => m.prior_prob = val(v)?,
            ("model", "input_short") => m.input_short = val(v)?,
            ("model", "anchor_sizes") => m.anchor_sizes = array(v)?,
            ("model", "anchor_scales") => m.anchor_scales = array(v)?,
            ("model", "anchor_ratios") => m.anchor_ratios = array(v)?,
            ("model", "init_seed") => m.init_seed = val(v)?,
            ("train", "seed") => t.seed = val(v)?,
            ("train", "epochs") => t.epochs = val(v)?,
            ("train", "warmup_iters") => t.warmup_iters = val(v)?,
            ("train", "lr_start") => t.lr_start = val(v)?,
            ("train", "lr_peak") => t.lr_peak = val(v)?,
            ("train", "decay_epochs") => t.decay_epochs = vals(v)?,
            ("train", "decay_factor") => t.decay_factor = val(v)?,
            ("train", "momentum") => t.momentum = val(v)?,
            ("train", "batch_snippets") => t.batch_snippets = val(v)?,
            ("train", "snippets_per_clip") => t.snippets_per_clip = val(v)?,
            ("train", "stride") => t.stride = val(v)?,
            ("train", "clip_grad_norm") => t.clip_grad_norm = val(v)?,
            ("train", "val_every") => t.val_every = val(v)?,
            ("train", "augment") => t.augment = val(v)?,
            ("train", "fg_iou") => t.fg_iou = val(v)?,
            ("train", "bg_iou") => t.bg_iou = val(v)?,
            ("train", "focal_alpha") => t.focal_alpha = val(v)?,
            ("train", "focal_gamma") => t.focal_gamma = val(v)?,
            ("train", "smooth_l1_beta") => t.smooth_l1_beta = val(v)?,
            ("train", "warm_start") => t.warm_start = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("eval", "split") => e.split = v.to_string(),
            ("eval", "stride") => e.stride = val(v)?,
            ("eval", "iou_thresh") => e.metrics.iou_thresh = val(v)?,
            ("eval", "nms_iou") => e.metrics.nms_iou = val(v)?,
            ("eval", "score_floor") => e.metrics.score_floor = val(v)?,
            ("eval", "max_detections") => e.metrics.max_detections = val(v)?,
            ("eval", "pre_nms_top_k") => e.metrics.pre_nms_top_k = val(v)?,
            ("eval", "recall_score_thresh") => e.metrics.recall_score_thresh = val(v)?,
            ("ablate", "axes") => a.axes = vals(v)?,
            ("ablate", "t_train_values") => a.t_train_values = vals(v)?,
            ("ablate", "t_test_values") => a.t_test_values = vals(v)?,
            ("paths", "dataset") => self.paths.dataset = PathBuf::from(v),
            ("paths", "out") => self.paths.out = PathBuf::from(v),
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }
}

fn val<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn vals<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(val).collect()
}

fn array<T: FromStr, const N: usize>(v: &str) -> std::result::Result<[T; N], String>
where
    T::Err: Display,
{
    let items: Vec<T> = vals(v)?;
    let n = items.len();
    items.try_into().map_err(|_| format!("expected {N} values, found {n}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_echo_reparses_identically() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("c.txt")).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn awkward_values_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_peak = 0.1 + 0.2;
        cfg.train.decay_epochs = vec![];
        cfg.ablate.axes = vec!["order".into(), "T_test".into()];
        cfg.train.warm_start = Some(PathBuf::from("runs/pre/final.ckpt"));
        cfg.blend.embedding = EmbeddingStrategy::Positional;
        let back = RunConfig::parse(&cfg.to_text(), Path::new("c.txt")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn errors_carry_location() {
        let e = RunConfig::parse("[train]\nepochs = 3\nbogus = 1\n", Path::new("c.txt")).unwrap_err();
        assert!(e.to_string().starts_with("c.txt:3"), "{e}");
        let e = RunConfig::parse("[blend]\norder = sideways\n", Path::new("c.txt")).unwrap_err();
        assert!(e.to_string().contains("tcm_then_scm"), "{e}");
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg = RunConfig::parse("[train]\nepochs = 2 # short\n", Path::new("c.txt")).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr_peak, 0.01);
    }
}
