//! Small feature-pyramid detector with temporal/spatial blending in the
//! last backbone block.

pub mod anchors;
mod network;
mod predict;
pub mod targets;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use anchors::{generate_anchors, level_shapes, Anchor, AnchorLevel, AnchorSet, AnchorSpec, LEVEL_STRIDES, NUM_LEVELS};
pub use network::{FrameOutput, HeadLevel, LossParts, Stem, StemValues};
pub use predict::{decode_detections, RawDetection};
pub use targets::{
    assign_targets, decode, encode, level_targets, AnchorLabel, DetectionTargets, LevelTargets, TargetConfig,
};

use crate::blend::{BlendConfig, InsertionPoint, ScmWeights, TcmWeights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Smallest frame side the pyramid supports.
pub const MIN_INPUT_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Output channels of the five backbone stages.
    pub stage_channels: [usize; 5],
    /// Inner width of the final residual block.
    pub bottleneck_channels: usize,
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub head_layers: usize,
    /// Group count of the normalisation after every backbone and hidden head
    /// convolution; 0 leaves the network unnormalised.
    pub norm_groups: usize,
    pub num_classes: usize,
    /// Initial foreground probability of the classifier.
    pub prior_prob: f64,
    pub blend: BlendConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128, 128],
            bottleneck_channels: 32,
            fpn_channels: 64,
            head_channels: 64,
            head_layers: 4,
            norm_groups: 8,
            num_classes: 1,
            prior_prob: 0.01,
            blend: BlendConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// Channels of the feature map at the configured insertion site.
    pub fn site_channels(&self) -> usize {
        match self.blend.insertion_point {
            InsertionPoint::After3x3 => self.bottleneck_channels,
            InsertionPoint::After1x1 | InsertionPoint::AfterAdd => self.stage_channels[4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0)
            || self.bottleneck_channels == 0
            || self.fpn_channels == 0
            || self.head_channels == 0
            || self.num_classes == 0
        {
            return Err(Error::invalid("detector widths must be positive"));
        }
        let normalised = self.stage_channels.iter().chain([&self.bottleneck_channels, &self.head_channels]);
        if let Some(c) = normalised.filter(|_| self.norm_groups > 0).find(|&&c| c % self.norm_groups != 0) {
            return Err(Error::invalid(format!("{} norm groups do not divide {c} channels", self.norm_groups)));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::invalid(format!("prior probability {} outside (0, 1)", self.prior_prob)));
        }
        self.blend.validate(self.site_channels())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub targets: TargetConfig,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            targets: TargetConfig::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    Normal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, c_out: usize, c_in: usize, k: usize, init: Init, bias: f64) {
    let shape = if k == 1 { vec![c_out, c_in] } else { vec![c_out, c_in, k, k] };
    out.push(ParamSpec { name: format!("{name}.w"), shape, init });
    out.push(ParamSpec { name: format!("{name}.b"), shape: vec![c_out], init: Init::Const(bias) });
}

fn norm_specs(out: &mut Vec<ParamSpec>, cfg: &DetectorConfig, conv: &str, c: usize) {
    if cfg.norm_groups > 0 {
        out.push(ParamSpec { name: format!("{conv}.gn.g"), shape: vec![c], init: Init::Const(1.0) });
        out.push(ParamSpec { name: format!("{conv}.gn.b"), shape: vec![c], init: Init::Const(0.0) });
    }
}

/// Every non-blend parameter of the detector with its shape, in
/// initialisation order.
pub fn param_specs(cfg: &DetectorConfig) -> Vec<ParamSpec> {
    let s = cfg.stage_channels;
    let f = cfg.fpn_channels;
    let hc = cfg.head_channels;
    let a = 9;
    let mut out = Vec::new();
    let mut c_in = 3;
    for (i, &c) in s.iter().take(4).enumerate() {
        conv_specs(&mut out, &format!("backbone.s{}", i + 1), c, c_in, 3, Init::He, 0.0);
        c_in = c;
    }
    conv_specs(&mut out, "backbone.s5.down", s[4], s[3], 3, Init::He, 0.0);
    conv_specs(&mut out, "backbone.s5.reduce", cfg.bottleneck_channels, s[4], 1, Init::He, 0.0);
    conv_specs(&mut out, "backbone.s5.mid", cfg.bottleneck_channels, cfg.bottleneck_channels, 3, Init::He, 0.0);
    conv_specs(&mut out, "backbone.s5.expand", s[4], cfg.bottleneck_channels, 1, Init::He, 0.0);
    for (name, c) in [
        ("backbone.s1", s[0]),
        ("backbone.s2", s[1]),
        ("backbone.s3", s[2]),
        ("backbone.s4", s[3]),
        ("backbone.s5.down", s[4]),
        ("backbone.s5.reduce", cfg.bottleneck_channels),
        ("backbone.s5.mid", cfg.bottleneck_channels),
        ("backbone.s5.expand", s[4]),
    ] {
        norm_specs(&mut out, cfg, name, c);
    }
    conv_specs(&mut out, "fpn.lat3", f, s[2], 1, Init::He, 0.0);
    conv_specs(&mut out, "fpn.lat4", f, s[3], 1, Init::He, 0.0);
    conv_specs(&mut out, "fpn.lat5", f, s[4], 1, Init::He, 0.0);
    for l in 3..=5 {
        conv_specs(&mut out, &format!("fpn.out{l}"), f, f, 3, Init::He, 0.0);
    }
    conv_specs(&mut out, "fpn.p6", f, s[4], 3, Init::He, 0.0);
    conv_specs(&mut out, "fpn.p7", f, f, 3, Init::He, 0.0);
    let prior_bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    for (tower, outputs, bias) in [("cls", a * cfg.num_classes, prior_bias), ("box", a * 4, 0.0)] {
        let mut c_in = f;
        for i in 0..cfg.head_layers {
            conv_specs(&mut out, &format!("head.{tower}.{i}"), hc, c_in, 3, Init::He, 0.0);
            norm_specs(&mut out, cfg, &format!("head.{tower}.{i}"), hc);
            c_in = hc;
        }
        conv_specs(&mut out, &format!("head.{tower}.out"), outputs, c_in, 3, Init::Normal(0.01), bias);
    }
    out
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    match spec.init {
        Init::Const(v) => Tensor::full(spec.shape.clone(), v),
        Init::Normal(std) => Tensor::randn(spec.shape.clone(), std, rng),
        Init::He => {
            let fan_in: usize = spec.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let n: usize = spec.shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(spec.shape.clone(), data).expect("shape matches data")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
}

impl Detector {
    /// Freshly initialised weights; identical seeds give identical weights.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let t = init_tensor(&spec, &mut rng);
            params.insert(spec.name, t);
        }
        let c = config.site_channels();
        if config.blend.order.uses_scm() {
            ScmWeights::init(c, config.blend.reduction_ratio, &mut rng)?.store("scm", &mut params);
        }
        if config.blend.order.uses_tcm() {
            TcmWeights::init(c, config.blend.temporal_support, &mut rng)?.store("tcm", &mut params);
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded weights after checking them record by record against
    /// the shapes `config` implies.
    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        let template = Detector::new(config.clone(), 0)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing record {name:?} (expected shape {:?})", t.shape())))
                }
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "record {name:?} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !template.params.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected record {extra:?} for this config")));
        }
        Ok(Self { config, params })
    }

    pub fn scm_weights(&self) -> Result<Option<ScmWeights>> {
        if !self.config.blend.order.uses_scm() {
            return Ok(None);
        }
        ScmWeights::load("scm", &self.params).map(Some)
    }

    pub fn tcm_weights(&self) -> Result<Option<TcmWeights>> {
        if !self.config.blend.order.uses_tcm() {
            return Ok(None);
        }
        TcmWeights::load("tcm", &self.params).map(Some)
    }

    /// Zeroes the residual transforms of both blend modules (`w3`, `w5`,
    /// `w6`), turning them into identity maps.
    pub fn zero_blend_transforms(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| *n == "scm.w3" || n.starts_with("tcm.w5.") || n.starts_with("tcm.w6."))
            .map(str::to_string)
            .collect();
        for n in names {
            if let Some(t) = self.params.get_mut(&n) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Maps a `[C,H,W]` image in `[0, 1]` to the network input range.
    pub fn normalize_frame(frame: &Tensor) -> Tensor {
        frame.map(|v| (v - 0.5) / 0.25)
    }
}

/// Lazily registers parameters as graph leaves, once per graph.
pub struct Binder<'p> {
    params: &'p ParamStore,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            params,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))?
            .clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient of every parameter; unbound or unreached ones get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = match self.bound.get(name) {
                    Some(&v) => g.grad_or_zeros(v),
                    None => Tensor::zeros(t.shape().to_vec()),
                };
                (name.to_string(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::BlendOrder;

    #[test]
    fn same_seed_same_weights() {
        let a = Detector::new(DetectorConfig::default(), 3).unwrap();
        let b = Detector::new(DetectorConfig::default(), 3).unwrap();
        let c = Detector::new(DetectorConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn blend_params_follow_order() {
        let mut cfg = DetectorConfig::default();
        cfg.blend.order = BlendOrder::None;
        let d = Detector::new(cfg.clone(), 0).unwrap();
        assert!(!d.params.names().any(|n| n.starts_with("scm") || n.starts_with("tcm")));
        cfg.blend.order = BlendOrder::TcmOnly;
        cfg.blend.temporal_support = 3;
        let d = Detector::new(cfg, 0).unwrap();
        assert!(d.params.contains("tcm.w4.-1") && !d.params.contains("scm.w1"));
    }

    #[test]
    fn mismatched_record_is_named() {
        let d = Detector::new(DetectorConfig::default(), 0).unwrap();
        let mut cfg = DetectorConfig::default();
        cfg.head_channels = 32;
        let err = Detector::from_params(cfg, d.params.clone()).unwrap_err().to_string();
        assert!(err.contains("\"head.box.0."), "{err}");
        assert!(Detector::from_params(DetectorConfig::default(), d.params).is_ok());
    }

    #[test]
    fn bad_blend_config_rejected() {
        let mut cfg = DetectorConfig::default();
        cfg.blend.reduction_ratio = 3;
        assert!(Detector::new(cfg, 0).is_err());
    }
}
