//! Backbone, pyramid and head forward passes.

use super::targets::LevelTargets;
use super::{Binder, Detector, LossConfig, MIN_INPUT_SIDE, NUM_LEVELS};
use crate::blend::{blend_block, BlendOrder, BlendVars, InsertionPoint, ScmVars, TcmOutput, TcmVars, TcmWeights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Per-frame backbone activations up to the insertion site.
#[derive(Clone, Copy, Debug)]
pub struct Stem {
    pub c3: Var,
    pub c4: Var,
    /// Input of the final residual block (the skip branch).
    pub block_in: Var,
    /// Feature map at the configured insertion site.
    pub site: Var,
}

/// Detached copy of a [`Stem`], reusable across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct StemValues {
    pub c3: Tensor,
    pub c4: Tensor,
    pub block_in: Tensor,
    pub site: Tensor,
}

impl StemValues {
    pub fn capture(g: &Graph, s: &Stem) -> Self {
        Self {
            c3: g.value(s.c3).clone(),
            c4: g.value(s.c4).clone(),
            block_in: g.value(s.block_in).clone(),
            site: g.value(s.site).clone(),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> Stem {
        Stem {
            c3: g.constant(self.c3.clone()),
            c4: g.constant(self.c4.clone()),
            block_in: g.constant(self.block_in.clone()),
            site: g.constant(self.site.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadLevel {
    /// Class probabilities, channel `a·K + k`.
    pub cls: Var,
    /// Box deltas, channel `a·4 + j`.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub levels: Vec<HeadLevel>,
    pub pyramid: Vec<Var>,
    pub c5: Var,
    pub tcm: Option<TcmOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub boxes: Var,
}

impl Detector {
    fn conv(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = b.var(g, &format!("{name}.w"))?;
        let bias = b.var(g, &format!("{name}.b"))?;
        let y = if g.shape(w).len() == 2 {
            g.conv1x1(x, w)?
        } else {
            g.conv3x3(x, w, stride, 1)?
        };
        g.broadcast_add(y, bias)
    }

    /// Convolution followed by group normalisation when enabled.
    fn conv_norm(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv(g, b, x, name, stride)?;
        if self.config.norm_groups == 0 {
            return Ok(y);
        }
        self.group_norm(g, b, y, &format!("{name}.gn"))
    }

    fn conv_relu(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv_norm(g, b, x, name, stride)?;
        Ok(g.relu(y))
    }

    fn group_norm(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let gamma = b.var(g, &format!("{name}.g"))?;
        let beta = b.var(g, &format!("{name}.b"))?;
        let y = g.group_norm(x, self.config.norm_groups, NORM_EPS)?;
        let c = g.shape(gamma)[0];
        let gamma = g.reshape(gamma, [c, 1, 1])?;
        let y = g.mul(y, gamma)?;
        g.broadcast_add(y, beta)
    }

    /// Backbone of one normalised frame `[3,H,W]` up to the insertion site.
    pub fn stem(&self, g: &mut Graph, b: &mut Binder, frame: Var) -> Result<Stem> {
        let shape = g.shape(frame).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::invalid(format!("frames must be [3,H,W], got {shape:?}")));
        }
        if shape[1] < MIN_INPUT_SIDE || shape[2] < MIN_INPUT_SIDE {
            return Err(Error::invalid(format!(
                "frame {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                shape[2], shape[1]
            )));
        }
        let x = self.conv_relu(g, b, frame, "backbone.s1", 2)?;
        let x = self.conv_relu(g, b, x, "backbone.s2", 2)?;
        let c3 = self.conv_relu(g, b, x, "backbone.s3", 2)?;
        let c4 = self.conv_relu(g, b, c3, "backbone.s4", 2)?;
        let block_in = self.conv_relu(g, b, c4, "backbone.s5.down", 2)?;
        let h = self.conv_relu(g, b, block_in, "backbone.s5.reduce", 1)?;
        let h = self.conv_relu(g, b, h, "backbone.s5.mid", 1)?;
        let site = match self.config.blend.insertion_point {
            InsertionPoint::After3x3 => h,
            InsertionPoint::After1x1 => self.conv_norm(g, b, h, "backbone.s5.expand", 1)?,
            InsertionPoint::AfterAdd => {
                let e = self.conv_norm(g, b, h, "backbone.s5.expand", 1)?;
                g.add(e, block_in)?
            }
        };
        Ok(Stem { c3, c4, block_in, site })
    }

    /// Completes the final block from a (possibly blended) site feature.
    fn finish_block(&self, g: &mut Graph, b: &mut Binder, stem: &Stem, site: Var) -> Result<Var> {
        let pre = match self.config.blend.insertion_point {
            InsertionPoint::After3x3 => {
                let e = self.conv_norm(g, b, site, "backbone.s5.expand", 1)?;
                g.add(e, stem.block_in)?
            }
            InsertionPoint::After1x1 => g.add(site, stem.block_in)?,
            InsertionPoint::AfterAdd => site,
        };
        Ok(g.relu(pre))
    }

    fn blend_vars(&self, g: &mut Graph, b: &mut Binder) -> Result<BlendVars> {
        let order = self.config.blend.order;
        let scm = if order.uses_scm() {
            Some(ScmVars {
                w1: b.var(g, "scm.w1")?,
                w2: b.var(g, "scm.w2")?,
                w3: b.var(g, "scm.w3")?,
            })
        } else {
            None
        };
        let tcm = if order.uses_tcm() {
            let r = self.params.names().filter(|n| n.starts_with("tcm.w4.")).count() as isize / 2;
            let mut banks = [Vec::new(), Vec::new(), Vec::new()];
            for off in -r..=r {
                for (bank, name) in banks.iter_mut().zip(["w4", "w5", "w6"]) {
                    bank.push(b.var(g, &TcmWeights::param_name("tcm", name, off))?);
                }
            }
            let [w4, w5, w6] = banks;
            Some(TcmVars { w4, w5, w6 })
        } else {
            None
        };
        Ok(BlendVars { scm, tcm })
    }

    /// P3..P7 from the backbone outputs.
    pub fn pyramid(&self, g: &mut Graph, b: &mut Binder, c3: Var, c4: Var, c5: Var) -> Result<Vec<Var>> {
        let l5 = self.conv(g, b, c5, "fpn.lat5", 1)?;
        let l4 = self.conv(g, b, c4, "fpn.lat4", 1)?;
        let l3 = self.conv(g, b, c3, "fpn.lat3", 1)?;
        let (h4, w4) = (g.shape(l4)[1], g.shape(l4)[2]);
        let up5 = g.upsample_nearest(l5, h4, w4)?;
        let t4 = g.add(l4, up5)?;
        let (h3, w3) = (g.shape(l3)[1], g.shape(l3)[2]);
        let up4 = g.upsample_nearest(t4, h3, w3)?;
        let t3 = g.add(l3, up4)?;
        let p3 = self.conv(g, b, t3, "fpn.out3", 1)?;
        let p4 = self.conv(g, b, t4, "fpn.out4", 1)?;
        let p5 = self.conv(g, b, l5, "fpn.out5", 1)?;
        let p6 = self.conv(g, b, c5, "fpn.p6", 2)?;
        let p6r = g.relu(p6);
        let p7 = self.conv(g, b, p6r, "fpn.p7", 2)?;
        Ok(vec![p3, p4, p5, p6, p7])
    }

    /// Classification and box subnets, shared across levels.
    pub fn head(&self, g: &mut Graph, b: &mut Binder, pyramid: &[Var]) -> Result<Vec<HeadLevel>> {
        let mut out = Vec::with_capacity(pyramid.len());
        for &p in pyramid {
            let mut streams = [p, p];
            for (stream, tower) in streams.iter_mut().zip(["cls", "box"]) {
                for i in 0..self.config.head_layers {
                    *stream = self.conv_relu(g, b, *stream, &format!("head.{tower}.{i}"), 1)?;
                }
                *stream = self.conv(g, b, *stream, &format!("head.{tower}.out"), 1)?;
            }
            let cls = g.sigmoid(streams[0]);
            out.push(HeadLevel { cls, boxes: streams[1] });
        }
        Ok(out)
    }

    /// Detector output for `window[main]`, blending over the window's
    /// insertion-site features.
    pub fn detect(&self, g: &mut Graph, b: &mut Binder, window: &[Stem], main: usize) -> Result<FrameOutput> {
        let stem = window
            .get(main)
            .ok_or_else(|| Error::invalid(format!("main frame {main} outside a window of {}", window.len())))?;
        let sites: Vec<Var> = window.iter().map(|s| s.site).collect();
        let vars = self.blend_vars(g, b)?;
        let blended = blend_block(g, &sites, main, &vars, self.config.blend.order, self.config.blend.embedding)?;
        let c5 = self.finish_block(g, b, stem, blended.out)?;
        let pyramid = self.pyramid(g, b, stem.c3, stem.c4, c5)?;
        let levels = self.head(g, b, &pyramid)?;
        Ok(FrameOutput {
            levels,
            pyramid,
            c5,
            tcm: blended.tcm,
        })
    }

    /// Whether frames other than the main one affect the output.
    pub fn uses_window(&self) -> bool {
        !matches!(self.config.blend.order, BlendOrder::None | BlendOrder::ScmOnly)
    }

    /// Runs a whole snippet of normalised frames: frame `k` is blended over
    /// the frames `k + o` for `|o| ≤ support / 2`, clamped to the snippet.
    pub fn backbone_forward(&self, g: &mut Graph, b: &mut Binder, frames: &[Var], support: usize) -> Result<Vec<FrameOutput>> {
        if support % 2 == 0 {
            return Err(Error::invalid(format!("temporal support must be odd, got {support}")));
        }
        let stems = frames
            .iter()
            .map(|&f| self.stem(g, b, f))
            .collect::<Result<Vec<_>>>()?;
        let r = (support / 2) as isize;
        let last = frames.len() as isize - 1;
        (0..frames.len())
            .map(|k| {
                let window: Vec<Stem> = (-r..=r)
                    .map(|o| stems[(k as isize + o).clamp(0, last) as usize])
                    .collect();
                self.detect(g, b, &window, r as usize)
            })
            .collect()
    }

    /// Focal plus smooth-L1 loss, both normalised by the foreground count.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &FrameOutput,
        targets: &[LevelTargets],
        num_foreground: usize,
        cfg: &LossConfig,
    ) -> Result<LossParts> {
        if targets.len() != out.levels.len() || targets.len() != NUM_LEVELS {
            return Err(Error::invalid(format!(
                "{} target levels for {} head levels",
                targets.len(),
                out.levels.len()
            )));
        }
        let norm = num_foreground.max(1) as f64;
        let mut cls_terms = Vec::new();
        let mut box_terms = Vec::new();
        for (lv, t) in out.levels.iter().zip(targets) {
            cls_terms.push(g.focal_loss(lv.cls, t.cls.clone(), cfg.focal_alpha, cfg.focal_gamma, norm)?);
            box_terms.push(g.smooth_l1(lv.boxes, t.boxes.clone(), t.box_mask.clone(), cfg.smooth_l1_beta, norm)?);
        }
        let cls = sum_vars(g, &cls_terms)?;
        let boxes = sum_vars(g, &box_terms)?;
        let total = g.add(cls, boxes)?;
        Ok(LossParts { total, cls, boxes })
    }
}

fn sum_vars(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}
