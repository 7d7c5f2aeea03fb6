//! Direct loop implementations of the blending and convolution operators.
//! They share no code with the graph kernels and serve as references in the
//! self-test and the test suites.

use crate::blend::{ScmWeights, TcmWeights};
use crate::tensor::Tensor;

fn dims3(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

/// `k × k` convolution of `[Ci,H,W]` with `[Co,Ci,k,k]` weights, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = dims3(x);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.get(&[o, c, dy, dx]) * x.get(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[o, y, xo], acc);
            }
        }
    }
    out
}

/// Pointwise convolution with `[Co,Ci]` weights.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Tensor {
    let (ci, h, wd) = dims3(x);
    let co = w.shape()[0];
    let mut out = Tensor::zeros([co, h, wd]);
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let acc: f64 = (0..ci).map(|c| w.get(&[o, c]) * x.get(&[c, y, xx])).sum();
                out.set(&[o, y, xx], acc);
            }
        }
    }
    out
}

/// Spatial context module, one frame.
pub fn scm(x: &Tensor, w: &ScmWeights) -> Tensor {
    let (c, h, wd) = dims3(x);
    let ce = w.w2.shape()[0];
    let n = h * wd;
    let at = |ch: usize, i: usize| x.get(&[ch, i / wd, i % wd]);
    let logits: Vec<f64> = (0..n)
        .map(|i| (0..c).map(|ch| w.w1.get(&[0, ch]) * at(ch, i)).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut pooled = vec![0.0; c];
    for (i, e) in exps.iter().enumerate() {
        for (ch, p) in pooled.iter_mut().enumerate() {
            *p += e / z * at(ch, i);
        }
    }
    let context: Vec<f64> = (0..ce)
        .map(|e| (0..c).map(|ch| w.w2.get(&[e, ch]) * pooled[ch]).sum())
        .collect();
    let mut out = x.clone();
    for ch in 0..c {
        let shift: f64 = (0..ce).map(|e| w.w3.get(&[ch, e]) * context[e]).sum();
        for i in 0..n {
            out.set(&[ch, i / wd, i % wd], at(ch, i) + shift);
        }
    }
    out
}

/// Softmax over `T` at every position of `[T,H,W]` embeddings.
pub fn temporal_softmax(e: &Tensor) -> Tensor {
    let (t, h, w) = dims3(e);
    let mut out = Tensor::zeros([t, h, w]);
    for y in 0..h {
        for x in 0..w {
            let max = (0..t).map(|m| e.get(&[m, y, x])).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..t).map(|m| (e.get(&[m, y, x]) - max).exp()).sum();
            for m in 0..t {
                out.set(&[m, y, x], (e.get(&[m, y, x]) - max).exp() / z);
            }
        }
    }
    out
}

/// Attention maps from softmax weights `[T,H,W]`.
pub fn temporal_attention_map(c: &Tensor) -> Tensor {
    let (t, h, w) = dims3(c);
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros([t, h, w]);
    for m in 0..t {
        let mut mass = 0.0;
        for y in 0..h {
            for x in 0..w {
                mass += c.get(&[m, y, x]);
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.set(&[m, y, x], c.get(&[m, y, x]) * mass / hw);
            }
        }
    }
    out
}

/// Temporal context module over `frames` with main frame `main`. Offsets
/// outside the weight bank use the nearest trained offset.
pub fn tcm(frames: &[Tensor], main: usize, w: &TcmWeights) -> Tensor {
    let (c, h, wd) = dims3(&frames[0]);
    let t = frames.len();
    let r = w.radius() as isize;
    let slot = |m: usize| ((m as isize - main as isize).clamp(-r, r) + r) as usize;
    let mut emb = Tensor::zeros([t, h, wd]);
    for (m, f) in frames.iter().enumerate() {
        let w4 = &w.w4[slot(m)];
        for y in 0..h {
            for x in 0..wd {
                let v: f64 = (0..c).map(|ch| w4.get(&[0, ch]) * f.get(&[ch, y, x])).sum();
                emb.set(&[m, y, x], v);
            }
        }
    }
    let maps = temporal_attention_map(&temporal_softmax(&emb));
    let mut out = frames[main].clone();
    for (m, f) in frames.iter().enumerate() {
        let mut context = vec![0.0; c];
        for (ch, ctx) in context.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..wd {
                    *ctx += maps.get(&[m, y, x]) * f.get(&[ch, y, x]);
                }
            }
        }
        let (w5, w6) = (&w.w5[slot(m)], &w.w6[slot(m)]);
        let shift: Vec<f64> = (0..c)
            .map(|o| (0..c).map(|k| w5.get(&[o, k]) * context[k]).sum())
            .collect();
        for o in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let v: f64 = (0..c).map(|k| w6.get(&[o, k]) * (f.get(&[k, y, x]) + shift[k])).sum();
                    out.set(&[o, y, x], out.get(&[o, y, x]) + v);
                }
            }
        }
    }
    out
}

/// Focal loss summed over entries, labels 1 / 0 / -1 (ignored).
/// Probabilities are clamped to `[eps, 1 - eps]` like the graph op.
pub fn focal_loss(probs: &[f64], labels: &[i8], alpha: f64, gamma: f64, norm: f64) -> f64 {
    let eps = crate::tensor::PROB_EPS;
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels) {
        let p = p.max(eps).min(1.0 - eps);
        let (pt, at) = match l {
            1 => (p, alpha),
            0 => (1.0 - p, 1.0 - alpha),
            _ => continue,
        };
        total -= at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    total / norm
}

/// Smooth-L1 summed over masked entries.
pub fn smooth_l1(x: &[f64], targets: &[f64], mask: &[bool], beta: f64, norm: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        if !mask[i] {
            continue;
        }
        let d = (x[i] - targets[i]).abs();
        total += if d < beta { d * d / (2.0 * beta) } else { d - beta / 2.0 };
    }
    total / norm
}
