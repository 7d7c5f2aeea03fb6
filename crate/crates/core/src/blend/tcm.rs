//! Temporal context module.
//!
//! Over a window of `T` frames with main frame `t`, per position `i`:
//!
//! ```text
//! C[m,i]  = exp(w4_m · x_{m,i}) / Σ_n exp(w4_n · x_{n,i})
//! x̂[m,i]  = (1 / HW) · C[m,i] · Σ_j C[m,j]
//! z_{t,i} = x_{t,i} + Σ_m w6_m · (x_{m,i} + w5_m · Σ_j x̂[m,j] · x_{m,j})
//! ```
//!
//! Weight banks are indexed by the temporal offset `m − t`. Windows wider
//! than the trained bank reuse the weights of the nearest trained offset.

use rand::Rng;

use super::scm::BLEND_INIT_STD;
use super::EmbeddingStrategy;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TcmWeights {
    /// Per-offset attention embeddings `[1, C]`, ordered from offset `-τ` to `τ`.
    pub w4: Vec<Tensor>,
    /// Per-offset context transforms `[C, C]`.
    pub w5: Vec<Tensor>,
    /// Per-offset blending transforms `[C, C]`.
    pub w6: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TcmVars {
    pub w4: Vec<Var>,
    pub w5: Vec<Var>,
    pub w6: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct TcmOutput {
    pub out: Var,
    /// Cross-frame softmax weights, `[T, H, W]`.
    pub weights: Var,
    /// Per-frame attention maps, `[T, H, W]`.
    pub maps: Var,
}

fn bank_index(radius: usize, offset: isize) -> usize {
    (offset.clamp(-(radius as isize), radius as isize) + radius as isize) as usize
}

impl TcmWeights {
    pub fn new(w4: Vec<Tensor>, w5: Vec<Tensor>, w6: Vec<Tensor>) -> Result<Self> {
        let t = w4.len();
        if t == 0 || t % 2 == 0 || w5.len() != t || w6.len() != t {
            return Err(Error::invalid(format!(
                "TCM banks need one odd length, got {t}/{}/{}",
                w5.len(),
                w6.len()
            )));
        }
        let c = w4[0].shape().get(1).copied().unwrap_or(0);
        for i in 0..t {
            if w4[i].shape() != [1, c] || w5[i].shape() != [c, c] || w6[i].shape() != [c, c] {
                return Err(Error::ShapeMismatch {
                    op: "tcm weights",
                    lhs: w4[i].shape().to_vec(),
                    rhs: [w5[i].shape(), w6[i].shape()].concat(),
                });
            }
        }
        Ok(Self { w4, w5, w6 })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, temporal_support: usize, rng: &mut R) -> Result<Self> {
        let mut w4 = Vec::new();
        let mut w5 = Vec::new();
        let mut w6 = Vec::new();
        for _ in 0..temporal_support {
            w4.push(Tensor::randn([1, channels], BLEND_INIT_STD, rng));
            w5.push(Tensor::randn([channels, channels], BLEND_INIT_STD, rng));
            w6.push(Tensor::randn([channels, channels], BLEND_INIT_STD, rng));
        }
        Self::new(w4, w5, w6)
    }

    pub fn temporal_support(&self) -> usize {
        self.w4.len()
    }

    pub fn radius(&self) -> usize {
        self.w4.len() / 2
    }

    pub fn channels(&self) -> usize {
        self.w4[0].shape()[1]
    }

    /// Bank slot serving temporal `offset`.
    pub fn bank_index(&self, offset: isize) -> usize {
        bank_index(self.radius(), offset)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TcmVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        TcmVars {
            w4: self.w4.iter().map(&mut leaf).collect(),
            w5: self.w5.iter().map(&mut leaf).collect(),
            w6: self.w6.iter().map(&mut leaf).collect(),
        }
    }

    /// Evaluates the module on a window of `[C,H,W]` frames.
    pub fn forward(&self, frames: &[Tensor], main: usize, strategy: EmbeddingStrategy) -> Result<Tensor> {
        let mut g = Graph::new();
        let xs: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let w = self.bind(&mut g, false);
        let out = tcm_forward(&mut g, &xs, main, &w, strategy)?.out;
        Ok(g.value(out).clone())
    }

    pub fn param_name(prefix: &str, bank: &str, offset: isize) -> String {
        format!("{prefix}.{bank}.{offset}")
    }

    pub fn store(&self, prefix: &str, params: &mut ParamStore) {
        let r = self.radius() as isize;
        for (i, off) in (-r..=r).enumerate() {
            params.insert(Self::param_name(prefix, "w4", off), self.w4[i].clone());
            params.insert(Self::param_name(prefix, "w5", off), self.w5[i].clone());
            params.insert(Self::param_name(prefix, "w6", off), self.w6[i].clone());
        }
    }

    pub fn load(prefix: &str, params: &ParamStore) -> Result<Self> {
        let head = format!("{prefix}.w4.");
        let count = params.names().filter(|n| n.starts_with(&head)).count();
        if count == 0 {
            return Err(Error::invalid(format!("no {prefix} weights in parameter set")));
        }
        let r = (count / 2) as isize;
        let get = |bank: &str, off: isize| {
            let name = Self::param_name(prefix, bank, off);
            params
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let mut w4 = Vec::new();
        let mut w5 = Vec::new();
        let mut w6 = Vec::new();
        for off in -r..=r {
            w4.push(get("w4", off)?);
            w5.push(get("w5", off)?);
            w6.push(get("w6", off)?);
        }
        Self::new(w4, w5, w6)
    }
}

impl TcmVars {
    pub fn radius(&self) -> usize {
        self.w4.len() / 2
    }

    /// Whether a window of `len` frames around `main` needs offsets beyond
    /// the trained bank.
    pub fn reuses_offsets(&self, len: usize, main: usize) -> bool {
        main > self.radius() || len - main - 1 > self.radius()
    }
}

/// Cross-frame softmax of per-frame embeddings `[T,H,W]`, normalised over
/// `T` independently at each position.
pub fn temporal_softmax(g: &mut Graph, embeddings: Var) -> Result<Var> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::invalid(format!(
            "temporal softmax needs [T>0,H,W], got {shape:?}"
        )));
    }
    g.softmax(embeddings, 0)
}

/// Attention maps for every frame of the softmax weights `c: [T,H,W]`:
/// each weight scaled by its frame's summed weight over `HW`.
pub fn temporal_attention_map(g: &mut Graph, c: Var) -> Result<Var> {
    let shape = g.shape(c).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("attention map needs [T,H,W], got {shape:?}")));
    }
    let hw = (shape[1] * shape[2]) as f64;
    let mass = g.sum_over(c, &[1, 2])?;
    let prod = g.mul(c, mass)?;
    Ok(g.scale(prod, 1.0 / hw))
}

pub fn tcm_forward(
    g: &mut Graph,
    frames: &[Var],
    main: usize,
    w: &TcmVars,
    strategy: EmbeddingStrategy,
) -> Result<TcmOutput> {
    let first = *frames
        .first()
        .ok_or_else(|| Error::invalid("TCM needs at least one frame"))?;
    if main >= frames.len() {
        return Err(Error::invalid(format!("main frame {main} outside {} frames", frames.len())));
    }
    let shape = g.shape(first).to_vec();
    for &f in frames {
        if g.shape(f) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "tcm frames",
                lhs: shape,
                rhs: g.shape(f).to_vec(),
            });
        }
    }
    if shape.len() != 3 || g.shape(w.w4[0])[1] != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "tcm",
            lhs: shape,
            rhs: g.shape(w.w4[0]).to_vec(),
        });
    }
    let (c, h, wd) = (shape[0], shape[1], shape[2]);
    let t = frames.len();
    let radius = w.radius();
    let slot = |m: usize| bank_index(radius, m as isize - main as isize);

    let inputs: Vec<Var> = frames
        .iter()
        .enumerate()
        .map(|(m, &f)| match strategy {
            EmbeddingStrategy::MainAndRefs if m != main => g.stop_gradient(f),
            _ => f,
        })
        .collect();

    let mut embeds = Vec::with_capacity(t);
    for (m, &x) in inputs.iter().enumerate() {
        embeds.push(g.conv1x1(x, w.w4[slot(m)])?);
    }
    let stacked = g.stack(&embeds)?;
    let stacked = g.reshape(stacked, [t, h, wd])?;
    let weights = temporal_softmax(g, stacked)?;
    let maps = temporal_attention_map(g, weights)?;

    let mut total: Option<Var> = None;
    for (m, &x) in inputs.iter().enumerate() {
        let map = g.select(maps, m)?;
        let map = g.reshape(map, [h * wd, 1])?;
        let flat = g.reshape(x, [c, h * wd])?;
        let context = g.matmul(flat, map)?;
        let shift = g.matmul(w.w5[slot(m)], context)?;
        let shift = g.reshape(shift, [c, 1, 1])?;
        let adapted = g.add(x, shift)?;
        let blended = g.conv1x1(adapted, w.w6[slot(m)])?;
        total = Some(match total {
            Some(acc) => g.add(acc, blended)?,
            None => blended,
        });
    }
    let out = g.add(frames[main], total.expect("non-empty window"))?;
    Ok(TcmOutput { out, weights, maps })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn weights_of(g: &mut Graph, embeds: Tensor) -> Tensor {
        let v = g.constant(embeds);
        let c = temporal_softmax(g, v).unwrap();
        g.value(c).clone()
    }

    #[test]
    fn identical_embeddings_share_weight_evenly() {
        let mut g = Graph::new();
        let c = weights_of(&mut g, Tensor::full([4, 2, 3], 0.7));
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_frame_weights_are_one() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = weights_of(&mut g, Tensor::randn([1, 3, 3], 5.0, &mut rng));
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_frame_closed_form() {
        let mut g = Graph::new();
        let c = weights_of(&mut g, Tensor::new([2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        assert!((c.data()[0] - 0.25).abs() < 1e-15 && (c.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_frames_is_an_error() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros([0, 2, 2]));
        assert!(temporal_softmax(&mut g, v).is_err());
    }

    #[test]
    fn attention_map_closed_forms() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full([1, 3, 4], 1.0));
        let m = temporal_attention_map(&mut g, ones).unwrap();
        assert!(g.value(m).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let t = 3.0;
        let uniform = g.constant(Tensor::full([3, 2, 5], 1.0 / t));
        let m = temporal_attention_map(&mut g, uniform).unwrap();
        assert!(g.value(m).data().iter().all(|&v| (v - 1.0 / (t * t)).abs() < 1e-15));
    }

    #[test]
    fn zero_transforms_pass_main_frame_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = TcmWeights::init(4, 3, &mut rng).unwrap();
        for t in w.w5.iter_mut().chain(w.w6.iter_mut()) {
            *t = Tensor::zeros([4, 4]);
        }
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::randn([4, 3, 3], 1.0, &mut rng)).collect();
        let out = w.forward(&frames, 1, EmbeddingStrategy::Positional).unwrap();
        assert_eq!(out, frames[1]);

        let single = TcmWeights::new(
            vec![Tensor::randn([1, 4], 1.0, &mut rng)],
            vec![Tensor::zeros([4, 4])],
            vec![Tensor::zeros([4, 4])],
        )
        .unwrap();
        assert_eq!(single.forward(&frames[..1], 0, EmbeddingStrategy::MainAndRefs).unwrap(), frames[0]);
    }

    #[test]
    fn inconsistent_frames_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = TcmWeights::init(2, 3, &mut rng).unwrap();
        let frames = vec![Tensor::zeros([2, 2, 2]), Tensor::zeros([2, 3, 2]), Tensor::zeros([2, 2, 2])];
        assert!(w.forward(&frames, 1, EmbeddingStrategy::Positional).is_err());
    }

    #[test]
    fn wide_windows_reuse_nearest_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = TcmWeights::init(2, 3, &mut rng).unwrap();
        assert_eq!(w.bank_index(-4), 0);
        assert_eq!(w.bank_index(0), 1);
        assert_eq!(w.bank_index(9), 2);
        let mut g = Graph::new();
        let vars = w.bind(&mut g, false);
        assert!(!vars.reuses_offsets(3, 1));
        assert!(vars.reuses_offsets(5, 2));
    }

    #[test]
    fn param_store_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = TcmWeights::init(2, 5, &mut rng).unwrap();
        let mut ps = ParamStore::new();
        w.store("tcm", &mut ps);
        assert!(ps.contains("tcm.w4.-2") && ps.contains("tcm.w6.2"));
        assert_eq!(TcmWeights::load("tcm", &ps).unwrap(), w);
    }
}
