//! Spatial context module.
//!
//! For a feature map `x` with `M = H·W` positions:
//!
//! ```text
//! α = softmax_j(w1 · x_j)
//! g = Σ_j α_j · (w2 · x_j)          (a C_e-vector)
//! z_i = x_i + w3 · g                  (broadcast over every i)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Init std of every blending weight. Small transforms start both modules
/// close to the identity.
pub const BLEND_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ScmWeights {
    /// Attention logits embedding, `[1, C]`.
    pub w1: Tensor,
    /// Value embedding, `[C_e, C]`.
    pub w2: Tensor,
    /// Output transform, `[C, C_e]`.
    pub w3: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ScmVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ScmOutput {
    pub out: Var,
    /// Spatial attention weights `α`, shaped `[H, W]`.
    pub attention: Var,
}

impl ScmWeights {
    pub fn new(w1: Tensor, w2: Tensor, w3: Tensor) -> Result<Self> {
        let ok = w1.rank() == 2
            && w2.rank() == 2
            && w3.rank() == 2
            && w1.shape()[0] == 1
            && w2.shape()[1] == w1.shape()[1]
            && w3.shape() == [w1.shape()[1], w2.shape()[0]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "scm weights",
                lhs: [w1.shape(), w2.shape()].concat(),
                rhs: w3.shape().to_vec(),
            });
        }
        Ok(Self { w1, w2, w3 })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        let ce = embed_channels(channels, reduction_ratio)?;
        Self::new(
            Tensor::randn([1, channels], BLEND_INIT_STD, rng),
            Tensor::randn([ce, channels], BLEND_INIT_STD, rng),
            Tensor::randn([channels, ce], BLEND_INIT_STD, rng),
        )
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn embed_channels(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ScmVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        ScmVars {
            w1: leaf(&self.w1),
            w2: leaf(&self.w2),
            w3: leaf(&self.w3),
        }
    }

    /// Evaluates the module on a single `[C,H,W]` map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = self.bind(&mut g, false);
        let out = scm_forward(&mut g, xv, &w)?.out;
        Ok(g.value(out).clone())
    }

    pub fn store(&self, prefix: &str, params: &mut ParamStore) {
        params.insert(format!("{prefix}.w1"), self.w1.clone());
        params.insert(format!("{prefix}.w2"), self.w2.clone());
        params.insert(format!("{prefix}.w3"), self.w3.clone());
    }

    pub fn load(prefix: &str, params: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing parameter {prefix}.{n}")))
        };
        Self::new(get("w1")?, get("w2")?, get("w3")?)
    }
}

pub(crate) fn embed_channels(channels: usize, reduction_ratio: usize) -> Result<usize> {
    if reduction_ratio == 0 || channels % reduction_ratio != 0 {
        return Err(Error::invalid(format!(
            "reduction ratio {reduction_ratio} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction_ratio)
}

pub fn scm_forward(g: &mut Graph, x: Var, w: &ScmVars) -> Result<ScmOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || g.shape(w.w1)[1] != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "scm",
            lhs: shape,
            rhs: g.shape(w.w1).to_vec(),
        });
    }
    let (h, wd) = (shape[1], shape[2]);
    let m = h * wd;
    let ce = g.shape(w.w2)[0];

    let logits = g.conv1x1(x, w.w1)?;
    let logits = g.reshape(logits, [1, m])?;
    let alpha = g.softmax(logits, 1)?;
    let alpha_col = g.reshape(alpha, [m, 1])?;

    let values = g.conv1x1(x, w.w2)?;
    let values = g.reshape(values, [ce, m])?;
    let context = g.matmul(values, alpha_col)?;
    let shift = g.matmul(w.w3, context)?;
    let shift = g.reshape(shift, [shape[0], 1, 1])?;
    let out = g.add(x, shift)?;
    let attention = g.reshape(alpha, [h, wd])?;
    Ok(ScmOutput { out, attention })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ScmWeights::init(8, 4, &mut rng).unwrap();
        let out = w.forward(&Tensor::zeros([8, 3, 5])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_transform_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = ScmWeights::init(8, 2, &mut rng).unwrap();
        w.w3 = Tensor::zeros([8, 4]);
        let x = Tensor::randn([8, 4, 4], 1.0, &mut rng);
        assert_eq!(w.forward(&x).unwrap(), x);
    }

    #[test]
    fn attention_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ScmWeights::init(4, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([4, 3, 3], 50.0, &mut rng));
        let vars = w.bind(&mut g, false);
        let out = scm_forward(&mut g, x, &vars).unwrap();
        assert!((g.value(out.attention).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ScmWeights::init(4, 1, &mut rng).unwrap();
        assert!(w.forward(&Tensor::zeros([3, 2, 2])).is_err());
        assert!(ScmWeights::init(6, 4, &mut rng).is_err());
    }
}
