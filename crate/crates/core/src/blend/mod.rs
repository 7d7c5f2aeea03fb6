//! Attention-driven feature blending.
//!
//! Two residual self-attention modules operate on backbone feature maps:
//!
//! * the spatial context module ([`scm`]) pools one softmax-weighted global
//!   context vector per frame and adds its linear transform back onto every
//!   position;
//! * the temporal context module ([`tcm`]) normalises per-position frame
//!   embeddings across the snippet, forms per-frame attention maps, and adds
//!   transformed features of every supporting frame onto the main frame.
//!
//! Both keep an identity path: with their output transforms zeroed they
//! return the input unchanged.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub mod scm;
pub mod tcm;

pub use scm::{scm_forward, ScmOutput, ScmVars, ScmWeights};
pub use tcm::{
    temporal_attention_map, temporal_softmax, tcm_forward, TcmOutput, TcmVars, TcmWeights,
};

/// Where inside the last residual block of the backbone blending happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertionPoint {
    /// On the residual sum, before the block's final ReLU.
    AfterAdd,
    /// On the output of the expanding 1×1 convolution, before the sum.
    After1x1,
    /// On the output of the bottleneck 3×3 convolution.
    After3x3,
}

/// Which frames receive gradients through the temporal module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingStrategy {
    /// Every frame of the snippet backpropagates.
    Positional,
    /// Only the main (centre) frame backpropagates; reference frames are
    /// used forward-only.
    MainAndRefs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlendOrder {
    TcmThenScm,
    ScmThenTcm,
    ScmOnly,
    TcmOnly,
    None,
}

impl BlendOrder {
    pub fn uses_scm(self) -> bool {
        matches!(self, Self::TcmThenScm | Self::ScmThenTcm | Self::ScmOnly)
    }

    pub fn uses_tcm(self) -> bool {
        matches!(self, Self::TcmThenScm | Self::ScmThenTcm | Self::TcmOnly)
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, [$(($variant:expr, $name:literal)),+ $(,)?]) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(v if v == $variant => $name,)+
                    _ => unreachable!(),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(InsertionPoint, "insertion point", [
    (InsertionPoint::AfterAdd, "after_add"),
    (InsertionPoint::After1x1, "after_1x1"),
    (InsertionPoint::After3x3, "after_3x3"),
]);

keyword_enum!(EmbeddingStrategy, "embedding strategy", [
    (EmbeddingStrategy::Positional, "positional"),
    (EmbeddingStrategy::MainAndRefs, "main_and_refs"),
]);

keyword_enum!(BlendOrder, "blend order", [
    (BlendOrder::TcmThenScm, "tcm_then_scm"),
    (BlendOrder::ScmThenTcm, "scm_then_tcm"),
    (BlendOrder::ScmOnly, "scm_only"),
    (BlendOrder::TcmOnly, "tcm_only"),
    (BlendOrder::None, "none"),
]);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlendConfig {
    /// Snippet length `T = 2τ + 1`.
    pub temporal_support: usize,
    pub insertion_point: InsertionPoint,
    pub embedding: EmbeddingStrategy,
    pub reduction_ratio: usize,
    pub order: BlendOrder,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            temporal_support: 5,
            insertion_point: InsertionPoint::AfterAdd,
            embedding: EmbeddingStrategy::MainAndRefs,
            reduction_ratio: 4,
            order: BlendOrder::TcmThenScm,
        }
    }
}

impl BlendConfig {
    /// Checks that `T` is odd and the reduction ratio divides `channels`.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.temporal_support == 0 || self.temporal_support % 2 == 0 {
            return Err(Error::invalid(format!(
                "temporal support must be odd, got {}",
                self.temporal_support
            )));
        }
        if self.reduction_ratio == 0 || channels % self.reduction_ratio != 0 {
            return Err(Error::invalid(format!(
                "reduction ratio {} does not divide {channels} channels",
                self.reduction_ratio
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.temporal_support / 2
    }
}

/// Graph handles of whichever modules are active.
#[derive(Clone, Debug, Default)]
pub struct BlendVars {
    pub scm: Option<ScmVars>,
    pub tcm: Option<TcmVars>,
}

#[derive(Clone, Debug)]
pub struct BlendOutput {
    pub out: Var,
    pub tcm: Option<TcmOutput>,
}

/// Blends the main frame's feature map with its temporal window according
/// to `order`. `frames[main]` is the main frame; the rest are references.
pub fn blend_block(
    g: &mut Graph,
    frames: &[Var],
    main: usize,
    vars: &BlendVars,
    order: BlendOrder,
    embedding: EmbeddingStrategy,
) -> Result<BlendOutput> {
    if main >= frames.len() {
        return Err(Error::invalid(format!(
            "main frame {main} outside a window of {}",
            frames.len()
        )));
    }
    let scm = || {
        vars.scm
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("blend order {order} needs SCM weights")))
    };
    let tcm = || {
        vars.tcm
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("blend order {order} needs TCM weights")))
    };
    let (out, tcm_out) = match order {
        BlendOrder::None => (frames[main], None),
        BlendOrder::ScmOnly => (scm_forward(g, frames[main], scm()?)?.out, None),
        BlendOrder::TcmOnly => {
            let t = tcm_forward(g, frames, main, tcm()?, embedding)?;
            (t.out, Some(t))
        }
        BlendOrder::TcmThenScm => {
            let t = tcm_forward(g, frames, main, tcm()?, embedding)?;
            (scm_forward(g, t.out, scm()?)?.out, Some(t))
        }
        BlendOrder::ScmThenTcm => {
            let w = scm()?;
            let spatial = frames
                .iter()
                .map(|&f| scm_forward(g, f, w).map(|o| o.out))
                .collect::<Result<Vec<_>>>()?;
            let t = tcm_forward(g, &spatial, main, tcm()?, embedding)?;
            (t.out, Some(t))
        }
    };
    Ok(BlendOutput { out, tcm: tcm_out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_roundtrip() {
        for p in InsertionPoint::ALL {
            assert_eq!(p.as_str().parse::<InsertionPoint>().unwrap(), *p);
        }
        for o in BlendOrder::ALL {
            assert_eq!(o.to_string().parse::<BlendOrder>().unwrap(), *o);
        }
        let err = "sideways".parse::<EmbeddingStrategy>().unwrap_err().to_string();
        assert!(err.contains("positional") && err.contains("main_and_refs"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BlendConfig::default();
        assert!(cfg.validate(128).is_ok());
        cfg.temporal_support = 4;
        assert!(cfg.validate(128).is_err());
        cfg.temporal_support = 3;
        cfg.reduction_ratio = 3;
        assert!(cfg.validate(128).is_err());
    }
}
