//! Per-block temporal attention pooling and fusion.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};

use super::params::{BoundParams, ParamId};

/// Two-layer scoring network mapping one frame to a scalar score:
/// `e = w2 · relu(W1 f + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSubnet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Output of one attention pooling step.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// Frame scores `[B, T]`.
    pub scores: Var,
    /// Normalized weights `[B, T]`; each row sums to one over unmasked frames.
    pub weights: Var,
    /// Weighted sum of frames `[B, D]`.
    pub pooled: Var,
}

/// Attention state for every block plus the concatenated utterance vector.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub blocks: Vec<Pooled>,
    /// `[B, D_total]`, pooled vectors in block order.
    pub fused: Var,
}

impl AttentionSubnet {
    /// Pools time-major `f: [B, T, D]` into `[B, D]`.
    ///
    /// `mask` is row-major `[B, T]`; masked frames receive zero weight.
    pub fn pool(&self, tape: &mut GradTape, params: &BoundParams, f: Var, mask: Option<&[bool]>) -> Result<Pooled> {
        let shape = tape.value(f).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Rank {
                op: "temporal_attention",
                expected: 3,
                actual: shape.len(),
            });
        }
        let (b, t) = (shape[0], shape[1]);
        let hidden = tape.affine(f, params.var(self.w1), params.var(self.b1))?;
        let hidden = tape.relu(hidden)?;
        let scores = tape.affine(hidden, params.var(self.w2), params.var(self.b2))?;
        let scores = tape.reshape(scores, &[b, t])?;
        let weights = tape.masked_softmax(scores, mask)?;
        let pooled = tape.weighted_time_sum(weights, f)?;
        Ok(Pooled {
            scores,
            weights,
            pooled,
        })
    }
}

/// Concatenates pooled vectors in the given order.
pub fn fuse(tape: &mut GradTape, pooled: &[Var]) -> Result<Var> {
    tape.concat(pooled)
}
