use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tape::{GradTape, Var};

use super::params::{BoundParams, ParamId};

/// `logits = W2 · relu(dropout(W1 x + b1)) + b2`.
///
/// Dropout sits before the ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape,
        params: &BoundParams,
        fused: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let d_in = tape.value(params.var(self.w1)).shape()[1];
        let got = tape.value(fused).last_dim();
        if got != d_in {
            return Err(Error::shape("classify", "fused_features", d_in, got));
        }
        let h = tape.affine(fused, params.var(self.w1), params.var(self.b1))?;
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        let h = tape.relu(h)?;
        tape.affine(h, params.var(self.w2), params.var(self.b2))
    }
}
