//! Convolutional residual blocks.

use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, BatchStats, Mode, RunningStats};
use crate::tape::{GradTape, Var};

use super::params::{BoundParams, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Affine parameters of a batch norm layer and the slot of its running
/// statistics in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats_slot: usize,
}

/// Parameters of one residual block. `proj` (a 1x1 convolution) exists
/// exactly when the input and hidden widths differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlock {
    pub d_in: usize,
    pub d_hidden: usize,
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    pub proj: Option<ConvParams>,
}

/// Intermediate values of one block, all channel-major `[B, d_hidden, T]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockActivation {
    pub h_conv1: Var,
    pub h_conv2: Var,
    pub h_residual: Var,
    pub f: Var,
}

/// Training-mode batch statistics keyed by running-stat slot.
pub type BatchNormUpdates = Vec<(usize, BatchStats)>;

impl ResidualBlock {
    /// Runs the block on channel-major `x: [B, d_in, T]`.
    ///
    /// ```text
    /// h_conv1    = BN(conv3(x))
    /// h_conv2    = BN(conv3(relu(h_conv1)))
    /// h_residual = conv1x1(x) if d_in != d_hidden else x
    /// f          = relu(h_conv2 + h_residual)
    /// ```
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut GradTape,
        params: &BoundParams,
        running: &[Option<RunningStats>],
        bn_cfg: &BatchNormConfig,
        x: Var,
        mode: Mode,
        updates: &mut BatchNormUpdates,
    ) -> Result<BlockActivation> {
        let d_in = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if d_in != self.d_in {
            return Err(Error::shape("residual_block", "channels", self.d_in, d_in));
        }
        let mut bn = |tape: &mut GradTape, v: Var, p: &BatchNormParams| -> Result<Var> {
            let (y, stats) = tape.batchnorm(
                v,
                params.var(p.gamma),
                params.var(p.beta),
                mode,
                running[p.stats_slot].as_ref(),
                bn_cfg,
            )?;
            if let Some(s) = stats {
                updates.push((p.stats_slot, s));
            }
            Ok(y)
        };

        let c1 = tape.conv1d(x, params.var(self.conv1.weight), params.var(self.conv1.bias), 1)?;
        let h_conv1 = bn(tape, c1, &self.bn1)?;
        let a1 = tape.relu(h_conv1)?;
        let c2 = tape.conv1d(a1, params.var(self.conv2.weight), params.var(self.conv2.bias), 1)?;
        let h_conv2 = bn(tape, c2, &self.bn2)?;
        let h_residual = match &self.proj {
            Some(p) => tape.conv1d(x, params.var(p.weight), params.var(p.bias), 0)?,
            None => x,
        };
        let sum = tape.add(h_conv2, h_residual)?;
        let f = tape.relu(sum)?;
        Ok(BlockActivation {
            h_conv1,
            h_conv2,
            h_residual,
            f,
        })
    }
}
