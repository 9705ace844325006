use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden-state stack of one utterance: `[L, T, C]` (layer, frame, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub utt_id: String,
    layers: Tensor,
}

impl LayerFeatures {
    pub fn new(utt_id: impl Into<String>, layers: Tensor) -> Result<Self> {
        layers.expect_rank("LayerFeatures", 3)?;
        if !layers.is_finite() {
            return Err(Error::NonFinite("layer features".into()));
        }
        Ok(LayerFeatures {
            utt_id: utt_id.into(),
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.layers.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.layers.shape()[2]
    }

    pub fn layers(&self) -> &Tensor {
        &self.layers
    }

    /// Row-major `[T, C]` slice of one layer.
    pub fn layer(&self, index: usize) -> &[f64] {
        let n = self.frames() * self.channels();
        &self.layers.data()[index * n..(index + 1) * n]
    }
}
