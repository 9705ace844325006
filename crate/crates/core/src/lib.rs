//! Emotion-guided audio anti-spoofing back-end.
//!
//! Consumes per-layer hidden states of a speech transformer and produces a
//! countermeasure score per utterance. The network refines one selected
//! layer with four convolutional residual blocks, pools each block's output
//! over time with its own attention subnetwork, concatenates the pooled
//! vectors and classifies bonafide vs. spoof.
//!
//! - [`tensor`], [`ops`], [`tape`]: 64-bit tensors, layer primitives and
//!   reverse-mode gradients.
//! - [`model`]: the residual extractor, attention fusion and classifier.
//! - [`trainer`]: Adam training with best-validation-loss retention.
//! - [`metrics`]: DET curve, EER and min t-DCF.
//! - [`dataio`]: feature/checkpoint/manifest/score formats and a synthetic
//!   dataset generator.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ops::Mode;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
