//! The detection network.
//!
//! ```text
//! H^l ──► block1 ─► block2 ─► block3 ─► block4
//!           │         │         │         │
//!         attn1     attn2     attn3     attn4      (one subnet per block)
//!           └────────┬┴─────────┴─────────┘
//!                 concat ─► affine ─► dropout ─► relu ─► affine ─► logits
//! ```
//!
//! With [`Ablation::NoCrfe`] the blocks are skipped and a single attention
//! subnet pools the selected layer directly.

mod attention;
mod block;
mod features;
mod head;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{fuse, AttentionSubnet, FusionState, Pooled};
pub use block::{BatchNormParams, BatchNormUpdates, BlockActivation, ConvParams, ResidualBlock};
pub use features::LayerFeatures;
pub use head::ClassifierHead;
pub use params::{BoundParams, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, Mode, RunningStats};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;

/// Label index of bonafide speech in logits and cross-entropy targets.
pub const BONAFIDE: usize = 0;
/// Label index of spoofed speech.
pub const SPOOF: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Residual extractor plus per-block attention fusion.
    Full,
    /// Attention pooling directly over the selected transformer layer.
    NoCrfe,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_crfe" => Ok(Ablation::NoCrfe),
            other => Err(Error::InvalidArgument(format!("unknown ablation mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoCrfe => "no_crfe",
        })
    }
}

/// Hyperparameters fixing the network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width `C` of the input hidden states.
    pub input_dim: usize,
    /// Layer feeding the first block.
    pub input_layer_index: usize,
    /// When non-empty, these layers are summed to form the block-1 input
    /// instead of `input_layer_index` alone.
    #[serde(default)]
    pub layer_taps: Vec<usize>,
    /// Hidden width of each of the four blocks.
    pub block_widths: Vec<usize>,
    /// Hidden width of every attention scoring subnet.
    pub attention_dim: usize,
    pub classifier_dim: usize,
    pub dropout: f64,
    pub ablation: Ablation,
    pub batchnorm: BatchNormConfig,
}

impl ModelConfig {
    /// Default widths: 256 per block, attention 128, classifier 256, dropout 0.3.
    pub fn new(input_dim: usize, input_layer_index: usize) -> Self {
        Self::with_hidden(input_dim, input_layer_index, 256)
    }

    /// Same widths in every block; attention width is half the block width.
    pub fn with_hidden(input_dim: usize, input_layer_index: usize, d_hidden: usize) -> Self {
        ModelConfig {
            input_dim,
            input_layer_index,
            layer_taps: Vec::new(),
            block_widths: vec![d_hidden; NUM_BLOCKS],
            attention_dim: (d_hidden / 2).max(1),
            classifier_dim: 256,
            dropout: 0.3,
            ablation: Ablation::Full,
            batchnorm: BatchNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.block_widths.len() != NUM_BLOCKS {
            return bad(format!("expected {NUM_BLOCKS} block widths, got {}", self.block_widths.len()));
        }
        if self.block_widths.contains(&0) || self.attention_dim == 0 || self.classifier_dim == 0 {
            return bad("all widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.batchnorm.eps > 0.0) || !(0.0..=1.0).contains(&self.batchnorm.momentum) {
            return bad("batch norm eps must be > 0 and momentum in [0, 1]".into());
        }
        let mut taps = self.layer_taps.clone();
        taps.sort_unstable();
        taps.dedup();
        if taps.len() != self.layer_taps.len() {
            return bad("layer_taps contains duplicates".into());
        }
        Ok(())
    }

    /// Width of the vector entering the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.ablation {
            Ablation::Full => self.block_widths.iter().sum(),
            Ablation::NoCrfe => self.input_dim,
        }
    }

    /// Layers summed into the block-1 input.
    pub fn input_layers(&self) -> Vec<usize> {
        if self.layer_taps.is_empty() {
            vec![self.input_layer_index]
        } else {
            self.layer_taps.clone()
        }
    }
}

/// Padded channel-major input batch `[B, C, T_max]`.
#[derive(Debug, Clone)]
pub struct InputBatch {
    pub inputs: Tensor,
    /// Row-major `[B, T_max]` frame validity, present only when lengths differ.
    pub mask: Option<Vec<bool>>,
    pub lengths: Vec<usize>,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[B, 2]`, bonafide first.
    pub logits: Var,
    /// Per-block intermediates; empty under [`Ablation::NoCrfe`].
    pub blocks: Vec<BlockActivation>,
    /// Time-major `[B, T, d]` outputs that fed the attention subnets.
    pub pooled_inputs: Vec<Var>,
    pub fusion: FusionState,
    pub bn_updates: BatchNormUpdates,
}

/// Eval-mode result for one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub logits: [f64; 2],
    /// `logit(bonafide) - logit(spoof)`; higher means more bonafide.
    pub cm_score: f64,
}

pub fn cm_score(logits: [f64; 2]) -> f64 {
    logits[BONAFIDE] - logits[SPOOF]
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`, for layers followed by a rectifier.
    He(usize),
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun(usize),
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmoAntiModel {
    config: ModelConfig,
    params: ParamStore,
    blocks: Vec<ResidualBlock>,
    attention: Vec<AttentionSubnet>,
    head: ClassifierHead,
    running: Vec<Option<RunningStats>>,
}

impl EmoAntiModel {
    /// Randomly initialized model; all draws come from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |init, shape| match init {
            Init::He(fan_in) | Init::Lecun(fan_in) => {
                let gain = if matches!(init, Init::He(_)) { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            }
            Init::Zeros => Tensor::zeros(shape),
        })
    }

    /// Model with the right structure and placeholder values, to be filled
    /// from a checkpoint.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape| Tensor::zeros(shape))
    }

    fn build(config: ModelConfig, mut init: impl FnMut(Init, &[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut blocks = Vec::new();
        let mut attention = Vec::new();

        let mut conv = |params: &mut ParamStore, name: String, c_out: usize, c_in: usize, k: usize| ConvParams {
            weight: params.add(format!("{name}.weight"), init(Init::He(c_in * k), &[c_out, c_in, k])),
            bias: params.add(format!("{name}.bias"), init(Init::Zeros, &[c_out])),
        };
        let bn_slot = |params: &mut ParamStore, name: String, c: usize, running: &mut Vec<Option<RunningStats>>| {
            running.push(Some(RunningStats::standard(c)));
            BatchNormParams {
                gamma: params.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
                beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
                stats_slot: running.len() - 1,
            }
        };

        if config.ablation == Ablation::Full {
            let mut d_in = config.input_dim;
            for (i, &d_hidden) in config.block_widths.iter().enumerate() {
                let conv1 = conv(&mut params, format!("block{i}.conv1"), d_hidden, d_in, 3);
                let bn1 = bn_slot(&mut params, format!("block{i}.bn1"), d_hidden, &mut running);
                let conv2 = conv(&mut params, format!("block{i}.conv2"), d_hidden, d_hidden, 3);
                let bn2 = bn_slot(&mut params, format!("block{i}.bn2"), d_hidden, &mut running);
                let proj = (d_in != d_hidden).then(|| conv(&mut params, format!("block{i}.proj"), d_hidden, d_in, 1));
                blocks.push(ResidualBlock {
                    d_in,
                    d_hidden,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                });
                d_in = d_hidden;
            }
        }
        drop(conv);

        let pooled_widths = match config.ablation {
            Ablation::Full => config.block_widths.clone(),
            Ablation::NoCrfe => vec![config.input_dim],
        };
        let a = config.attention_dim;
        for (i, &d) in pooled_widths.iter().enumerate() {
            attention.push(AttentionSubnet {
                w1: params.add(format!("attn{i}.w1"), init(Init::He(d), &[a, d])),
                b1: params.add(format!("attn{i}.b1"), init(Init::Zeros, &[a])),
                w2: params.add(format!("attn{i}.w2"), init(Init::Lecun(a), &[1, a])),
                b2: params.add(format!("attn{i}.b2"), init(Init::Zeros, &[1])),
            });
        }

        let (d_fused, d_cls) = (config.fused_dim(), config.classifier_dim);
        let head = ClassifierHead {
            w1: params.add("head.w1", init(Init::He(d_fused), &[d_cls, d_fused])),
            b1: params.add("head.b1", init(Init::Zeros, &[d_cls])),
            w2: params.add("head.w2", init(Init::Lecun(d_cls), &[2, d_cls])),
            b2: params.add("head.b2", init(Init::Zeros, &[2])),
            dropout: config.dropout,
        };

        Ok(EmoAntiModel {
            config,
            params,
            blocks,
            attention,
            head,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn attention(&self) -> &[AttentionSubnet] {
        &self.attention
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<RunningStats>] {
        &mut self.running
    }

    /// Folds training-batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &BatchNormUpdates) {
        let momentum = self.config.batchnorm.momentum;
        for (slot, stats) in updates {
            let c = stats.mean.len();
            self.running[*slot]
                .get_or_insert_with(|| RunningStats::standard(c))
                .update(stats, momentum);
        }
    }

    /// Selects (or sums) the configured layers of each utterance, transposes
    /// to channel-major and zero-pads to the longest utterance.
    pub fn prepare_batch(&self, batch: &[&LayerFeatures]) -> Result<InputBatch> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let c = self.config.input_dim;
        let layers = self.config.input_layers();
        for feats in batch {
            if feats.channels() != c {
                return Err(Error::shape("forward", "channels", c, feats.channels()));
            }
            if let Some(&bad) = layers.iter().find(|&&l| l >= feats.num_layers()) {
                return Err(Error::InvalidArgument(format!(
                    "{}: layer index {bad} out of range for {} layers",
                    feats.utt_id,
                    feats.num_layers()
                )));
            }
        }
        let lengths: Vec<usize> = batch.iter().map(|f| f.frames()).collect();
        let t_max = *lengths.iter().max().expect("non-empty");
        let mut data = vec![0.0; batch.len() * c * t_max];
        for (b, feats) in batch.iter().enumerate() {
            let t = feats.frames();
            for &l in &layers {
                let src = feats.layer(l);
                for ti in 0..t {
                    for ch in 0..c {
                        data[(b * c + ch) * t_max + ti] += src[ti * c + ch];
                    }
                }
            }
        }
        let mask = lengths.iter().any(|&t| t != t_max).then(|| {
            lengths
                .iter()
                .flat_map(|&t| (0..t_max).map(move |ti| ti < t))
                .collect()
        });
        Ok(InputBatch {
            inputs: Tensor::new(vec![batch.len(), c, t_max], data)?,
            mask,
            lengths,
        })
    }

    /// Runs the four residual blocks on channel-major `input: [B, C, T]`.
    /// Returns the block intermediates and each block output transposed to
    /// time-major `[B, T, d_hidden]`.
    pub fn crfe_forward(
        &self,
        tape: &mut GradTape,
        params: &BoundParams,
        input: Var,
        mode: Mode,
        updates: &mut BatchNormUpdates,
    ) -> Result<(Vec<BlockActivation>, Vec<Var>)> {
        if self.config.ablation != Ablation::Full {
            return Err(Error::InvalidArgument("model was built without residual blocks".into()));
        }
        let mut x = input;
        let mut acts = Vec::with_capacity(NUM_BLOCKS);
        let mut outputs = Vec::with_capacity(NUM_BLOCKS);
        for block in &self.blocks {
            let act = block.forward(tape, params, &self.running, &self.config.batchnorm, x, mode, updates)?;
            outputs.push(tape.transpose_last2(act.f)?);
            x = act.f;
            acts.push(act);
        }
        Ok((acts, outputs))
    }

    /// Full forward pass on a prepared input recorded on `tape`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape,
        params: &BoundParams,
        input: Var,
        mask: Option<&[bool]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let c = tape.value(input).shape().get(1).copied().unwrap_or(0);
        if c != self.config.input_dim {
            return Err(Error::shape("forward", "channels", self.config.input_dim, c));
        }
        let mut bn_updates = Vec::new();
        let (blocks, pooled_inputs) = match self.config.ablation {
            Ablation::Full => self.crfe_forward(tape, params, input, mode, &mut bn_updates)?,
            Ablation::NoCrfe => (Vec::new(), vec![tape.transpose_last2(input)?]),
        };
        let mut pooled = Vec::with_capacity(pooled_inputs.len());
        for (subnet, &f) in self.attention.iter().zip(&pooled_inputs) {
            pooled.push(subnet.pool(tape, params, f, mask)?);
        }
        let pooled_vars: Vec<Var> = pooled.iter().map(|p| p.pooled).collect();
        let fused = fuse(tape, &pooled_vars)?;
        let logits = self.head.forward(tape, params, fused, mode, rng)?;
        Ok(ForwardPass {
            logits,
            blocks,
            pooled_inputs,
            fusion: FusionState { blocks: pooled, fused },
            bn_updates,
        })
    }

    /// Eval-mode logits and countermeasure score for one utterance.
    pub fn infer(&self, features: &LayerFeatures) -> Result<Inference> {
        let batch = self.prepare_batch(&[features])?;
        let mut tape = GradTape::new();
        let params = self.params.bind(&mut tape);
        let input = tape.leaf(batch.inputs);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, &params, input, None, Mode::Eval, &mut rng)?;
        let l = tape.value(pass.logits).data();
        let logits = [l[BONAFIDE], l[SPOOF]];
        Ok(Inference {
            logits,
            cm_score: cm_score(logits),
        })
    }
}
