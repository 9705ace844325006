//! Synthetic hidden-state datasets with a known, temporally localized
//! class signal.
//!
//! Every utterance is a smooth AR(1) process around a per-utterance offset,
//! replicated across layers with layer-specific gain and noise. Spoofed
//! utterances additionally carry a fixed direction vector, scaled by
//! `separation` and shaped by a Hann bump, inside one contiguous window
//! covering a quarter of the utterance. With `separation = 0` both classes
//! are identically distributed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_features, write_key, write_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::TrialLabel;
use crate::model::LayerFeatures;
use crate::tensor::Tensor;

/// Separation of the `high` preset.
pub const HIGH_SEPARATION: f64 = 4.0;

const AR_COEFF: f64 = 0.8;
const OFFSET_STD: f64 = 0.5;
const LAYER_NOISE_STD: f64 = 0.1;
const WINDOW_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub channels: usize,
    pub layers: usize,
    pub separation: f64,
}

impl SynthConfig {
    /// 200+200 training and 100+100 validation utterances of 40-60 frames,
    /// 3 layers of 32 channels, high separation.
    pub fn high_separation(seed: u64) -> Self {
        SynthConfig {
            seed,
            train_per_class: 200,
            val_per_class: 100,
            min_frames: 40,
            max_frames: 60,
            channels: 32,
            layers: 3,
            separation: HIGH_SEPARATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return bad("utterances per class must be positive");
        }
        if self.channels < 2 {
            return bad("need at least 2 channels");
        }
        if self.layers == 0 {
            return bad("need at least 1 layer");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min <= max");
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return bad("separation must be finite and >= 0");
        }
        Ok(())
    }
}

/// A labeled utterance.
pub type Labeled = (LayerFeatures, TrialLabel);

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<Labeled>,
    pub val: Vec<Labeled>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub train_key: PathBuf,
    pub val_key: PathBuf,
    pub files: usize,
}

struct Constants {
    direction: Vec<f64>,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn utterance(cfg: &SynthConfig, k: &Constants, utt_id: String, label: TrialLabel, rng: &mut ChaCha8Rng) -> Result<LayerFeatures> {
    let (c, l) = (cfg.channels, cfg.layers);
    let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let offset: Vec<f64> = (0..c).map(|_| OFFSET_STD * normal(rng)).collect();
    let innovation = (1.0 - AR_COEFF * AR_COEFF).sqrt();

    let mut base = vec![0.0; t * c];
    let mut state: Vec<f64> = (0..c).map(|_| normal(rng)).collect();
    for ti in 0..t {
        for ch in 0..c {
            if ti > 0 {
                state[ch] = AR_COEFF * state[ch] + innovation * normal(rng);
            }
            base[ti * c + ch] = offset[ch] + state[ch];
        }
    }

    // drawn for both classes so the streams stay aligned
    let width = ((t as f64 * WINDOW_FRACTION).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - width);
    if label == TrialLabel::Spoof && cfg.separation > 0.0 {
        for w in 0..width {
            let bump = (std::f64::consts::PI * (w as f64 + 0.5) / width as f64).sin().powi(2);
            let row = &mut base[(start + w) * c..(start + w + 1) * c];
            for (v, d) in row.iter_mut().zip(&k.direction) {
                *v += cfg.separation * bump * d;
            }
        }
    }

    let mut data = Vec::with_capacity(l * t * c);
    for li in 0..l {
        let gain = 1.0 + 0.25 * li as f64;
        for &v in &base {
            data.push(gain * v + LAYER_NOISE_STD * normal(rng));
        }
    }
    LayerFeatures::new(utt_id, Tensor::new(vec![l, t, c], data)?)
}

/// Generates the dataset in memory. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0);
    let constants = Constants {
        direction: (0..cfg.channels).map(|_| normal(&mut rng)).collect(),
    };
    let mut jobs = Vec::new();
    for (split, per_class) in [("train", cfg.train_per_class), ("val", cfg.val_per_class)] {
        for label in [TrialLabel::Bonafide, TrialLabel::Spoof] {
            for i in 0..per_class {
                jobs.push((split, format!("{split}_{label}_{i:04}"), label));
            }
        }
    }
    let utts: Vec<(&str, Labeled)> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(n, (split, id, label))| {
            let mut rng = stream(cfg.seed, n as u64 + 1);
            utterance(cfg, &constants, id, label, &mut rng).map(|f| (split, (f, label)))
        })
        .collect::<Result<_>>()?;
    let (train, val): (Vec<_>, Vec<_>) = utts.into_iter().partition(|(split, _)| *split == "train");
    Ok(SynthDataset {
        train: train.into_iter().map(|(_, u)| u).collect(),
        val: val.into_iter().map(|(_, u)| u).collect(),
    })
}

/// Writes feature files under `out_dir/features/` plus `train.tsv`,
/// `val.tsv` manifests and `train.key`, `val.key` key files.
pub fn synth_gen(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    let data = generate(cfg)?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| crate::error::Error::io(&feat_dir, e))?;
    let mut files = 0;
    let mut write_split = |name: &str, utts: &[Labeled]| -> Result<(PathBuf, PathBuf)> {
        utts.par_iter()
            .try_for_each(|(f, _)| write_features(&feat_dir.join(format!("{}.emof", f.utt_id)), f))?;
        files += utts.len();
        let entries: Vec<ManifestEntry> = utts
            .iter()
            .map(|(f, label)| ManifestEntry {
                utt_id: f.utt_id.clone(),
                path: PathBuf::from("features").join(format!("{}.emof", f.utt_id)),
                label: *label,
            })
            .collect();
        let manifest = out_dir.join(format!("{name}.tsv"));
        write_manifest(&manifest, &entries)?;
        let key = out_dir.join(format!("{name}.key"));
        let pairs: Vec<_> = utts.iter().map(|(f, l)| (f.utt_id.clone(), *l)).collect();
        write_key(&key, &pairs)?;
        Ok((manifest, key))
    };
    let (train_manifest, train_key) = write_split("train", &data.train)?;
    let (val_manifest, val_key) = write_split("val", &data.val)?;
    Ok(SynthOutput {
        train_manifest,
        val_manifest,
        train_key,
        val_key,
        files,
    })
}
