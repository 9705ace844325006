//! Adam training loop with per-epoch validation and best-checkpoint
//! retention.

mod adam;

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;

use crate::dataio::{read_features, save_checkpoint, write_atomic, CheckpointHeader, Labeled, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer_from_scores, TrialLabel};
use crate::model::{EmoAntiModel, LayerFeatures, ModelConfig};
use crate::ops::{self, Mode};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Named seed triples used for the three evaluation suites.
pub const SEED_PRESETS: &[(&str, [u64; 3])] = &[
    ("asvspoof2019_la", [43, 44, 45]),
    ("asvspoof2021_la", [43, 45, 456]),
    ("asvspoof2021_df", [46, 47, 78]),
];

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub model: ModelConfig,
    /// Where `best.ckpt` and `history.tsv` are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Learning rate 1e-4, 6 epochs, batch 32, no weight decay.
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 6,
            batch_size: 32,
            seed,
            weight_decay: 0.0,
            model,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// NaN when the validation split lacks one of the classes.
    pub val_eer: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Tab-separated `epoch train_loss val_loss val_eer`, one record per
    /// line after a `#` header. Wall time is not included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# epoch\ttrain_loss\tval_loss\tval_eer\n");
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.val_loss, r.val_eer).expect("write to string");
        }
        out
    }

    /// Record with the strictly lowest validation loss (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model state after the epoch with the lowest validation loss.
    pub best_model: EmoAntiModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: TrainHistory,
    pub best_checkpoint: Option<PathBuf>,
}

/// Labeled utterances that can be loaded by index.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> TrialLabel;
    fn load(&self, index: usize) -> Result<Cow<'_, LayerFeatures>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for [Labeled] {
    fn len(&self) -> usize {
        <[Labeled]>::len(self)
    }

    fn label(&self, index: usize) -> TrialLabel {
        self[index].1
    }

    fn load(&self, index: usize) -> Result<Cow<'_, LayerFeatures>> {
        Ok(Cow::Borrowed(&self[index].0))
    }
}

impl Samples for Vec<Labeled> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> TrialLabel {
        self[index].1
    }

    fn load(&self, index: usize) -> Result<Cow<'_, LayerFeatures>> {
        self.as_slice().load(index)
    }
}

/// Manifest entries whose feature files are read on demand.
impl Samples for [ManifestEntry] {
    fn len(&self) -> usize {
        <[ManifestEntry]>::len(self)
    }

    fn label(&self, index: usize) -> TrialLabel {
        self[index].label
    }

    fn load(&self, index: usize) -> Result<Cow<'_, LayerFeatures>> {
        let entry = &self[index];
        let feats = read_features(&entry.path)?;
        if feats.utt_id != entry.utt_id {
            return Err(Error::InvalidArgument(format!(
                "{}: file holds utterance `{}`, manifest says `{}`",
                entry.path.display(),
                feats.utt_id,
                entry.utt_id
            )));
        }
        Ok(Cow::Owned(feats))
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean eval-mode cross-entropy, countermeasure scores, in sample order.
pub fn evaluate<S: Samples + ?Sized>(model: &EmoAntiModel, samples: &S) -> Result<(f64, Vec<f64>)> {
    let results: Vec<(f64, f64)> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let feats = samples.load(i)?;
            let out = model.infer(&feats)?;
            let logits = Tensor::new(vec![1, 2], out.logits.to_vec())?;
            let loss = ops::cross_entropy(&logits, &[samples.label(i).class_index()])?;
            Ok((loss, out.cm_score))
        })
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    Ok((loss, results.into_iter().map(|r| r.1).collect()))
}

fn eer_of<S: Samples + ?Sized>(samples: &S, scores: &[f64]) -> f64 {
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for (i, &s) in scores.iter().enumerate() {
        match samples.label(i) {
            TrialLabel::Bonafide => bona.push(s),
            TrialLabel::Spoof => spoof.push(s),
        }
    }
    compute_eer_from_scores(&bona, &spoof).map_or(f64::NAN, |e| e.eer)
}

type LoadedBatch = Result<Vec<(LayerFeatures, usize)>>;

/// Trains a fresh model. All randomness (initialization, shuffling,
/// dropout) is derived from `config.seed`.
pub fn train<S, V>(config: &TrainConfig, train_set: &S, val_set: &V) -> Result<TrainOutcome>
where
    S: Samples + ?Sized,
    V: Samples + ?Sized,
{
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    let has = |l| (0..train_set.len()).any(|i| train_set.label(i) == l);
    if !has(TrialLabel::Bonafide) || !has(TrialLabel::Spoof) {
        return Err(Error::Training("training set must contain both bonafide and spoof utterances".into()));
    }
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = EmoAntiModel::new(config.model.clone(), config.seed)?;
    let mut adam = AdamState::new(model.params());
    let mut shuffle_rng = rng_stream(config.seed, 1);
    let mut dropout_rng = rng_stream(config.seed, 2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(EmoAntiModel, usize, f64)> = None;
    let mut best_checkpoint = None;
    let mut tape = GradTape::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        std::thread::scope(|scope| -> Result<()> {
            // bounded prefetch: loading the next batches overlaps compute
            let (tx, rx) = mpsc::sync_channel::<LoadedBatch>(2);
            let batches = &batches;
            scope.spawn(move || {
                for batch in batches {
                    let loaded = batch
                        .iter()
                        .map(|&i| Ok((train_set.load(i)?.into_owned(), train_set.label(i).class_index())))
                        .collect();
                    if tx.send(loaded).is_err() {
                        break;
                    }
                }
            });
            for (step, loaded) in rx.iter().enumerate() {
                let loaded = loaded?;
                let feats: Vec<&LayerFeatures> = loaded.iter().map(|(f, _)| f).collect();
                let labels: Vec<usize> = loaded.iter().map(|(_, l)| *l).collect();
                let batch = model.prepare_batch(&feats)?;

                tape.reset();
                let bound = model.params().bind(&mut tape);
                let input = tape.leaf(batch.inputs);
                let pass = model.forward(&mut tape, &bound, input, batch.mask.as_deref(), Mode::Train, &mut dropout_rng)?;
                let loss_var = tape.cross_entropy(pass.logits, &labels)?;
                let loss = tape.value(loss_var).data()[0];
                if !loss.is_finite() {
                    return Err(Error::Training(format!("epoch {epoch} step {step}: non-finite loss {loss}")));
                }
                let grads = tape.backward(loss_var)?;
                let mut param_grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v).clone()).collect();
                if config.weight_decay > 0.0 {
                    for (g, (_, p)) in param_grads.iter_mut().zip(model.params().iter()) {
                        for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                            *gv += config.weight_decay * pv;
                        }
                    }
                }
                adam.step(model.params_mut(), &param_grads, config.learning_rate)
                    .map_err(|e| Error::Training(format!("epoch {epoch} step {step}: {e}")))?;
                model.apply_bn_updates(&pass.bn_updates);

                loss_sum += loss * labels.len() as f64;
                seen += labels.len();
            }
            Ok(())
        })?;

        let (val_loss, scores) = evaluate(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_eer: eer_of(val_set, &scores),
            wall_time: started.elapsed(),
        };
        log_epoch(&record);

        if best.as_ref().is_none_or(|(_, _, b)| val_loss < *b) {
            if let Some(dir) = &config.checkpoint_dir {
                let path = dir.join(BEST_CHECKPOINT);
                let header = CheckpointHeader {
                    model: model.config().clone(),
                    seed: config.seed,
                    epoch: epoch as u32,
                    val_loss: Some(val_loss),
                };
                save_checkpoint(&path, &model, &header, Some(&adam))?;
                best_checkpoint = Some(path);
            }
            best = Some((model.clone(), epoch, val_loss));
        }
        history.records.push(record);
        if let Some(dir) = &config.checkpoint_dir {
            write_history(&dir.join(HISTORY_FILE), &history)?;
        }
    }

    let (best_model, best_epoch, best_val_loss) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_model,
        best_epoch,
        best_val_loss,
        history,
        best_checkpoint,
    })
}

fn log_epoch(r: &EpochRecord) {
    if std::env::var_os("EMOANTI_QUIET").is_none() {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_eer {:.4}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_eer,
            r.wall_time.as_secs_f64()
        );
    }
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    write_atomic(path, history.to_tsv().as_bytes())
}
