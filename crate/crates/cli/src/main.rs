use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use emoanti::dataio::{
    self, join_with_key, load_checkpoint, read_feature_header, read_key, read_manifest, read_scores, synth_gen,
    write_atomic, write_scores, SynthConfig, CHECKPOINT_MAGIC, FEATURE_MAGIC, HIGH_SEPARATION,
};
use emoanti::metrics::{compute_eer, compute_min_tdcf, split_scores, TdcfMode, TdcfParams};
use emoanti::model::{Ablation, ModelConfig};
use emoanti::trainer::{train, TrainConfig, BEST_CHECKPOINT, HISTORY_FILE};

const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "emoanti", version, about = "Spoofed-speech detection back-end")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, env = "EMOANTI_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train a model from train/val manifests.
    Train(TrainArgs),
    /// Score every utterance of a manifest with a checkpoint.
    Score(ScoreArgs),
    /// Compute EER and min t-DCF for a score file against a key.
    Eval(EvalArgs),
    /// Print the header of a feature file or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 43)]
    seed: u64,
    #[arg(long, default_value_t = HIGH_SEPARATION)]
    separation: f64,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    val_per_class: usize,
    #[arg(long, default_value_t = 40)]
    min_frames: usize,
    #[arg(long, default_value_t = 60)]
    max_frames: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Output directory for the checkpoint, history and run config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 43)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Input layer; defaults to the last layer of the features.
    #[arg(long)]
    layer_index: Option<usize>,
    /// Comma-separated layers summed into the first block instead of a single layer.
    #[arg(long, value_delimiter = ',')]
    layer_taps: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    d_hidden: usize,
    /// Attention subnet width; defaults to half of --d-hidden.
    #[arg(long)]
    attention_dim: Option<usize>,
    #[arg(long, default_value_t = 256)]
    classifier_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    #[serde(serialize_with = "display")]
    ablation: Ablation,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Score file to write; the run config is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Cost/prior file; the shipped ASVspoof 2019 LA preset is used otherwise.
    #[arg(long)]
    tdcf_params: Option<PathBuf>,
    #[arg(long, default_value = "legacy", value_parser = parse_tdcf_mode)]
    #[serde(serialize_with = "display")]
    tdcf_mode: TdcfMode,
    /// Also write the report (and its run config) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    path: PathBuf,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: emoanti::Error| e.to_string())
}

fn parse_tdcf_mode(s: &str) -> Result<TdcfMode, String> {
    s.parse().map_err(|e: emoanti::Error| e.to_string())
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Bad invocation, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("{what} `{}` not found", path.display())).into());
    }
    Ok(())
}

fn write_run_config<T: Serialize>(path: &Path, command: &str, threads: usize, args: &T) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct RunConfig<'a, T> {
        command: &'a str,
        version: &'a str,
        threads: usize,
        args: &'a T,
    }
    let cfg = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads,
        args,
    };
    let mut text = serde_json::to_string_pretty(&cfg)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Synth(a) => synth(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Score(a) => score(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Inspect(a) => inspect(a),
    }
}

fn synth(a: SynthArgs, threads: usize) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        channels: a.channels,
        layers: a.layers,
        separation: a.separation,
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = synth_gen(&cfg, &a.out)?;
    write_run_config(&a.out.join(RUN_CONFIG), "synth", threads, &a)?;
    println!("wrote {} feature files", out.files);
    println!("train manifest: {}", out.train_manifest.display());
    println!("val manifest:   {}", out.val_manifest.display());
    println!("train key:      {}", out.train_key.display());
    println!("val key:        {}", out.val_key.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, threads: usize) -> anyhow::Result<()> {
    require_file(&a.train, "training manifest")?;
    require_file(&a.val, "validation manifest")?;
    let train_set = read_manifest(&a.train)?;
    let val_set = read_manifest(&a.val)?;
    let first = train_set.first().context("training manifest is empty")?;
    let header = read_feature_header(&first.path)?;

    let layer_index = a.layer_index.unwrap_or(header.layers.saturating_sub(1));
    for &l in std::iter::once(&layer_index).chain(&a.layer_taps) {
        if l >= header.layers {
            return Err(Usage(format!("layer {l} out of range: features have {} layers", header.layers)).into());
        }
    }
    let mut model = ModelConfig::with_hidden(header.channels, layer_index, a.d_hidden);
    model.layer_taps = a.layer_taps.clone();
    if let Some(d) = a.attention_dim {
        model.attention_dim = d;
    }
    model.classifier_dim = a.classifier_dim;
    model.dropout = a.dropout;
    model.ablation = a.ablation;

    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        weight_decay: a.weight_decay,
        model,
        checkpoint_dir: Some(a.out.clone()),
    };
    config.validate().map_err(|e| Usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        cli: &'a TrainArgs,
        resolved: &'a TrainConfig,
    }
    write_run_config(
        &a.out.join(RUN_CONFIG),
        "train",
        threads,
        &Resolved {
            cli: &a,
            resolved: &config,
        },
    )?;

    let outcome = train(&config, train_set.as_slice(), val_set.as_slice())?;
    println!(
        "best epoch {} (val loss {}), checkpoint {}, history {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        a.out.join(BEST_CHECKPOINT).display(),
        a.out.join(HISTORY_FILE).display()
    );
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    path.with_file_name(name)
}

fn score(a: ScoreArgs, threads: usize) -> anyhow::Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.manifest, "manifest")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let entries = read_manifest(&a.manifest)?;
    let model = &ckpt.model;
    let scores: Vec<(String, f64)> = entries
        .par_iter()
        .map(|e| {
            let feats = dataio::read_features(&e.path)?;
            let out = model.infer(&feats).with_context(|| format!("scoring `{}`", e.utt_id))?;
            Ok((e.utt_id.clone(), out.cm_score))
        })
        .collect::<anyhow::Result<_>>()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_scores(&a.out, &scores)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        cli: &'a ScoreArgs,
        model: &'a ModelConfig,
        checkpoint_epoch: u32,
    }
    write_run_config(
        &sidecar(&a.out),
        "score",
        threads,
        &Resolved {
            cli: &a,
            model: model.config(),
            checkpoint_epoch: ckpt.header.epoch,
        },
    )?;
    println!("scored {} utterances ({} ablation) -> {}", scores.len(), model.config().ablation, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, threads: usize) -> anyhow::Result<()> {
    require_file(&a.scores, "score file")?;
    require_file(&a.key, "key file")?;
    let params = match &a.tdcf_params {
        Some(p) => {
            require_file(p, "t-DCF parameter file")?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TdcfParams::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TdcfParams::asvspoof2019_la(),
    };
    let scores = read_scores(&a.scores)?;
    let key = read_key(&a.key)?;
    let records = join_with_key(&scores, &key)?;
    let (bona, spoof) = split_scores(&records)?;
    let eer = compute_eer(&records)?;
    let costs = params.costs(a.tdcf_mode)?;
    let tdcf = compute_min_tdcf(&records, &costs)?;

    let mut report = String::new();
    report.push_str(&format!("scores      {}\n", a.scores.display()));
    report.push_str(&format!("key         {}\n", a.key.display()));
    report.push_str(&format!("trials      {} ({} bonafide, {} spoof)\n", records.len(), bona.len(), spoof.len()));
    report.push_str(&format!("EER         {:.4}  ({:.2}%, threshold {})\n", eer.eer, 100.0 * eer.eer, eer.threshold));
    report.push_str(&format!("min t-DCF   {:.4}  ({}, threshold {})\n", tdcf.value, a.tdcf_mode, tdcf.threshold));
    report.push_str(&format!("EER={} MIN_TDCF={}\n", eer.eer, tdcf.value));
    print!("{report}");

    if let Some(path) = &a.report {
        write_atomic(path, report.as_bytes())?;
        write_run_config(&sidecar(path), "eval", threads, &a)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    require_file(&a.path, "file")?;
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(&a.path).with_context(|| format!("opening {}", a.path.display()))?;
        f.read_exact(&mut magic)
            .with_context(|| format!("{}: too short to identify", a.path.display()))?;
    }
    if magic == FEATURE_MAGIC {
        let h = read_feature_header(&a.path)?;
        println!("kind        feature file");
        println!("version     {}", h.version);
        println!("utt_id      {}", h.utt_id);
        println!("layers      {}", h.layers);
        println!("frames      {}", h.frames);
        println!("channels    {}", h.channels);
    } else if magic == CHECKPOINT_MAGIC {
        let ckpt = load_checkpoint(&a.path)?;
        println!("kind        checkpoint");
        println!("epoch       {}", ckpt.header.epoch);
        println!("seed        {}", ckpt.header.seed);
        match ckpt.header.val_loss {
            Some(v) => println!("val_loss    {v}"),
            None => println!("val_loss    -"),
        }
        println!("parameters  {}", ckpt.model.params().numel());
        match &ckpt.adam {
            Some(s) => println!("optimizer   adam, step {}", s.timestep()),
            None => println!("optimizer   -"),
        }
        println!("model       {}", serde_json::to_string(ckpt.model.config())?);
    } else {
        bail!("{}: unrecognized file magic {:?}", a.path.display(), String::from_utf8_lossy(&magic));
    }
    Ok(())
}
