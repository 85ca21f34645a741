//! The `fmtasr` command line: corpus generation, LM pretraining, speech
//! training, decoding, scoring and down-sampling inspection.
//!
//! Commands that produce a directory build it under `<out>.partial` and
//! rename it into place only after every file has been written.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Arch, RunConfig};
use crate::ctc::{blank_posteriors, keep_indices};
use crate::eval::evaluate_corpus;
use crate::models::{read_checkpoint, save_checkpoint, Model, ModelKind};
use crate::synthdata::{
    generate_corpus, read_split, read_text, vocab_path, write_corpus, Utterance,
};
use crate::tokenizer::{TokenId, Vocabulary};
use crate::training::{
    lm_heldout_ce, paired_examples, pretrain_encoder_ctc, pretrain_text_lm, train_asr, MetricsLog,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS: &str = "metrics.tsv";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.tsv";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const LM_CHECKPOINT: &str = "lm.ckpt";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(
    name = "fmtasr",
    version,
    about = "Fully-formatted speech recognition toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus and a text-only corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of training utterances.
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Pretrain the text LM used by an adapted architecture.
    PretrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a speech recognizer.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory (or checkpoint file) written by `pretrain-lm`.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        blank_threshold: Option<f64>,
        #[arg(long)]
        lora_rank: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f64>,
    },
    /// Greedy-decode a corpus split into `<out>/<split>.hyp.tsv`.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or training output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        blank_threshold: Option<f64>,
    },
    /// Score a hypothesis file against a reference file.
    Ter {
        reference: PathBuf,
        hypothesis: PathBuf,
        /// Add one row per utterance.
        #[arg(long)]
        verbose: bool,
        /// Tab-separated output.
        #[arg(long)]
        tsv: bool,
    },
    /// Report how many encoder frames survive blank-threshold down-sampling.
    InspectDownsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        blank_threshold: Option<f64>,
        #[arg(long)]
        verbose: bool,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, utterances } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = utterances {
                cfg.data.train_utterances = n;
            }
            cmd_gen_data(&cfg, common.force)
        }
        Command::PretrainLm {
            common,
            arch,
            data,
            steps,
        } => {
            let mut cfg = load_config(&common)?;
            set(&mut cfg.model.arch, arch);
            set_path(&mut cfg.paths.data, data);
            set(&mut cfg.lm.steps, steps);
            cmd_pretrain_lm(&cfg, common.force)
        }
        Command::Train {
            common,
            arch,
            data,
            lm,
            steps,
            blank_threshold,
            lora_rank,
            lora_alpha,
        } => {
            let mut cfg = load_config(&common)?;
            set(&mut cfg.model.arch, arch);
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.lm, lm);
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.blank_threshold, blank_threshold);
            set(&mut cfg.lora.rank, lora_rank);
            set(&mut cfg.lora.alpha, lora_alpha);
            cmd_train(&cfg, common.force)
        }
        Command::Decode {
            common,
            checkpoint,
            data,
            split,
            blank_threshold,
        } => {
            let mut cfg = load_config(&common)?;
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.data, data);
            set(&mut cfg.decode.split, split);
            if blank_threshold.is_some() {
                cfg.decode.blank_threshold = blank_threshold;
            }
            cmd_decode(&cfg, common.force)
        }
        Command::Ter {
            reference,
            hypothesis,
            verbose,
            tsv,
        } => {
            let report = evaluate_corpus(&reference, &hypothesis)?;
            let text = if tsv {
                report.to_tsv(verbose)
            } else {
                report.to_text(verbose)
            };
            print!("{text}");
            Ok(())
        }
        Command::InspectDownsample {
            common,
            checkpoint,
            data,
            split,
            blank_threshold,
            verbose,
        } => {
            let mut cfg = load_config(&common)?;
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.data, data);
            set(&mut cfg.decode.split, split);
            if blank_threshold.is_some() {
                cfg.decode.blank_threshold = blank_threshold;
            }
            cmd_inspect_downsample(&cfg, verbose)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set_path(&mut cfg.paths.out, common.out.clone());
    cfg.sync_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("missing --{flag} (or paths.{flag} in the config)"))
}

/// An output directory under construction at `<out>.partial`.
struct Staged {
    out: PathBuf,
    partial: PathBuf,
}

impl Staged {
    fn new(out: &Path, force: bool) -> anyhow::Result<Self> {
        if out.exists() && !force && fs::read_dir(out)?.next().is_some() {
            bail!(
                "output directory {} exists and is not empty (use --force to replace it)",
                out.display()
            );
        }
        let mut name = out.as_os_str().to_owned();
        name.push(".partial");
        let partial = PathBuf::from(name);
        if partial.exists() {
            fs::remove_dir_all(&partial)?;
        }
        fs::create_dir_all(&partial)
            .with_context(|| format!("cannot create {}", partial.display()))?;
        Ok(Staged {
            out: out.to_path_buf(),
            partial,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.partial.join(name)
    }

    fn commit(self) -> anyhow::Result<()> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out)?;
        }
        fs::rename(&self.partial, &self.out)?;
        Ok(())
    }
}

fn write_resolved(path: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::write(path, cfg.to_flat_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let staged = Staged::new(out, force)?;
    let corpus = generate_corpus(&cfg.corpus_config())?;
    write_corpus(&staged.partial, &corpus)?;
    write_resolved(&staged.path(RESOLVED_CONFIG), cfg)?;
    staged.commit()?;
    eprintln!(
        "wrote corpus to {} ({} train utterances, {} text sentences, vocabulary {})",
        out.display(),
        cfg.data.train_utterances,
        corpus.text.len(),
        corpus.vocab.len()
    );
    Ok(())
}

fn load_vocab(data: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(&vocab_path(data))
        .with_context(|| format!("cannot read the vocabulary of corpus {}", data.display()))
}

#[derive(Debug, Serialize)]
struct LmSummary {
    kind: ModelKind,
    steps: usize,
    parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dev_ce: Option<f64>,
    seconds: f64,
}

pub fn cmd_pretrain_lm(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    cfg.validate()?;
    let kind = cfg
        .model
        .arch
        .lm_kind()
        .context("pretrain-lm needs --arch encdec or --arch deconly")?;
    let data = required(&cfg.paths.data, "data")?;
    let out = required(&cfg.paths.out, "out")?;
    let vocab = load_vocab(data)?;
    let texts = read_text(data)?;
    let staged = Staged::new(out, force)?;
    write_resolved(&staged.path(RESOLVED_CONFIG), cfg)?;
    let start = Instant::now();
    let model_cfg = cfg.model_config(kind, vocab.len(), cfg.data.input_dim);
    let mut file = BufWriter::new(File::create(staged.path(METRICS))?);
    let model = {
        let mut log = MetricsLog::new(cfg.lm.log_interval, Some(&mut file));
        pretrain_text_lm::<f32>(&texts, &vocab, model_cfg, &cfg.lm, &mut log)?
    };
    file.flush()?;
    save_checkpoint(
        &staged.path(LM_CHECKPOINT),
        &model,
        &vocab,
        cfg.lm.steps as u64,
    )?;
    let dev_ce = if kind == ModelKind::DeconlyLm {
        let dev: Vec<String> = read_split(data, "dev")?
            .into_iter()
            .map(|u| u.written)
            .collect();
        (!dev.is_empty())
            .then(|| lm_heldout_ce(&model, &dev, &vocab))
            .transpose()?
    } else {
        None
    };
    write_json(
        &staged.path(SUMMARY),
        &LmSummary {
            kind,
            steps: cfg.lm.steps,
            parameters: model.store.num_params(),
            dev_ce,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    staged.commit()?;
    eprintln!("wrote {kind:?} LM to {}", out.display());
    Ok(())
}

/// Resolves a checkpoint argument that may name a run directory.
fn checkpoint_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

/// Blank-threshold prompt lengths over a set of utterances.
#[derive(Debug, Clone, Serialize)]
pub struct PromptStats {
    pub threshold: f64,
    pub utterances: usize,
    pub mean_encoder_frames: f64,
    pub mean_kept: f64,
    pub min_kept: usize,
    pub max_kept: usize,
    pub kept_ratio: f64,
}

fn prompt_lengths(
    model: &Model<f32>,
    utts: &[Utterance],
    threshold: f64,
) -> anyhow::Result<(PromptStats, Vec<(usize, usize)>)> {
    let mut rows = Vec::with_capacity(utts.len());
    for u in utts {
        let lattice = model.lattice(&u.frames)?;
        let kept = keep_indices(&blank_posteriors(&lattice), threshold)?;
        rows.push((lattice.frames(), kept.len()));
    }
    let n = rows.len().max(1) as f64;
    let frames: usize = rows.iter().map(|r| r.0).sum();
    let kept: usize = rows.iter().map(|r| r.1).sum();
    let stats = PromptStats {
        threshold,
        utterances: rows.len(),
        mean_encoder_frames: frames as f64 / n,
        mean_kept: kept as f64 / n,
        min_kept: rows.iter().map(|r| r.1).min().unwrap_or(0),
        max_kept: rows.iter().map(|r| r.1).max().unwrap_or(0),
        kept_ratio: kept as f64 / frames.max(1) as f64,
    };
    Ok((stats, rows))
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    arch: Arch,
    steps: usize,
    encoder_pretrain_steps: usize,
    trainable_parameters: usize,
    parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lm_tensors_loaded: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_length: Option<PromptStats>,
    seconds: f64,
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    cfg.validate()?;
    let arch = cfg.model.arch;
    let data = required(&cfg.paths.data, "data")?;
    let out = required(&cfg.paths.out, "out")?;
    let lm = match arch.lm_kind() {
        Some(expected) => {
            let dir = cfg
                .paths
                .lm
                .as_deref()
                .with_context(|| format!("--arch {arch:?} needs a pretrained LM (--lm)"))?;
            let file = checkpoint_file(dir, LM_CHECKPOINT);
            if !file.exists() {
                bail!("LM checkpoint {} not found", file.display());
            }
            let ckpt = read_checkpoint::<f32>(&file)?;
            if ckpt.model.kind() != expected {
                bail!(
                    "{} holds a {:?} model; --arch {arch:?} needs {expected:?}",
                    file.display(),
                    ckpt.model.kind()
                );
            }
            Some(ckpt)
        }
        None => None,
    };
    let vocab = load_vocab(data)?;
    if let Some(l) = &lm {
        if l.vocab.hash() != vocab.hash() {
            bail!(
                "the LM was trained with a different vocabulary than corpus {}",
                data.display()
            );
        }
    }
    let train = read_split(data, "train")?;
    let input_dim = train
        .first()
        .map(|u| u.frames.dim)
        .context("training split is empty")?;
    let examples = paired_examples(&train, &vocab);
    let texts: Vec<Vec<TokenId>> = if arch == Arch::Encdec {
        read_text(data)?.iter().map(|t| vocab.encode(t)).collect()
    } else {
        Vec::new()
    };

    let staged = Staged::new(out, force)?;
    write_resolved(&staged.path(RESOLVED_CONFIG), cfg)?;
    let start = Instant::now();
    let model_cfg = cfg.model_config(arch.speech_kind(), vocab.len(), input_dim);
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let lm_tensors_loaded = match &lm {
        Some(l) => Some(model.load_lm(&l.model)?),
        None => None,
    };
    let mut encoder_pretrain_steps = 0;
    if arch == Arch::Deconly {
        model.attach_lora(&cfg.lora, cfg.seed)?;
        encoder_pretrain_steps = cfg.train.encoder_pretrain_steps;
        let mut file = BufWriter::new(File::create(staged.path(PRETRAIN_METRICS))?);
        let mut log = MetricsLog::new(cfg.train.log_interval, Some(&mut file));
        model = pretrain_encoder_ctc(
            model,
            &examples,
            encoder_pretrain_steps,
            &cfg.train,
            &mut log,
        )?;
        drop(log);
        file.flush()?;
    }
    let mut file = BufWriter::new(File::create(staged.path(METRICS))?);
    let model = {
        let mut log = MetricsLog::new(cfg.train.log_interval, Some(&mut file));
        let partial = staged.partial.clone();
        train_asr(model, &examples, &texts, &cfg.train, &mut log, |m, step| {
            save_checkpoint(
                &partial.join(format!("step-{step}.ckpt")),
                m,
                &vocab,
                step as u64,
            )
        })?
    };
    file.flush()?;
    save_checkpoint(
        &staged.path(MODEL_CHECKPOINT),
        &model,
        &vocab,
        cfg.train.steps as u64,
    )?;
    let prompt_length = if arch == Arch::Deconly {
        let mut utts = read_split(data, "dev")?;
        if utts.is_empty() {
            utts = train;
        }
        let (stats, _) = prompt_lengths(&model, &utts, model.config.blank_threshold)?;
        eprintln!(
            "prompt length at threshold {}: mean {:.1} of {:.1} encoder frames (min {}, max {})",
            stats.threshold,
            stats.mean_kept,
            stats.mean_encoder_frames,
            stats.min_kept,
            stats.max_kept
        );
        Some(stats)
    } else {
        None
    };
    write_json(
        &staged.path(SUMMARY),
        &TrainSummary {
            arch,
            steps: cfg.train.steps,
            encoder_pretrain_steps,
            trainable_parameters: model.store.num_trainable(),
            parameters: model.store.num_params(),
            lm_tensors_loaded,
            prompt_length,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    staged.commit()?;
    eprintln!("wrote {arch:?} model to {}", out.display());
    Ok(())
}

fn load_speech_model(cfg: &RunConfig) -> anyhow::Result<(Model<f32>, Vocabulary)> {
    let path = checkpoint_file(
        required(&cfg.paths.checkpoint, "checkpoint")?,
        MODEL_CHECKPOINT,
    );
    let ckpt = read_checkpoint::<f32>(&path)?;
    let mut model = ckpt.model;
    if !model.kind().has_speech() {
        bail!(
            "{} holds a {:?} model, not a speech model",
            path.display(),
            model.kind()
        );
    }
    if let Some(t) = cfg.decode.blank_threshold {
        if !(t > 0.0 && t <= 1.0) {
            bail!("blank threshold {t} outside (0, 1]");
        }
        model.config.blank_threshold = t;
    }
    Ok((model, ckpt.vocab))
}

/// Decodes `utts` into `id<TAB>text` lines (one per utterance, possibly
/// with empty text).
pub fn decode_lines(
    model: &Model<f32>,
    vocab: &Vocabulary,
    utts: &[Utterance],
) -> anyhow::Result<String> {
    let mut out = String::new();
    for u in utts {
        let ids = model
            .greedy_decode(&u.frames)
            .with_context(|| format!("decoding {}", u.id))?;
        let text = vocab.decode(&ids)?;
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        out.push_str(&format!("{}\t{}\n", u.id, text));
    }
    Ok(out)
}

pub fn cmd_decode(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let (model, vocab) = load_speech_model(cfg)?;
    let data = required(&cfg.paths.data, "data")?;
    let out = required(&cfg.paths.out, "out")?;
    let split = &cfg.decode.split;
    let data_vocab = load_vocab(data)?;
    if data_vocab.hash() != vocab.hash() {
        bail!(
            "checkpoint vocabulary differs from corpus {}",
            data.display()
        );
    }
    let utts = read_split(data, split)?;
    let hyp = out.join(format!("{split}.hyp.tsv"));
    if hyp.exists() && !force {
        bail!("{} exists (use --force to replace it)", hyp.display());
    }
    fs::create_dir_all(out)?;
    let text = decode_lines(&model, &vocab, &utts)?;
    let partial = out.join(format!("{split}.hyp.tsv.partial"));
    fs::write(&partial, text)?;
    write_resolved(&out.join(format!("{split}.{RESOLVED_CONFIG}")), cfg)?;
    fs::rename(&partial, &hyp)?;
    eprintln!("wrote {} lines to {}", utts.len(), hyp.display());
    Ok(())
}

pub fn cmd_inspect_downsample(cfg: &RunConfig, verbose: bool) -> anyhow::Result<()> {
    let (model, _) = load_speech_model(cfg)?;
    let data = required(&cfg.paths.data, "data")?;
    let utts = read_split(data, &cfg.decode.split)?;
    let (stats, rows) = prompt_lengths(&model, &utts, model.config.blank_threshold)?;
    if verbose {
        println!("id\tencoder_frames\tkept");
        for (u, (t, k)) in utts.iter().zip(&rows) {
            println!("{}\t{t}\t{k}", u.id);
        }
    }
    println!(
        "threshold {} utterances {} mean_encoder_frames {:.2} mean_kept {:.2} min_kept {} max_kept {} kept_ratio {:.4}",
        stats.threshold,
        stats.utterances,
        stats.mean_encoder_frames,
        stats.mean_kept,
        stats.min_kept,
        stats.max_kept,
        stats.kept_ratio
    );
    Ok(())
}
