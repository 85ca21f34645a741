//! Run configuration for the command-line recipes.
//!
//! Files are TOML and may use sections or dotted keys (`train.steps = 500`).
//! Unknown keys are rejected. The resolved configuration is written back
//! as one `section.key = value` line per setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BridgeMode, EncoderConfig, LoraConfig, ModelConfig, ModelKind, StackConfig};
use crate::synthdata::{CorpusConfig, GrammarConfig};
use crate::tokenizer::VocabMode;
use crate::training::TrainConfig;

/// Speech architecture selected with `--arch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Baseline,
    Encdec,
    Deconly,
}

impl Arch {
    pub fn speech_kind(self) -> ModelKind {
        match self {
            Arch::Baseline => ModelKind::Baseline,
            Arch::Encdec => ModelKind::Encdec,
            Arch::Deconly => ModelKind::Deconly,
        }
    }

    /// The text LM an adapted architecture starts from.
    pub fn lm_kind(self) -> Option<ModelKind> {
        match self {
            Arch::Baseline => None,
            Arch::Encdec => Some(ModelKind::EncdecLm),
            Arch::Deconly => Some(ModelKind::DeconlyLm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub text_sentences: usize,
    pub input_dim: usize,
    pub sigma_clean: f64,
    pub sigma_hard: f64,
    pub vocab_mode: VocabMode,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        DataSection {
            train_utterances: c.train_utterances,
            dev_utterances: c.dev_utterances,
            test_utterances: c.test_utterances,
            text_sentences: c.text_sentences,
            input_dim: c.input_dim,
            sigma_clean: c.sigma_clean,
            sigma_hard: c.sigma_hard,
            vocab_mode: c.vocab_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    /// Layers of the baseline's cross-attending decoder.
    pub decoder_layers: usize,
    /// Layers of the pretrained text LM (and of every model built on it).
    pub lm_layers: usize,
    pub text_encoder_layers: usize,
    pub bridge: BridgeMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::Baseline,
            embed_dim: 128,
            heads: 4,
            ffn_dim: 512,
            encoder_layers: 4,
            decoder_layers: 4,
            lm_layers: 4,
            text_encoder_layers: 4,
            bridge: BridgeMode::Soft,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub split: String,
    /// Overrides the checkpoint's blank threshold when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blank_threshold: Option<f64>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            split: "test_clean".into(),
            blank_threshold: None,
        }
    }
}

/// Every knob of every command. `lm` holds the text-LM pretraining
/// schedule, `train` the speech training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub lora: LoraConfig,
    pub lm: TrainConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            lora: LoraConfig::default(),
            lm: TrainConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into the schedules.
    pub fn sync_seeds(&mut self) {
        self.lm.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let d = &self.data;
        CorpusConfig {
            seed: self.seed,
            train_utterances: d.train_utterances,
            dev_utterances: d.dev_utterances,
            test_utterances: d.test_utterances,
            text_sentences: d.text_sentences,
            input_dim: d.input_dim,
            sigma_clean: d.sigma_clean,
            sigma_hard: d.sigma_hard,
            vocab_mode: d.vocab_mode,
            grammar: GrammarConfig::default(),
        }
    }

    /// Model configuration for `kind`. LoRA is left detached; the training
    /// recipe attaches it after loading the LM.
    pub fn model_config(
        &self,
        kind: ModelKind,
        vocab_size: usize,
        input_dim: usize,
    ) -> ModelConfig {
        let m = &self.model;
        let stack = |layers| StackConfig {
            layers,
            embed_dim: m.embed_dim,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
        };
        ModelConfig {
            kind,
            vocab_size,
            encoder: EncoderConfig {
                input_dim,
                conv_layers: 2,
                layers: m.encoder_layers,
                embed_dim: m.embed_dim,
                heads: m.heads,
                ffn_dim: m.ffn_dim,
            },
            decoder: stack(if kind == ModelKind::Baseline {
                m.decoder_layers
            } else {
                m.lm_layers
            }),
            text_encoder_layers: m.text_encoder_layers,
            lora: None,
            bridge: m.bridge,
            blank_threshold: self.train.blank_threshold,
        }
    }

    /// Flat `section.key = value` rendering, one setting per line.
    pub fn to_flat_toml(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        v => out.push(format!("{prefix} = {v}")),
    }
}
