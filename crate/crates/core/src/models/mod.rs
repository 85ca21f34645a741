//! Speech recognizers and text language models.
//!
//! * `Baseline`: speech encoder, CTC head and a cross-attending transformer
//!   decoder (attention encoder-decoder).
//! * `Encdec`: speech encoder and CTC head feeding the decoder of a pretrained
//!   encoder-decoder text LM; the LM's text encoder serves the text-only
//!   branch. Input and output token embeddings are frozen.
//! * `Deconly`: speech encoder, CTC head, blank-threshold down-sampling and
//!   an embedding bridge that turns kept frames into a soft prompt for a
//!   frozen causal LM adapted with LoRA.
//!
//! `EncdecLm` and `DeconlyLm` are the text-only language models that the
//! adapted recognizers are initialized from.
//!
//! Parameter names are grouped by prefix: `speech_encoder.`, `ctc.`,
//! `text_encoder.`, `decoder.`, `lm.` and `lora.`.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{self, PosteriorLattice};
use crate::diffcore::{softmax_rows, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::synthdata::Frames;
use crate::tokenizer::{TokenId, BOS, EOS, NUM_RESERVED};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
use layers::Init;
pub use layers::{add_positions, sinusoid, Linear, LoraAdapter, Projection, Stack, StackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Encdec,
    Deconly,
    EncdecLm,
    DeconlyLm,
}

impl ModelKind {
    pub fn has_speech(self) -> bool {
        matches!(
            self,
            ModelKind::Baseline | ModelKind::Encdec | ModelKind::Deconly
        )
    }

    fn has_cross_decoder(self) -> bool {
        matches!(
            self,
            ModelKind::Baseline | ModelKind::Encdec | ModelKind::EncdecLm
        )
    }

    fn has_text_encoder(self) -> bool {
        matches!(self, ModelKind::Encdec | ModelKind::EncdecLm)
    }

    fn has_lm(self) -> bool {
        matches!(self, ModelKind::Deconly | ModelKind::DeconlyLm)
    }
}

/// How kept speech frames are mapped into the LM's embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// Posterior-weighted mixture of LM input embeddings.
    #[default]
    Soft,
    /// Embedding of the arg-max token; blocks gradients into the encoder.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Strided time convolutions; always 2 (kernel 3, stride 2 each).
    pub conv_layers: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl EncoderConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            embed_dim: self.embed_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers != 2 {
            return Err(Error::Config(format!(
                "encoder needs exactly 2 strided convolutions, got {}",
                self.conv_layers
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        self.stack().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            targets: vec![Projection::Query, Projection::Value],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    /// Decoder of the baseline and the encoder-decoder LM, or the causal LM.
    pub decoder: StackConfig,
    pub text_encoder_layers: usize,
    pub lora: Option<LoraConfig>,
    pub bridge: BridgeMode,
    pub blank_threshold: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 128-dim, 4 heads, 4 encoder and 4 LM layers.
    pub fn toy(kind: ModelKind, vocab_size: usize, input_dim: usize) -> Self {
        ModelConfig {
            kind,
            vocab_size,
            encoder: EncoderConfig {
                input_dim,
                conv_layers: 2,
                layers: 4,
                embed_dim: 128,
                heads: 4,
                ffn_dim: 512,
            },
            decoder: StackConfig {
                layers: 4,
                embed_dim: 128,
                heads: 4,
                ffn_dim: 512,
            },
            text_encoder_layers: 4,
            lora: (kind == ModelKind::Deconly).then(LoraConfig::default),
            bridge: BridgeMode::Soft,
            blank_threshold: ctc::DEFAULT_BLANK_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} too small",
                self.vocab_size
            )));
        }
        if self.kind.has_speech() {
            self.encoder.validate()?;
        }
        self.decoder.validate()?;
        if matches!(self.kind, ModelKind::Baseline | ModelKind::Encdec)
            && self.encoder.embed_dim != self.decoder.embed_dim
        {
            return Err(Error::Config(format!(
                "cross-attention needs equal encoder and decoder widths ({} vs {})",
                self.encoder.embed_dim, self.decoder.embed_dim
            )));
        }
        if !(self.blank_threshold > 0.0 && self.blank_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "blank_threshold {} outside (0, 1]",
                self.blank_threshold
            )));
        }
        if let Some(l) = &self.lora {
            if !self.kind.has_lm() {
                return Err(Error::Config("LoRA applies to decoder-only models".into()));
            }
            if !(l.alpha > 0.0) || l.rank == 0 {
                return Err(Error::Config("LoRA rank and alpha must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `w_ctc · ctc + (1 - w_ctc) · ce`.
pub fn combined_loss(w_ctc: f64, ctc: f64, ce: f64) -> f64 {
    w_ctc * ctc + (1.0 - w_ctc) * ce
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoder {
    pub conv: [(ParamId, ParamId); 2],
    pub stack: Stack,
    pub input_dim: usize,
}

/// Token embedding, transformer stack and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDecoder {
    pub embed: ParamId,
    pub stack: Stack,
    pub out: Linear,
}

/// Parameter layout of a model; values live in [`Model::store`].
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub encoder: Option<SpeechEncoder>,
    pub ctc: Option<Linear>,
    pub text_encoder: Option<Stack>,
    pub decoder: Option<TokenDecoder>,
    pub lm: Option<TokenDecoder>,
}

/// Forward results of a speech model on one utterance.
#[derive(Debug, Clone, Copy)]
pub struct AsrOutputs {
    /// CTC log posteriors, `T' × V`.
    pub log_probs: Var,
    /// CTC negative log-likelihood divided by the target length; `None`
    /// when the target cannot be aligned to the available frames.
    pub ctc_loss: Option<Var>,
    /// Mean next-token cross-entropy over target + eos.
    pub ce_loss: Var,
    /// Number of cross-entropy positions.
    pub ce_positions: usize,
    /// Prompt length after down-sampling (decoder-only models).
    pub prompt_len: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub net: Net,
    /// Name prefixes of frozen parameter groups.
    pub frozen: Vec<String>,
}

fn need<'a, T>(part: &'a Option<T>, what: &str, kind: ModelKind) -> Result<&'a T> {
    part.as_ref()
        .ok_or_else(|| Error::Invalid(format!("{kind:?} model has no {what}")))
}

fn to_real<F: Real>(data: &[f32]) -> Vec<F> {
    data.iter().map(|&x| F::lit(x as f64)).collect()
}

fn token_decoder<F: Real>(
    init: &mut Init<'_, F, ChaCha8Rng>,
    name: &str,
    cfg: &StackConfig,
    vocab: usize,
    cross: bool,
) -> TokenDecoder {
    let embed = init.randn(&format!("{name}.embed"), vec![vocab, cfg.embed_dim], 1.0);
    let stack = Stack::new(init, name, cfg, cross);
    let std = 0.5 / (cfg.embed_dim as f64).sqrt();
    let out = init.linear_std(&format!("{name}.out"), cfg.embed_dim, vocab, std);
    TokenDecoder { embed, stack, out }
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model. LoRA adapters in the config are
    /// attached (and the LM frozen) after the base parameters exist.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let kind = config.kind;
        let v = config.vocab_size;
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = kind.has_speech().then(|| {
            let e = &config.encoder;
            let d = e.embed_dim;
            let c1 = (
                init.randn(
                    "speech_encoder.conv1.w",
                    vec![d, 3 * e.input_dim],
                    1.0 / ((3 * e.input_dim) as f64).sqrt(),
                ),
                init.zeros("speech_encoder.conv1.b", vec![d]),
            );
            let c2 = (
                init.randn(
                    "speech_encoder.conv2.w",
                    vec![d, 3 * d],
                    1.0 / ((3 * d) as f64).sqrt(),
                ),
                init.zeros("speech_encoder.conv2.b", vec![d]),
            );
            SpeechEncoder {
                conv: [c1, c2],
                stack: Stack::new(&mut init, "speech_encoder", &e.stack(), false),
                input_dim: e.input_dim,
            }
        });
        let ctc_head = kind
            .has_speech()
            .then(|| init.linear("ctc", config.encoder.embed_dim, v));
        let text_encoder = kind.has_text_encoder().then(|| {
            let cfg = StackConfig {
                layers: config.text_encoder_layers,
                ..config.decoder.clone()
            };
            Stack::new(&mut init, "text_encoder", &cfg, false)
        });
        let decoder = kind
            .has_cross_decoder()
            .then(|| token_decoder(&mut init, "decoder", &config.decoder, v, true));
        let lm = kind
            .has_lm()
            .then(|| token_decoder(&mut init, "lm", &config.decoder, v, false));
        let mut model = Model {
            config: ModelConfig {
                lora: None,
                ..config.clone()
            },
            store,
            net: Net {
                encoder,
                ctc: ctc_head,
                text_encoder,
                decoder,
                lm,
            },
            frozen: Vec::new(),
        };
        if kind == ModelKind::Encdec {
            model.freeze("decoder.embed");
            model.freeze("decoder.out");
        }
        if let Some(l) = &config.lora {
            model.attach_lora(l, seed ^ 0x10A4)?;
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze(&mut self, prefix: &str) {
        self.store.set_requires_grad(prefix, false);
        if !self.frozen.iter().any(|p| p == prefix) {
            self.frozen.push(prefix.to_string());
        }
    }

    /// Re-applies the frozen flags (e.g. after loading values).
    pub fn apply_frozen(&mut self) {
        for p in self.frozen.clone() {
            self.store.set_requires_grad(&p, false);
        }
    }

    /// Adds LoRA adapters to the targeted attention projections of the
    /// causal LM and freezes the LM's base weights. `B` starts at zero, so
    /// the forward function is unchanged.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.config.lora.is_some() {
            return Err(Error::Invalid("LoRA already attached".into()));
        }
        if cfg.rank == 0 || !(cfg.alpha > 0.0) {
            return Err(Error::Config("LoRA rank and alpha must be positive".into()));
        }
        let Some(lm) = self.net.lm.as_mut() else {
            return Err(Error::Invalid(format!(
                "{:?} model has no causal LM",
                self.config.kind
            )));
        };
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        for layer in &lm.stack.layers {
            for &p in &targets {
                let lin = match p {
                    Projection::Query => &layer.self_attn.q,
                    Projection::Key => &layer.self_attn.k,
                    Projection::Value => &layer.self_attn.v,
                    Projection::Output => &layer.self_attn.o,
                };
                if cfg.rank >= lin.d_in.min(lin.d_out) {
                    return Err(Error::RankNotLow {
                        rank: cfg.rank,
                        d_in: lin.d_in,
                        d_out: lin.d_out,
                    });
                }
            }
        }
        self.store.set_requires_grad("lm.", false);
        if !self.frozen.iter().any(|p| p == "lm.") {
            self.frozen.push("lm.".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut self.store,
            rng: &mut rng,
        };
        for layer in &mut lm.stack.layers {
            for &p in &targets {
                let lin = layer.self_attn.projection_mut(p);
                let base = init.store.name(lin.w).trim_end_matches(".w").to_string();
                let a = init.randn(
                    &format!("lora.{base}.a"),
                    vec![cfg.rank, lin.d_in],
                    1.0 / (lin.d_in as f64).sqrt(),
                );
                let b = init.zeros(&format!("lora.{base}.b"), vec![lin.d_out, cfg.rank]);
                lin.lora = Some(LoraAdapter {
                    a,
                    b,
                    scale: cfg.scale(),
                });
            }
        }
        self.config.lora = Some(LoraConfig {
            targets,
            ..cfg.clone()
        });
        Ok(())
    }

    /// Copies every same-named tensor from `lm` (typically a pretrained
    /// text LM). Returns the number of tensors copied.
    pub fn load_lm(&mut self, lm: &Model<F>) -> Result<usize> {
        let expected = match (self.kind(), lm.kind()) {
            (ModelKind::Encdec, ModelKind::EncdecLm)
            | (ModelKind::Deconly, ModelKind::DeconlyLm) => true,
            _ => false,
        };
        if !expected {
            return Err(Error::MissingLm(format!(
                "a {:?} model cannot be initialized from a {:?} checkpoint",
                self.kind(),
                lm.kind()
            )));
        }
        if lm.config.decoder != self.config.decoder
            || lm.config.vocab_size != self.config.vocab_size
        {
            return Err(Error::MissingLm(
                "LM dimensions do not match the model config".into(),
            ));
        }
        let n = self.store.load_matching(&lm.store)?;
        self.apply_frozen();
        Ok(n)
    }

    /// Runs the speech encoder: two stride-2 convolutions (GELU) then the
    /// transformer stack. Output has `ceil(ceil(T/2)/2)` rows.
    pub fn encode_speech(&self, g: &mut Graph<'_, F>, frames: &Frames) -> Result<Var> {
        let enc = need(&self.net.encoder, "speech encoder", self.kind())?;
        if frames.rows < 4 {
            return Err(Error::UtteranceTooShort(frames.rows));
        }
        if frames.dim != enc.input_dim {
            return Err(Error::Shape {
                op: "encode_speech",
                lhs: vec![frames.rows, frames.dim],
                rhs: vec![enc.input_dim],
            });
        }
        let mut x = g.input(vec![frames.rows, frames.dim], to_real(&frames.data))?;
        for &(w, b) in &enc.conv {
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv1d(x, w, b, 3, 2, 1)?;
            x = g.gelu(x);
        }
        let x = add_positions(g, x, 0)?;
        enc.stack.forward(g, x, None, false)
    }

    /// CTC logits over the vocabulary for encoder states.
    pub fn ctc_logits(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        need(&self.net.ctc, "CTC head", self.kind())?.forward(g, hidden)
    }

    fn ctc_term(
        &self,
        g: &mut Graph<'_, F>,
        log_probs: Var,
        spoken: &[TokenId],
    ) -> Result<Option<Var>> {
        if spoken.is_empty() || ctc::min_frames(spoken) > g.rows(log_probs) {
            return Ok(None);
        }
        let nll = g.ctc_loss(log_probs, spoken)?;
        Ok(Some(g.scale(
            nll,
            F::one() / F::from_usize(spoken.len()).unwrap(),
        )))
    }

    fn embed_tokens(
        &self,
        g: &mut Graph<'_, F>,
        dec: &TokenDecoder,
        ids: &[TokenId],
    ) -> Result<Var> {
        let table = g.param(dec.embed);
        g.embedding(table, ids)
    }

    /// Logits of the cross-attending decoder for input ids given `memory`.
    pub fn decoder_logits(
        &self,
        g: &mut Graph<'_, F>,
        ids: &[TokenId],
        memory: Var,
    ) -> Result<Var> {
        let dec = need(&self.net.decoder, "decoder", self.kind())?;
        let x = self.embed_tokens(g, dec, ids)?;
        let x = add_positions(g, x, 0)?;
        let h = dec.stack.forward(g, x, Some(memory), true)?;
        dec.out.forward(g, h)
    }

    fn teacher_forced(target: &[TokenId]) -> (Vec<TokenId>, Vec<Option<TokenId>>) {
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS);
        input.extend_from_slice(target);
        let mut labels: Vec<Option<TokenId>> = target.iter().map(|&t| Some(t)).collect();
        labels.push(Some(EOS));
        (input, labels)
    }

    /// Baseline (and encoder-decoder LM) forward: CTC on the encoder and
    /// teacher-forced cross-entropy `bos+target -> target+eos`.
    pub fn aed_forward(
        &self,
        g: &mut Graph<'_, F>,
        frames: &Frames,
        spoken: &[TokenId],
        target: &[TokenId],
    ) -> Result<AsrOutputs> {
        if !matches!(self.kind(), ModelKind::Baseline | ModelKind::Encdec) {
            return Err(Error::Invalid(format!(
                "aed_forward on a {:?} model",
                self.kind()
            )));
        }
        if target.is_empty() {
            return Err(Error::Invalid("empty target".into()));
        }
        let h = self.encode_speech(g, frames)?;
        let logits = self.ctc_logits(g, h)?;
        let log_probs = g.log_softmax(logits);
        let ctc_loss = self.ctc_term(g, log_probs, spoken)?;
        let (input, labels) = Self::teacher_forced(target);
        let out = self.decoder_logits(g, &input, h)?;
        let ce_loss = g.cross_entropy(out, &labels)?;
        Ok(AsrOutputs {
            log_probs,
            ctc_loss,
            ce_loss,
            ce_positions: labels.len(),
            prompt_len: None,
        })
    }

    /// Encoder-decoder LM composition; same wiring as [`Model::aed_forward`].
    pub fn encdec_forward(
        &self,
        g: &mut Graph<'_, F>,
        frames: &Frames,
        spoken: &[TokenId],
        target: &[TokenId],
    ) -> Result<AsrOutputs> {
        if self.kind() != ModelKind::Encdec {
            return Err(Error::Invalid(format!(
                "encdec_forward on a {:?} model",
                self.kind()
            )));
        }
        self.aed_forward(g, frames, spoken, target)
    }

    /// Text encoder states for a token sequence (shares the decoder's input
    /// embedding table).
    pub fn encode_text(&self, g: &mut Graph<'_, F>, ids: &[TokenId]) -> Result<Var> {
        let enc = need(&self.net.text_encoder, "text encoder", self.kind())?;
        let dec = need(&self.net.decoder, "decoder", self.kind())?;
        let x = self.embed_tokens(g, dec, ids)?;
        let x = add_positions(g, x, 0)?;
        enc.forward(g, x, None, false)
    }

    /// Masked-LM loss: the text encoder reads `masked`; the decoder, fed the
    /// original sequence shifted right, predicts the original token at every
    /// masked position (`labels[i]` is `Some` exactly there).
    pub fn text_mlm_forward(
        &self,
        g: &mut Graph<'_, F>,
        masked: &[TokenId],
        labels: &[Option<TokenId>],
    ) -> Result<Var> {
        if masked.len() != labels.len() {
            return Err(Error::Shape {
                op: "text_mlm_forward",
                lhs: vec![masked.len()],
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().all(Option::is_none) {
            return Err(Error::EmptyMlmBatch);
        }
        let memory = self.encode_text(g, masked)?;
        let mut input = Vec::with_capacity(masked.len());
        input.push(BOS);
        for (m, l) in masked.iter().zip(labels).take(masked.len() - 1) {
            input.push(l.unwrap_or(*m));
        }
        let out = self.decoder_logits(g, &input, memory)?;
        g.cross_entropy(out, labels)
    }

    /// Logits of the causal LM for a sequence of input embeddings.
    pub fn lm_logits_from_embeddings(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let lm = need(&self.net.lm, "causal LM", self.kind())?;
        let x = add_positions(g, x, 0)?;
        let h = lm.stack.forward(g, x, None, true)?;
        lm.out.forward(g, h)
    }

    pub fn lm_embed(&self, g: &mut Graph<'_, F>, ids: &[TokenId]) -> Result<Var> {
        let lm = need(&self.net.lm, "causal LM", self.kind())?;
        self.embed_tokens(g, lm, ids)
    }

    /// Causal LM loss over `inputs`, where row `i` is scored against
    /// `targets[i]` when present.
    pub fn lm_loss(
        &self,
        g: &mut Graph<'_, F>,
        inputs: &[TokenId],
        targets: &[Option<TokenId>],
    ) -> Result<Var> {
        let x = self.lm_embed(g, inputs)?;
        let logits = self.lm_logits_from_embeddings(g, x)?;
        g.cross_entropy(logits, targets)
    }

    /// Maps down-sampled encoder states into the LM input space: CTC
    /// logits, softmax, then a product with the LM input embedding table.
    pub fn embedding_bridge(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        let lm = need(&self.net.lm, "causal LM", self.kind())?;
        let logits = self.ctc_logits(g, hidden)?;
        let table = g.param(lm.embed);
        match self.config.bridge {
            BridgeMode::Soft => {
                let post = g.softmax(logits);
                g.matmul(post, table, false)
            }
            BridgeMode::Hard => {
                let v = g.cols(logits);
                let ids: Vec<TokenId> = g.value(logits).chunks(v).map(argmax).collect();
                g.embedding(table, &ids)
            }
        }
    }

    /// Encoder, CTC head, blank posteriors, down-sampling and bridge.
    /// Returns `(log_probs, bridged prompt, kept frame indices)`.
    pub fn speech_prompt(
        &self,
        g: &mut Graph<'_, F>,
        frames: &Frames,
    ) -> Result<(Var, Var, Vec<usize>)> {
        let h = self.encode_speech(g, frames)?;
        let logits = self.ctc_logits(g, h)?;
        let log_probs = g.log_softmax(logits);
        let v = g.cols(log_probs);
        let blank: Vec<F> = g
            .value(log_probs)
            .chunks(v)
            .map(|r| r[ctc::BLANK].exp())
            .collect();
        let kept = ctc::keep_indices(&blank, self.config.blank_threshold)?;
        let hk = g.gather_rows(h, &kept)?;
        let bridged = self.embedding_bridge(g, hk)?;
        Ok((log_probs, bridged, kept))
    }

    /// Decoder-only composition: `[bridged ‖ E(bos) ‖ E(target)]` into the
    /// causal LM; cross-entropy only on the target + eos positions.
    pub fn deconly_forward(
        &self,
        g: &mut Graph<'_, F>,
        frames: &Frames,
        spoken: &[TokenId],
        target: &[TokenId],
    ) -> Result<AsrOutputs> {
        if self.kind() != ModelKind::Deconly {
            return Err(Error::Invalid(format!(
                "deconly_forward on a {:?} model",
                self.kind()
            )));
        }
        if target.is_empty() {
            return Err(Error::Invalid("empty target".into()));
        }
        let (log_probs, bridged, kept) = self.speech_prompt(g, frames)?;
        let ctc_loss = self.ctc_term(g, log_probs, spoken)?;
        let (input, labels) = Self::teacher_forced(target);
        let text = self.lm_embed(g, &input)?;
        let x = g.concat_rows(&[bridged, text])?;
        let logits = self.lm_logits_from_embeddings(g, x)?;
        let k = kept.len();
        let mut all_labels = vec![None; k];
        all_labels.extend(labels.iter().copied());
        let ce_loss = g.cross_entropy(logits, &all_labels)?;
        Ok(AsrOutputs {
            log_probs,
            ctc_loss,
            ce_loss,
            ce_positions: labels.len(),
            prompt_len: Some(k),
        })
    }

    /// Architecture-dispatching training forward.
    pub fn asr_forward(
        &self,
        g: &mut Graph<'_, F>,
        frames: &Frames,
        spoken: &[TokenId],
        target: &[TokenId],
    ) -> Result<AsrOutputs> {
        match self.kind() {
            ModelKind::Baseline | ModelKind::Encdec => self.aed_forward(g, frames, spoken, target),
            ModelKind::Deconly => self.deconly_forward(g, frames, spoken, target),
            k => Err(Error::Invalid(format!("{k:?} is not a speech model"))),
        }
    }

    /// CTC posterior lattice of an utterance.
    pub fn lattice(&self, frames: &Frames) -> Result<PosteriorLattice<F>> {
        let mut g = Graph::inference(&self.store);
        let h = self.encode_speech(&mut g, frames)?;
        let logits = self.ctc_logits(&mut g, h)?;
        let lp = g.log_softmax(logits);
        PosteriorLattice::new(g.rows(lp), g.cols(lp), g.value(lp).to_vec())
    }

    /// Greedy autoregressive transcription. Stops at eos or after
    /// `prompt length + 64` tokens (the encoder length for cross-attending
    /// models). Reserved tokens other than eos are never emitted.
    pub fn greedy_decode(&self, frames: &Frames) -> Result<Vec<TokenId>> {
        match self.kind() {
            ModelKind::Baseline | ModelKind::Encdec => {
                let (mem_shape, mem) = {
                    let mut g = Graph::inference(&self.store);
                    let h = self.encode_speech(&mut g, frames)?;
                    (g.shape(h).to_vec(), g.value(h).to_vec())
                };
                let max_len = mem_shape[0] + 64;
                let mut out: Vec<TokenId> = Vec::new();
                while out.len() < max_len {
                    let mut g = Graph::inference(&self.store);
                    let memory = g.input(mem_shape.clone(), mem.clone())?;
                    let mut input = vec![BOS];
                    input.extend_from_slice(&out);
                    let logits = self.decoder_logits(&mut g, &input, memory)?;
                    let next = pick(last_row(&g, logits));
                    if next == EOS {
                        break;
                    }
                    out.push(next);
                }
                Ok(out)
            }
            ModelKind::Deconly => {
                let (p_shape, prompt) = {
                    let mut g = Graph::inference(&self.store);
                    let (_, bridged, _) = self.speech_prompt(&mut g, frames)?;
                    (g.shape(bridged).to_vec(), g.value(bridged).to_vec())
                };
                self.continue_prompt(p_shape, prompt)
            }
            k => Err(Error::Invalid(format!("{k:?} is not a speech model"))),
        }
    }

    /// Greedy continuation of a causal-LM prompt given as embedding rows:
    /// appends bos, then generates until eos or `rows + 64` tokens.
    pub fn continue_prompt(&self, shape: Vec<usize>, prompt: Vec<F>) -> Result<Vec<TokenId>> {
        let max_len = shape[0] + 64;
        let mut out: Vec<TokenId> = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::inference(&self.store);
            let p = g.input(shape.clone(), prompt.clone())?;
            let mut input = vec![BOS];
            input.extend_from_slice(&out);
            let text = self.lm_embed(&mut g, &input)?;
            let x = g.concat_rows(&[p, text])?;
            let logits = self.lm_logits_from_embeddings(&mut g, x)?;
            let next = pick(last_row(&g, logits));
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Greedy continuation of a token prompt with the causal LM.
    pub fn lm_generate(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        let (shape, data) = {
            let mut g = Graph::inference(&self.store);
            let x = self.lm_embed(&mut g, prompt)?;
            (g.shape(x).to_vec(), g.value(x).to_vec())
        };
        self.continue_prompt(shape, data)
    }
}

fn last_row<'g, F: Real>(g: &'g Graph<'_, F>, v: Var) -> &'g [F] {
    let c = g.cols(v);
    let val = g.value(v);
    &val[val.len() - c..]
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Arg-max over eos and non-reserved tokens.
fn pick<F: Real>(row: &[F]) -> TokenId {
    let mut best = EOS;
    for i in NUM_RESERVED..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax posteriors times an embedding table (`V × d`), outside a graph.
pub fn bridge_values<F: Real>(logits: &[F], vocab: usize, table: &[F], dim: usize) -> Vec<F> {
    let post = softmax_rows(logits, vocab);
    crate::diffcore::matmul_nn(&post, table, logits.len() / vocab, vocab, dim)
}

#[cfg(test)]
mod tests;
