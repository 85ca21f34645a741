//! Optimization: Adam with linear warmup, gradient accumulation over
//! per-utterance graphs, mixed paired/text-only batches, CTC encoder
//! pre-training and text-LM pretraining.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Graph, ParamStore, Real};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::synthdata::{derive_seed, spoken_form, Frames, Utterance};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, MASK, NUM_RESERVED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub w_ctc: f64,
    pub w_ce: f64,
    pub mlm_mask_rate: f64,
    pub blank_threshold: f64,
    pub batch_size: usize,
    pub text_batch_size: usize,
    pub encoder_pretrain_steps: usize,
    /// Share of decoder-only LM pretraining sequences that carry a noisy
    /// spoken-form prompt before the written sentence.
    pub lm_prompt_fraction: f64,
    pub log_interval: usize,
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Set from the run-level seed; not a configuration key of its own.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 5.0,
            w_ctc: 0.2,
            w_ce: 0.8,
            mlm_mask_rate: 0.15,
            blank_threshold: crate::ctc::DEFAULT_BLANK_THRESHOLD,
            batch_size: 16,
            text_batch_size: 16,
            encoder_pretrain_steps: 1000,
            lm_prompt_fraction: 0.5,
            log_interval: 10,
            checkpoint_interval: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if (self.w_ctc + self.w_ce - 1.0).abs() > 1e-9 || self.w_ctc < 0.0 || self.w_ce < 0.0 {
            return bad(format!(
                "loss weights must be non-negative and sum to 1 ({} + {})",
                self.w_ctc, self.w_ce
            ));
        }
        if !(self.mlm_mask_rate > 0.0 && self.mlm_mask_rate < 1.0) {
            return bad(format!(
                "mlm_mask_rate {} outside (0, 1)",
                self.mlm_mask_rate
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.text_batch_size == 0 || self.log_interval == 0 {
            return bad("batch sizes and log_interval must be positive".into());
        }
        if !(self.blank_threshold > 0.0 && self.blank_threshold <= 1.0) {
            return bad(format!(
                "blank_threshold {} outside (0, 1]",
                self.blank_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.lm_prompt_fraction) {
            return bad("lm_prompt_fraction outside [0, 1]".into());
        }
        Ok(())
    }

    /// Linear warmup to `learning_rate`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter and
/// only parameters that received a gradient are updated.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.t += 1;
        let n = store.len();
        self.m.resize(n, Vec::new());
        self.v.resize(n, Vec::new());
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (c1, c2) = (F::one() - b1, F::one() - b2);
        let bc1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (F::lit(lr), F::lit(self.epsilon), F::lit(self.weight_decay));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let Some(g) = t.grad.as_ref() else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            if m.is_empty() {
                *m = vec![F::zero(); g.len()];
                *v = vec![F::zero(); g.len()];
            }
            for i in 0..g.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps) + wd * t.data[i];
                t.data[i] -= lr * update;
            }
        }
    }
}

/// Masks each non-reserved position independently with probability
/// `rate`, forcing one masked position when none was drawn. Labels hold the
/// original id at masked positions.
pub fn mlm_mask<R: Rng + ?Sized>(
    tokens: &[TokenId],
    rate: f64,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<Option<TokenId>>) {
    let mut masked = tokens.to_vec();
    let mut labels = vec![None; tokens.len()];
    let maskable: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i] >= NUM_RESERVED)
        .collect();
    for &i in &maskable {
        if rng.random::<f64>() < rate {
            labels[i] = Some(tokens[i]);
            masked[i] = MASK;
        }
    }
    if labels.iter().all(Option::is_none) && !maskable.is_empty() {
        let i = maskable[rng.random_range(0..maskable.len())];
        labels[i] = Some(tokens[i]);
        masked[i] = MASK;
    }
    (masked, labels)
}

/// One paired training utterance in token form.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub frames: Frames,
    /// Spoken-form tokens (CTC target).
    pub spoken: Vec<TokenId>,
    /// Written-form tokens (decoder target).
    pub target: Vec<TokenId>,
}

pub fn paired_examples(utts: &[Utterance], vocab: &Vocabulary) -> Vec<PairedExample> {
    utts.iter()
        .map(|u| PairedExample {
            id: u.id.clone(),
            frames: u.frames.clone(),
            spoken: vocab.encode(&u.spoken),
            target: vocab.encode(&u.written),
        })
        .collect()
}

/// A causal-LM training sequence: row `i` of `inputs` is scored against
/// `targets[i]` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct LmSequence {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<Option<TokenId>>,
}

impl LmSequence {
    /// `bos written -> written eos`.
    pub fn plain(written: &[TokenId]) -> Self {
        Self::prompted(&[], written)
    }

    /// `prompt bos written -> written eos`, prompt positions unscored.
    pub fn prompted(prompt: &[TokenId], written: &[TokenId]) -> Self {
        let mut inputs = prompt.to_vec();
        inputs.push(BOS);
        inputs.extend_from_slice(written);
        let mut targets = vec![None; prompt.len()];
        targets.extend(written.iter().map(|&t| Some(t)));
        targets.push(Some(EOS));
        LmSequence { inputs, targets }
    }
}

/// Spoken-form prompt shaped like a blank-stripped CTC frame sequence:
/// every character repeated 1-3 times, with a few dropped or substituted.
pub fn noisy_prompt<R: Rng + ?Sized>(
    spoken: &[TokenId],
    alphabet: &[TokenId],
    rng: &mut R,
) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(2 * spoken.len());
    for &t in spoken {
        let r: f64 = rng.random();
        if r < 0.03 {
            continue;
        }
        let t = if r < 0.06 && !alphabet.is_empty() {
            alphabet[rng.random_range(0..alphabet.len())]
        } else {
            t
        };
        for _ in 0..rng.random_range(1..=3) {
            out.push(t);
        }
    }
    if out.is_empty() {
        out.extend_from_slice(spoken);
    }
    out
}

/// Loss summary of one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ctc: f64,
    pub ce: f64,
    pub mlm: f64,
    pub lr: f64,
    pub prompt_len: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLosses {
    pub ctc: f64,
    pub ce: f64,
    pub prompt_len: f64,
}

fn check_finite(v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Summed gradients of `(w_ctc·CTC + w_ce·CE) / B` over a paired batch.
/// Utterances whose CTC target cannot be aligned contribute CE only.
pub fn paired_gradients<F: Real>(
    model: &Model<F>,
    batch: &[&PairedExample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Gradients<F>, BatchLosses)> {
    let mut grads = Gradients::new();
    let mut losses = BatchLosses::default();
    let mut ctc_count = 0usize;
    let inv_b = F::one() / F::from_usize(batch.len().max(1)).unwrap();
    for ex in batch {
        let mut g = Graph::new(&model.store);
        let out = model.asr_forward(&mut g, &ex.frames, &ex.spoken, &ex.target)?;
        let ce = g.scalar(out.ce_loss).to_f64().unwrap();
        check_finite(ce, step)?;
        losses.ce += ce;
        let mut loss = g.scale(out.ce_loss, F::lit(cfg.w_ce));
        if let Some(c) = out.ctc_loss {
            let cv = g.scalar(c).to_f64().unwrap();
            check_finite(cv, step)?;
            losses.ctc += cv;
            ctc_count += 1;
            let wc = g.scale(c, F::lit(cfg.w_ctc));
            loss = g.add(loss, wc)?;
        }
        losses.prompt_len += out.prompt_len.unwrap_or(0) as f64;
        let loss = g.scale(loss, inv_b);
        grads.add_assign(&g.backward(loss)?);
    }
    let n = batch.len().max(1) as f64;
    losses.ce /= n;
    losses.prompt_len /= n;
    losses.ctc /= ctc_count.max(1) as f64;
    Ok((grads, losses))
}

/// Summed gradients of the length-normalized CTC loss over a batch,
/// computed from the encoder and CTC head only.
pub fn ctc_gradients<F: Real>(
    model: &Model<F>,
    batch: &[&PairedExample],
    step: usize,
) -> Result<(Gradients<F>, f64)> {
    let mut grads = Gradients::new();
    let mut total = 0.0;
    let inv_b = F::one() / F::from_usize(batch.len().max(1)).unwrap();
    for ex in batch {
        if ex.spoken.is_empty() {
            continue;
        }
        let mut g = Graph::new(&model.store);
        let h = model.encode_speech(&mut g, &ex.frames)?;
        let logits = model.ctc_logits(&mut g, h)?;
        let lp = g.log_softmax(logits);
        if crate::ctc::min_frames(&ex.spoken) > g.rows(lp) {
            continue;
        }
        let nll = g.ctc_loss(lp, &ex.spoken)?;
        let loss = g.scale(nll, F::one() / F::from_usize(ex.spoken.len()).unwrap());
        let v = g.scalar(loss).to_f64().unwrap();
        check_finite(v, step)?;
        total += v;
        let loss = g.scale(loss, inv_b);
        grads.add_assign(&g.backward(loss)?);
    }
    Ok((grads, total / batch.len().max(1) as f64))
}

/// Summed gradients of the masked-LM loss over a text batch.
pub fn mlm_gradients<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    texts: &[&[TokenId]],
    rate: f64,
    rng: &mut R,
    step: usize,
) -> Result<(Gradients<F>, f64)> {
    let mut grads = Gradients::new();
    let mut total = 0.0;
    let inv_b = F::one() / F::from_usize(texts.len().max(1)).unwrap();
    for toks in texts {
        let (masked, labels) = mlm_mask(toks, rate, rng);
        let mut g = Graph::new(&model.store);
        let loss = model.text_mlm_forward(&mut g, &masked, &labels)?;
        let v = g.scalar(loss).to_f64().unwrap();
        check_finite(v, step)?;
        total += v;
        let loss = g.scale(loss, inv_b);
        grads.add_assign(&g.backward(loss)?);
    }
    Ok((grads, total / texts.len().max(1) as f64))
}

/// Summed gradients of the causal-LM loss over a batch of sequences.
pub fn lm_gradients<F: Real>(
    model: &Model<F>,
    seqs: &[LmSequence],
    step: usize,
) -> Result<(Gradients<F>, f64)> {
    let mut grads = Gradients::new();
    let mut total = 0.0;
    let inv_b = F::one() / F::from_usize(seqs.len().max(1)).unwrap();
    for s in seqs {
        let mut g = Graph::new(&model.store);
        let loss = model.lm_loss(&mut g, &s.inputs, &s.targets)?;
        let v = g.scalar(loss).to_f64().unwrap();
        check_finite(v, step)?;
        total += v;
        let loss = g.scale(loss, inv_b);
        grads.add_assign(&g.backward(loss)?);
    }
    Ok((grads, total / seqs.len().max(1) as f64))
}

/// A model with its optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub optimizer: Adam<F>,
    pub config: TrainConfig,
    pub step: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Adam::new(&config),
            model,
            config,
            step: 0,
        })
    }

    /// Accumulates every gradient part into the parameter buffers, clips
    /// and takes exactly one optimizer step. Returns the learning rate used.
    pub fn apply(&mut self, parts: &[&Gradients<F>]) -> f64 {
        let store = &mut self.model.store;
        store.set_grads(&Gradients::new());
        for p in parts {
            store.accumulate(p);
        }
        if self.config.max_grad_norm > 0.0 {
            let total = store.grads_snapshot();
            let norm = total.sq_norm().to_f64().unwrap().sqrt();
            if norm > self.config.max_grad_norm {
                let mut scaled = total;
                scaled.scale(F::lit(self.config.max_grad_norm / norm));
                store.set_grads(&scaled);
            }
        }
        let lr = self.config.lr_at(self.step);
        self.optimizer.step(store, lr);
        self.step += 1;
        lr
    }

    /// One update from a paired batch.
    pub fn paired_step(&mut self, batch: &[&PairedExample]) -> Result<StepMetrics> {
        let (grads, l) = paired_gradients(&self.model, batch, &self.config, self.step)?;
        let step = self.step;
        let lr = self.apply(&[&grads]);
        Ok(StepMetrics {
            step: step + 1,
            ctc: l.ctc,
            ce: l.ce,
            mlm: 0.0,
            lr,
            prompt_len: l.prompt_len,
        })
    }
}

/// One optimizer update from a paired mini-batch (CTC + CE) and a text-only
/// mini-batch (MLM). Gradients of both are accumulated before the update.
pub fn mixed_batch_step<F: Real, R: Rng + ?Sized>(
    trainer: &mut Trainer<F>,
    paired: &[&PairedExample],
    text: &[&[TokenId]],
    rng: &mut R,
) -> Result<StepMetrics> {
    if paired.is_empty() || text.is_empty() {
        return Err(Error::Invalid("mixed batch needs both mini-batches".into()));
    }
    let step = trainer.step;
    let (gp, l) = paired_gradients(&trainer.model, paired, &trainer.config, step)?;
    let (gt, mlm) = mlm_gradients(
        &trainer.model,
        text,
        trainer.config.mlm_mask_rate,
        rng,
        step,
    )?;
    let lr = trainer.apply(&[&gp, &gt]);
    Ok(StepMetrics {
        step: step + 1,
        ctc: l.ctc,
        ce: l.ce,
        mlm,
        lr,
        prompt_len: l.prompt_len,
    })
}

/// Epoch-wise shuffled mini-batches of indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Tab-separated metrics log: `step ctc ce mlm lr wall_clock`, one line per
/// `interval` steps with losses averaged over the interval.
pub struct MetricsLog<'a> {
    interval: usize,
    sum: StepMetrics,
    count: usize,
    start: Instant,
    out: Option<&'a mut dyn Write>,
    pub lines: Vec<String>,
}

impl<'a> MetricsLog<'a> {
    pub fn new(interval: usize, out: Option<&'a mut dyn Write>) -> Self {
        MetricsLog {
            interval: interval.max(1),
            sum: StepMetrics::default(),
            count: 0,
            start: Instant::now(),
            out,
            lines: Vec::new(),
        }
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<()> {
        self.sum.ctc += m.ctc;
        self.sum.ce += m.ce;
        self.sum.mlm += m.mlm;
        self.sum.prompt_len += m.prompt_len;
        self.count += 1;
        if m.step % self.interval == 0 {
            let n = self.count as f64;
            let line = format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.3}",
                m.step,
                self.sum.ctc / n,
                self.sum.ce / n,
                self.sum.mlm / n,
                m.lr,
                self.start.elapsed().as_secs_f64()
            );
            if let Some(out) = self.out.as_mut() {
                writeln!(out, "{line}")?;
                out.flush()?;
            }
            self.lines.push(line);
            self.sum = StepMetrics::default();
            self.count = 0;
        }
        Ok(())
    }
}

/// Optimizes only the speech encoder and CTC head with the CTC loss for
/// `steps` updates. Every other parameter keeps its value; frozen flags are
/// restored afterwards.
pub fn pretrain_encoder_ctc<F: Real>(
    model: Model<F>,
    data: &[PairedExample],
    steps: usize,
    cfg: &TrainConfig,
    log: &mut MetricsLog<'_>,
) -> Result<Model<F>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let saved: Vec<bool> = model
        .store
        .iter()
        .map(|(_, _, t)| t.requires_grad)
        .collect();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let ids: Vec<_> = trainer.model.store.ids().collect();
    for id in &ids {
        let name = trainer.model.store.name(*id).to_string();
        let keep = name.starts_with("speech_encoder.") || name.starts_with("ctc.");
        let t = trainer.model.store.get_mut(*id);
        t.requires_grad = keep && saved[id.0];
        t.grad = None;
    }
    let mut sampler =
        BatchSampler::new(data.len(), cfg.batch_size, derive_seed(cfg.seed, &[0xC7C]))?;
    for _ in 0..steps {
        let batch: Vec<&PairedExample> =
            sampler.next_batch().into_iter().map(|i| &data[i]).collect();
        let step = trainer.step;
        let (grads, ctc) = ctc_gradients(&trainer.model, &batch, step)?;
        let lr = trainer.apply(&[&grads]);
        log.record(&StepMetrics {
            step: step + 1,
            ctc,
            lr,
            ..StepMetrics::default()
        })?;
    }
    let mut model = trainer.model;
    for id in ids {
        let t = model.store.get_mut(id);
        t.requires_grad = saved[id.0];
        t.grad = None;
    }
    Ok(model)
}

/// Pretrains a text LM from scratch on formatted sentences.
///
/// `EncdecLm` models learn masked-token prediction; `DeconlyLm` models learn
/// causal next-token prediction on plain sentences and on sentences preceded
/// by a noisy spoken-form prompt (share `lm_prompt_fraction`).
pub fn pretrain_text_lm<F: Real>(
    texts: &[String],
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog<'_>,
) -> Result<Model<F>> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let kind = model_cfg.kind;
    if !matches!(kind, ModelKind::EncdecLm | ModelKind::DeconlyLm) {
        return Err(Error::Config(format!("{kind:?} is not a text LM")));
    }
    let model = Model::<F>::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let written: Vec<Vec<TokenId>> = texts.iter().map(|t| vocab.encode(t)).collect();
    let spoken: Vec<Vec<TokenId>> = texts
        .iter()
        .map(|t| spoken_form(t).map(|s| vocab.encode(&s)))
        .collect::<Result<_>>()?;
    let alphabet: Vec<TokenId> = vocab
        .encode("abcdefghijklmnopqrstuvwxyz")
        .into_iter()
        .filter(|&t| t >= NUM_RESERVED)
        .collect();
    let mut sampler = BatchSampler::new(
        texts.len(),
        cfg.text_batch_size,
        derive_seed(cfg.seed, &[0x7E7]),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1A]));
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch();
        let step = trainer.step;
        let (grads, loss) = match kind {
            ModelKind::EncdecLm => {
                let batch: Vec<&[TokenId]> = idx.iter().map(|&i| written[i].as_slice()).collect();
                mlm_gradients(&trainer.model, &batch, cfg.mlm_mask_rate, &mut rng, step)?
            }
            _ => {
                let seqs: Vec<LmSequence> = idx
                    .iter()
                    .map(|&i| {
                        if rng.random::<f64>() < cfg.lm_prompt_fraction {
                            let p = noisy_prompt(&spoken[i], &alphabet, &mut rng);
                            LmSequence::prompted(&p, &written[i])
                        } else {
                            LmSequence::plain(&written[i])
                        }
                    })
                    .collect();
                lm_gradients(&trainer.model, &seqs, step)?
            }
        };
        let lr = trainer.apply(&[&grads]);
        let mut m = StepMetrics {
            step: step + 1,
            lr,
            ..StepMetrics::default()
        };
        if kind == ModelKind::EncdecLm {
            m.mlm = loss;
        } else {
            m.ce = loss;
        }
        log.record(&m)?;
    }
    Ok(trainer.model)
}

/// Mean per-token causal CE of plain sentences under a decoder-only LM.
pub fn lm_heldout_ce<F: Real>(
    model: &Model<F>,
    texts: &[String],
    vocab: &Vocabulary,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in texts {
        let s = LmSequence::plain(&vocab.encode(t));
        let mut g = Graph::inference(&model.store);
        let loss = model.lm_loss(&mut g, &s.inputs, &s.targets)?;
        let n = s.targets.iter().filter(|t| t.is_some()).count();
        total += g.scalar(loss).to_f64().unwrap() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Runs the adaptation/training schedule of a speech model: plain paired
/// steps for the baseline and decoder-only models, mixed paired + MLM
/// batches for the encoder-decoder composition.
pub fn train_asr<F: Real>(
    model: Model<F>,
    data: &[PairedExample],
    texts: &[Vec<TokenId>],
    cfg: &TrainConfig,
    log: &mut MetricsLog<'_>,
    mut on_checkpoint: impl FnMut(&Model<F>, usize) -> Result<()>,
) -> Result<Model<F>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let kind = model.kind();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut sampler =
        BatchSampler::new(data.len(), cfg.batch_size, derive_seed(cfg.seed, &[0xBA7C]))?;
    let mut text_sampler = if kind == ModelKind::Encdec {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Some(BatchSampler::new(
            texts.len(),
            cfg.text_batch_size,
            derive_seed(cfg.seed, &[0x7E47]),
        )?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x3A5C]));
    for _ in 0..cfg.steps {
        let batch: Vec<&PairedExample> =
            sampler.next_batch().into_iter().map(|i| &data[i]).collect();
        let m = match text_sampler.as_mut() {
            Some(ts) => {
                let text: Vec<&[TokenId]> = ts
                    .next_batch()
                    .into_iter()
                    .map(|i| texts[i].as_slice())
                    .collect();
                mixed_batch_step(&mut trainer, &batch, &text, &mut rng)?
            }
            None => trainer.paired_step(&batch)?,
        };
        log.record(&m)?;
        if cfg.checkpoint_interval > 0 && m.step % cfg.checkpoint_interval == 0 {
            on_checkpoint(&trainer.model, m.step)?;
        }
    }
    Ok(trainer.model)
}
