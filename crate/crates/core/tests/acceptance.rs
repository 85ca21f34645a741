//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 8 and 9 run the full desk-scale recipe through the `fmtasr`
//! binary twice (roughly 45 minutes on one core).

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fmtasr::diffcore::Graph;
use fmtasr::eval::{align, categorize, edit_cost, evaluate_corpus, parse_lines, ter_tokenize};
use fmtasr::models::{LoraConfig, Model, ModelConfig, ModelKind, StackConfig};
use fmtasr::synthdata::{generate_corpus, CorpusConfig};
use fmtasr::tokenizer::{TokenId, BOS};
use fmtasr::training::{
    mixed_batch_step, mlm_gradients, paired_examples, paired_gradients, train_asr, MetricsLog,
    PairedExample, TrainConfig, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let err = common::ctc_oracle_max_error(150, 1);
    let secs = start.elapsed().as_secs_f64();
    check(
        err < 1e-10 && secs < 10.0,
        format!("150 instances, max |error| {err:.2e}, {secs:.2}s"),
        format!("max |error| {err:.2e} (limit 1e-10), {secs:.2}s (limit 10s)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let err = common::ctc_gradcheck_max_error(25, 2, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    check(
        err < 1e-5 && secs < 30.0,
        format!("25 instances, max relative error {err:.2e}, {secs:.2}s"),
        format!("max relative error {err:.2e} (limit 1e-5), {secs:.2}s (limit 30s)"),
    )
}

fn exhaustive_min(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, None) => 0,
        (Some((_, rr)), None) => 1 + exhaustive_min(rr, h),
        (None, Some((_, hh))) => 1 + exhaustive_min(r, hh),
        (Some((a, rr)), Some((b, hh))) => (usize::from(a != b) + exhaustive_min(rr, hh))
            .min(1 + exhaustive_min(rr, h))
            .min(1 + exhaustive_min(r, hh)),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut strings: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = strings.clone();
    for _ in 0..5 {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                (0..3u8).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        strings.extend(frontier.iter().cloned());
    }
    let names = ["a", "b", "c"];
    let mut pairs = 0usize;
    for r in &strings {
        let rt: Vec<&str> = r.iter().map(|&c| names[c as usize]).collect();
        for h in &strings {
            let ht: Vec<&str> = h.iter().map(|&c| names[c as usize]).collect();
            let cost = edit_cost(&align(&rt, &ht));
            let best = exhaustive_min(r, h);
            if cost != best {
                return Err(format!("{rt:?} vs {ht:?}: cost {cost}, minimum {best}"));
            }
            pairs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 30.0,
        format!("{pairs} pairs agree, {secs:.2}s"),
        format!("{pairs} pairs agree but took {secs:.2}s (limit 30s)"),
    )
}

fn criterion_4() -> Outcome {
    let fixtures = manifest().join("tests/fixtures");
    let read = |n: &str| fs::read_to_string(fixtures.join(n)).map_err(|e| e.to_string());
    let refs = parse_lines(&read("ter_ref.tsv")?).map_err(|e| e.to_string())?;
    let hyps = parse_lines(&read("ter_hyp.tsv")?).map_err(|e| e.to_string())?;
    let labels = read("ter_labels.tsv")?;
    for ((r, h), line) in refs.iter().zip(&hyps).zip(labels.lines()) {
        let n: Vec<usize> = line
            .split('\t')
            .skip(1)
            .map(|c| c.parse().unwrap())
            .collect();
        let ops = align(&ter_tokenize(&r.text), &ter_tokenize(&h.text));
        let b = categorize(&ops);
        let got = [
            b.punctuation,
            b.capitalization,
            b.itn,
            b.lexical,
            edit_cost(&ops),
        ];
        if got[..] != n[1..] {
            return Err(format!(
                "{}: labels {:?}, computed {:?}",
                r.id,
                &n[1..],
                got
            ));
        }
    }
    let report = evaluate_corpus(&fixtures.join("ter_ref.tsv"), &fixtures.join("ter_hyp.tsv"))
        .map_err(|e| e.to_string())?;
    let t = &report.total;
    let ter = format!("{:.4}", t.ter());
    check(
        refs.len() == 20 && t.errors() == 33 && ter == "0.3438",
        format!(
            "20 pairs; punct {} cap {} itn {} lexical {}; TER {ter}",
            t.breakdown.punctuation,
            t.breakdown.capitalization,
            t.breakdown.itn,
            t.breakdown.lexical
        ),
        format!("errors {} TER {ter}, expected 33 and 0.3438", t.errors()),
    )
}

fn tiny_config(kind: ModelKind, vocab: usize, input_dim: usize, d: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(kind, vocab, input_dim);
    c.encoder.layers = 1;
    c.encoder.embed_dim = d;
    c.encoder.heads = 2;
    c.encoder.ffn_dim = 2 * d;
    c.decoder = StackConfig {
        layers: 1,
        embed_dim: d,
        heads: 2,
        ffn_dim: 2 * d,
    };
    c.text_encoder_layers = 1;
    c.lora = None;
    c
}

fn lm_logits(m: &Model<f64>, ids: &[TokenId]) -> Vec<f64> {
    let mut g = Graph::inference(&m.store);
    let x = m.lm_embed(&mut g, ids).unwrap();
    let l = m.lm_logits_from_embeddings(&mut g, x).unwrap();
    g.value(l).to_vec()
}

fn criterion_5() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig {
        train_utterances: 8,
        dev_utterances: 0,
        test_utterances: 0,
        text_sentences: 16,
        input_dim: 8,
        ..CorpusConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = &corpus.vocab;
    let v = vocab.len();
    let data = paired_examples(corpus.split("train").unwrap(), vocab);
    let texts: Vec<Vec<TokenId>> = corpus.text.iter().map(|t| vocab.encode(t)).collect();

    let lm = Model::<f64>::new(tiny_config(ModelKind::DeconlyLm, v, 8, 64), 3).unwrap();
    let mut adapted = Model::<f64>::new(tiny_config(ModelKind::Deconly, v, 8, 64), 4).unwrap();
    adapted.load_lm(&lm).map_err(|e| e.to_string())?;
    adapted
        .attach_lora(&LoraConfig::default(), 5)
        .map_err(|e| e.to_string())?;
    let ids = [BOS, 7, 8, 9, 10, 11];
    if lm_logits(&lm, &ids) != lm_logits(&adapted, &ids) {
        return Err("LoRA-attached forward differs from the base LM".into());
    }
    let per_proj: usize = adapted
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("lora.lm.layers.0.attn.q."))
        .map(|(_, _, t)| t.len())
        .sum();
    if per_proj != 1024 {
        return Err(format!(
            "64x64 projection at r=8 has {per_proj} LoRA parameters"
        ));
    }

    let cfg = TrainConfig {
        steps: 100,
        batch_size: 2,
        text_batch_size: 2,
        warmup_steps: 10,
        log_interval: 10,
        ..TrainConfig::default()
    };
    let encdec_lm = Model::<f64>::new(tiny_config(ModelKind::EncdecLm, v, 8, 16), 6).unwrap();
    let mut encdec = Model::<f64>::new(tiny_config(ModelKind::Encdec, v, 8, 16), 7).unwrap();
    encdec.load_lm(&encdec_lm).map_err(|e| e.to_string())?;
    let mut frozen_counts = Vec::new();
    for model in [adapted, encdec] {
        let kind = model.kind();
        let frozen = |m: &Model<f64>| -> Vec<(String, Vec<f64>)> {
            m.frozen.iter().flat_map(|p| m.store.snapshot(p)).collect()
        };
        let before = frozen(&model);
        let mut log = MetricsLog::new(10, None);
        let after = train_asr(model, &data, &texts, &cfg, &mut log, |_, _| Ok(()))
            .map_err(|e| e.to_string())?;
        if before.is_empty() || before != frozen(&after) {
            return Err(format!(
                "{kind:?}: frozen parameters changed after 100 steps"
            ));
        }
        frozen_counts.push(format!("{kind:?} {} tensors", before.len()));
    }
    Ok(format!(
        "LoRA forward bit-identical; 1024 parameters per 64x64 projection; frozen unchanged after 100 steps ({})",
        frozen_counts.join(", ")
    ))
}

fn criterion_6() -> Outcome {
    common::downsample_contract(100, 6)?;
    Ok("100 random lattices: identity at 1.0, monotone, single-frame fallback".into())
}

fn criterion_7() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig {
        train_utterances: 4,
        dev_utterances: 0,
        test_utterances: 0,
        text_sentences: 4,
        input_dim: 8,
        ..CorpusConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = &corpus.vocab;
    let data = paired_examples(corpus.split("train").unwrap(), vocab);
    let texts: Vec<Vec<TokenId>> = corpus.text.iter().map(|t| vocab.encode(t)).collect();
    let text_refs: Vec<&[TokenId]> = texts.iter().map(|t| t.as_slice()).collect();
    let paired: Vec<&PairedExample> = data.iter().collect();
    let model = Model::<f64>::new(tiny_config(ModelKind::Encdec, vocab.len(), 8, 16), 8).unwrap();
    let cfg = TrainConfig::default();

    let mut a = Trainer::new(model.clone(), cfg.clone()).map_err(|e| e.to_string())?;
    mixed_batch_step(
        &mut a,
        &paired,
        &text_refs,
        &mut ChaCha8Rng::seed_from_u64(70),
    )
    .map_err(|e| e.to_string())?;

    let mut b = Trainer::new(model, cfg.clone()).map_err(|e| e.to_string())?;
    let (mut sum, _) = paired_gradients(&b.model, &paired, &cfg, 0).map_err(|e| e.to_string())?;
    let (gt, _) = mlm_gradients(
        &b.model,
        &text_refs,
        cfg.mlm_mask_rate,
        &mut ChaCha8Rng::seed_from_u64(70),
        0,
    )
    .map_err(|e| e.to_string())?;
    sum.add_assign(&gt);
    b.apply(&[&sum]);
    let n = a.model.store.num_params();
    check(
        a.model.store.snapshot("") == b.model.store.snapshot(""),
        format!("{n} parameters bitwise equal"),
        "mixed step and summed-gradient step differ".into(),
    )
}

struct Scores {
    ter: f64,
    per_split: Vec<(String, f64)>,
    punct_cap: usize,
}

struct RecipeRun {
    baseline_secs: f64,
    lm_secs: f64,
    deconly_secs: f64,
    baseline: Scores,
    deconly: Scores,
}

fn fmtasr(args: &[&str], cwd: &Path) -> Result<f64, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_fmtasr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "fmtasr {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(start.elapsed().as_secs_f64())
}

const TEST_SPLITS: [&str; 2] = ["test_clean", "test_other"];

fn score(dir: &Path, run: &str) -> Result<Scores, String> {
    let mut errors = 0;
    let mut tokens = 0;
    let mut punct_cap = 0;
    let mut per_split = Vec::new();
    for split in TEST_SPLITS {
        let report = evaluate_corpus(
            &dir.join(format!("corpus/{split}.ref.tsv")),
            &dir.join(format!("{run}/{split}.hyp.tsv")),
        )
        .map_err(|e| e.to_string())?;
        let t = &report.total;
        errors += t.errors();
        tokens += t.ref_tokens;
        punct_cap += t.breakdown.punctuation + t.breakdown.capitalization;
        per_split.push((split.to_string(), t.ter()));
    }
    Ok(Scores {
        ter: errors as f64 / tokens as f64,
        per_split,
        punct_cap,
    })
}

fn run_recipe(dir: &Path) -> Result<RecipeRun, String> {
    let config = manifest().join("../../configs/acceptance.toml");
    let config = config.to_str().unwrap();
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    fmtasr(&["gen-data", "--config", config, "--out", "corpus"], dir)?;
    let baseline_secs = fmtasr(
        &[
            "train", "--config", config, "--arch", "baseline", "--data", "corpus", "--out",
            "baseline",
        ],
        dir,
    )?;
    let lm_secs = fmtasr(
        &[
            "pretrain-lm",
            "--config",
            config,
            "--arch",
            "deconly",
            "--data",
            "corpus",
            "--out",
            "lm",
        ],
        dir,
    )?;
    let deconly_secs = fmtasr(
        &[
            "train", "--config", config, "--arch", "deconly", "--data", "corpus", "--lm", "lm",
            "--out", "deconly",
        ],
        dir,
    )?;
    for run in ["baseline", "deconly"] {
        for split in TEST_SPLITS {
            fmtasr(
                &[
                    "decode",
                    "--checkpoint",
                    run,
                    "--data",
                    "corpus",
                    "--split",
                    split,
                    "--out",
                    run,
                ],
                dir,
            )?;
        }
    }
    Ok(RecipeRun {
        baseline_secs,
        lm_secs,
        deconly_secs,
        baseline: score(dir, "baseline")?,
        deconly: score(dir, "deconly")?,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn criterion_8(first: &Result<RecipeRun, String>) -> Outcome {
    let r = first.as_ref().map_err(|e| e.clone())?;
    let b = &r.baseline;
    let d = &r.deconly;
    let clean = b.per_split[0].1;
    let splits = |s: &Scores| {
        s.per_split
            .iter()
            .map(|(n, t)| format!("{n} {}", pct(*t)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let detail = format!(
        "baseline {} ({}; punct+cap {}; {:.1} min); deconly {} ({}; punct+cap {}; LM {:.1} min, training {:.1} min)",
        pct(b.ter),
        splits(b),
        b.punct_cap,
        r.baseline_secs / 60.0,
        pct(d.ter),
        splits(d),
        d.punct_cap,
        r.lm_secs / 60.0,
        r.deconly_secs / 60.0
    );
    let a = clean < 0.15 && r.baseline_secs <= 30.0 * 60.0;
    let bb = d.ter <= b.ter;
    let c = d.punct_cap <= b.punct_cap;
    let budget = [r.baseline_secs, r.lm_secs, r.deconly_secs]
        .iter()
        .all(|&s| s <= 60.0 * 60.0);
    check(
        a && bb && c && budget,
        detail.clone(),
        format!("(a) {a} (b) {bb} (c) {c} budget {budget}: {detail}"),
    )
}

fn strip_wall_clock(text: &str) -> String {
    text.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split('\t').collect();
            cols.pop();
            cols.join("\t")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_9(root: &Path, first: &Result<RecipeRun, String>) -> Outcome {
    first
        .as_ref()
        .map_err(|e| format!("first run failed: {e}"))?;
    run_recipe(&root.join("run2"))?;
    let mut compared = 0;
    for file in [
        "baseline/metrics.tsv",
        "lm/metrics.tsv",
        "deconly/pretrain_metrics.tsv",
        "deconly/metrics.tsv",
    ] {
        let read =
            |run: &str| fs::read_to_string(root.join(run).join(file)).map_err(|e| e.to_string());
        if strip_wall_clock(&read("run1")?) != strip_wall_clock(&read("run2")?) {
            return Err(format!("{file} differs between runs"));
        }
        compared += 1;
    }
    for run in ["baseline", "deconly"] {
        for split in TEST_SPLITS {
            let file = format!("{run}/{split}.hyp.tsv");
            let read = |r: &str| fs::read(root.join(r).join(&file)).map_err(|e| e.to_string());
            if read("run1")? != read("run2")? {
                return Err(format!("{file} differs between runs"));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} metrics logs and hypothesis files identical across two runs"
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let names = [
        "CTC oracle equivalence",
        "CTC gradient check",
        "alignment oracle equivalence",
        "TER/categorization fixture",
        "LoRA and freeze contracts",
        "down-sampling contract",
        "mixed-batch equivalence",
        "end-to-end toy reproduction",
        "determinism",
    ];
    let mut results: Vec<Outcome> = Vec::new();
    let fast: [fn() -> Outcome; 7] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
    ];
    let report = |i: usize, r: &Outcome| match r {
        Ok(d) => println!("PASS criterion {} ({}): {d}", i + 1, names[i]),
        Err(d) => println!("FAIL criterion {} ({}): {d}", i + 1, names[i]),
    };
    for (i, f) in fast.into_iter().enumerate() {
        let r = guarded(f);
        report(i, &r);
        results.push(r);
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let first = run_recipe(&root.join("run1"));
    let r8 = guarded(|| criterion_8(&first));
    report(7, &r8);
    results.push(r8);
    let r9 = guarded(|| criterion_9(root, &first));
    report(8, &r9);
    results.push(r9);
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
