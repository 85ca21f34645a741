use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::grad_check;

fn tiny(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::toy(kind, 14, 4);
    c.encoder = EncoderConfig {
        input_dim: 4,
        conv_layers: 2,
        layers: 1,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
    };
    c.decoder = StackConfig {
        layers: 1,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
    };
    c.text_encoder_layers = 1;
    c.lora = (kind == ModelKind::Deconly).then(|| LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    });
    c
}

fn frames(rows: usize, dim: usize, seed: u64) -> Frames {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frames {
        rows,
        dim,
        data: (0..rows * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    }
}

#[test]
fn encoder_length_law() {
    let m = Model::<f64>::new(tiny(ModelKind::Baseline), 1).unwrap();
    for t in 4..=512 {
        let mut g = Graph::inference(&m.store);
        let h = m.encode_speech(&mut g, &frames(t, 4, t as u64)).unwrap();
        assert_eq!(g.rows(h), t.div_ceil(2).div_ceil(2), "T={t}");
        assert_eq!(g.cols(h), 8);
    }
    let mut g = Graph::inference(&m.store);
    let h = m.encode_speech(&mut g, &frames(16, 4, 0)).unwrap();
    assert_eq!(g.rows(h), 4);
    let h = m.encode_speech(&mut g, &frames(17, 4, 0)).unwrap();
    assert_eq!(g.rows(h), 5);
    assert!(matches!(
        m.encode_speech(&mut g, &frames(3, 4, 0)),
        Err(Error::UtteranceTooShort(3))
    ));
}

#[test]
fn encoder_is_deterministic() {
    let m = Model::<f64>::new(tiny(ModelKind::Baseline), 1).unwrap();
    let f = frames(20, 4, 3);
    let run = || {
        let mut g = Graph::inference(&m.store);
        let h = m.encode_speech(&mut g, &f).unwrap();
        g.value(h).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn combined_loss_weights() {
    assert!((combined_loss(0.2, 1.0, 2.0) - 1.8).abs() < 1e-12);
}

#[test]
fn untrained_ce_near_uniform() {
    let m = Model::<f64>::new(tiny(ModelKind::Baseline), 5).unwrap();
    let mut total = 0.0;
    for s in 0..10 {
        let mut g = Graph::new(&m.store);
        let out = m
            .aed_forward(&mut g, &frames(40, 4, s), &[6, 7, 8], &[6, 9, 10, 11])
            .unwrap();
        total += g.scalar(out.ce_loss);
        assert_eq!(out.ce_positions, 5);
        assert!(out.ctc_loss.is_some());
    }
    let ln_v = (14f64).ln();
    let mean = total / 10.0;
    assert!((mean - ln_v).abs() < 0.2 * ln_v, "{mean} vs {ln_v}");
}

#[test]
fn aed_ce_passes_grad_check() {
    let mut m = Model::<f64>::new(tiny(ModelKind::Baseline), 2).unwrap();
    let f = frames(12, 4, 9);
    let ids: Vec<ParamId> = [
        "decoder.out.w",
        "decoder.layers.0.cross.q.w",
        "speech_encoder.conv1.w",
    ]
    .iter()
    .map(|n| m.store.id(n).unwrap())
    .collect();
    let net = m.net.clone();
    let cfg = m.config.clone();
    let err = grad_check(
        |g| {
            let shadow = Model {
                config: cfg.clone(),
                store: ParamStore::new(),
                net: net.clone(),
                frozen: Vec::new(),
            };
            let out = shadow.aed_forward(g, &f, &[6, 7], &[8, 9, 6])?;
            Ok(out.ce_loss)
        },
        &mut m.store,
        &ids,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn infeasible_ctc_target_is_skipped() {
    let m = Model::<f64>::new(tiny(ModelKind::Baseline), 2).unwrap();
    let mut g = Graph::new(&m.store);
    let out = m
        .aed_forward(&mut g, &frames(8, 4, 1), &[6, 7, 8, 9, 10], &[6])
        .unwrap();
    assert!(out.ctc_loss.is_none());
}

#[test]
fn encdec_freezes_embeddings() {
    let m = Model::<f64>::new(tiny(ModelKind::Encdec), 3).unwrap();
    let mut g = Graph::new(&m.store);
    let out = m
        .encdec_forward(&mut g, &frames(30, 4, 2), &[6, 7], &[8, 9])
        .unwrap();
    assert!(g.scalar(out.ce_loss).is_finite());
    let loss = g.add(out.ce_loss, out.ctc_loss.unwrap()).unwrap();
    let grads = g.backward(loss).unwrap();
    for name in ["decoder.embed", "decoder.out.w", "decoder.out.b"] {
        assert!(grads.get(m.store.id(name).unwrap()).is_none(), "{name}");
    }
    assert!(grads
        .get(m.store.id("decoder.layers.0.attn.q.w").unwrap())
        .is_some());
}

#[test]
fn encdec_requires_lm_checkpoint_kind() {
    let mut m = Model::<f64>::new(tiny(ModelKind::Encdec), 3).unwrap();
    let wrong = Model::<f64>::new(tiny(ModelKind::DeconlyLm), 3).unwrap();
    assert!(matches!(m.load_lm(&wrong), Err(Error::MissingLm(_))));
    let lm = Model::<f64>::new(tiny(ModelKind::EncdecLm), 4).unwrap();
    let n = m.load_lm(&lm).unwrap();
    assert!(n > 0);
    let id = m.store.id("decoder.layers.0.attn.q.w").unwrap();
    let lid = lm.store.id("decoder.layers.0.attn.q.w").unwrap();
    assert_eq!(m.store.get(id).data, lm.store.get(lid).data);
    assert!(
        !m.store
            .get(m.store.id("decoder.embed").unwrap())
            .requires_grad
    );
}

#[test]
fn mlm_forward_contract() {
    let m = Model::<f64>::new(tiny(ModelKind::EncdecLm), 3).unwrap();
    let mut g = Graph::new(&m.store);
    assert!(matches!(
        m.text_mlm_forward(&mut g, &[6, 7, 8], &[None, None, None]),
        Err(Error::EmptyMlmBatch)
    ));
    let mut total = 0.0;
    for s in 0..10u64 {
        let mut g = Graph::new(&m.store);
        let toks: Vec<usize> = (0..8)
            .map(|i| 6 + ((i as u64 * 7 + s) % 8) as usize)
            .collect();
        let mut masked = toks.clone();
        masked[3] = crate::tokenizer::MASK;
        let labels: Vec<Option<usize>> = (0..8).map(|i| (i == 3).then_some(toks[3])).collect();
        let loss = m.text_mlm_forward(&mut g, &masked, &labels).unwrap();
        total += g.scalar(loss);
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .get(m.store.id("decoder.layers.0.ffn.up.w").unwrap())
            .is_some());
    }
    let ln_v = (14f64).ln();
    assert!((total / 10.0 - ln_v).abs() < 0.2 * ln_v);

    let enc = Model::<f64>::new(tiny(ModelKind::Encdec), 3).unwrap();
    let mut g = Graph::new(&enc.store);
    let loss = enc
        .text_mlm_forward(
            &mut g,
            &[6, crate::tokenizer::MASK, 8],
            &[None, Some(7), None],
        )
        .unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(enc.store.id("decoder.embed").unwrap()).is_none());
    assert!(grads
        .get(enc.store.id("text_encoder.layers.0.attn.q.w").unwrap())
        .is_some());
}

#[test]
fn deconly_prompt_and_loss_positions() {
    let mut cfg = tiny(ModelKind::Deconly);
    cfg.blank_threshold = 1.0;
    let m = Model::<f64>::new(cfg, 7).unwrap();
    for t in [16, 17, 33] {
        let mut g = Graph::new(&m.store);
        let out = m
            .deconly_forward(&mut g, &frames(t, 4, t as u64), &[6, 7], &[8, 9, 10])
            .unwrap();
        assert_eq!(out.prompt_len, Some(t.div_ceil(4)));
        assert_eq!(out.ce_positions, 4);
        assert!(g.scalar(out.ce_loss).is_finite());
    }
}

#[test]
fn deconly_gradients_skip_frozen_lm() {
    let m = Model::<f64>::new(tiny(ModelKind::Deconly), 7).unwrap();
    let mut g = Graph::new(&m.store);
    let out = m
        .deconly_forward(&mut g, &frames(24, 4, 1), &[6, 7], &[8, 9])
        .unwrap();
    let grads = g.backward(out.ce_loss).unwrap();
    for (id, name, _) in m.store.iter() {
        if name.starts_with("lm.") {
            assert!(grads.get(id).is_none(), "{name}");
        }
    }
    let b = m.store.id("lora.lm.layers.0.attn.q.b").unwrap();
    assert!(grads.get(b).is_some());
    assert!(grads.get(m.store.id("ctc.w").unwrap()).is_some());
}

#[test]
fn lora_identity_at_init() {
    let mut cfg = tiny(ModelKind::Deconly);
    cfg.lora = None;
    let mut m = Model::<f64>::new(cfg, 11).unwrap();
    let f = frames(30, 4, 4);
    let logits = |m: &Model<f64>| {
        let mut g = Graph::inference(&m.store);
        let (_, bridged, _) = m.speech_prompt(&mut g, &f).unwrap();
        let text = m.lm_embed(&mut g, &[BOS, 6, 7]).unwrap();
        let x = g.concat_rows(&[bridged, text]).unwrap();
        let l = m.lm_logits_from_embeddings(&mut g, x).unwrap();
        g.value(l).to_vec()
    };
    let before = logits(&m);
    m.attach_lora(
        &LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        },
        5,
    )
    .unwrap();
    assert_eq!(before, logits(&m));
    assert!(m.frozen.contains(&"lm.".to_string()));
}

#[test]
fn lora_parameter_counts_and_errors() {
    let mut cfg = ModelConfig::toy(ModelKind::DeconlyLm, 20, 4);
    cfg.decoder = StackConfig {
        layers: 1,
        embed_dim: 64,
        heads: 4,
        ffn_dim: 64,
    };
    let mut m = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let lora = LoraConfig::default();
    assert_eq!(lora.scale(), 4.0);
    m.attach_lora(&lora, 3).unwrap();
    let per_proj: usize = m
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("lora.lm.layers.0.attn.q."))
        .map(|(_, _, t)| t.len())
        .sum();
    assert_eq!(per_proj, 1024);
    assert_eq!(m.store.num_trainable(), 2048);

    let mut m = Model::<f64>::new(cfg, 1).unwrap();
    let err = m
        .attach_lora(
            &LoraConfig {
                rank: 64,
                ..LoraConfig::default()
            },
            3,
        )
        .unwrap_err();
    assert!(matches!(err, Error::RankNotLow { .. }));
    assert!(err.to_string().contains("rank not low"));
}

#[test]
fn bridge_endpoints_and_hull() {
    let m = Model::<f64>::new(tiny(ModelKind::Deconly), 3).unwrap();
    let lm = m.net.lm.as_ref().unwrap();
    let table = m.store.get(lm.embed).data.clone();
    let (v, d) = (14, 8);
    // one-hot posteriors: huge logit on one class
    let mut logits = vec![0.0f64; 2 * v];
    logits[5] = 1000.0;
    logits[v + 9] = 1000.0;
    let out = bridge_values(&logits, v, &table, d);
    assert_eq!(&out[..d], &table[5 * d..6 * d]);
    assert_eq!(&out[d..], &table[9 * d..10 * d]);
    let out = bridge_values(&vec![0.3; v], v, &table, d);
    for j in 0..d {
        let mean: f64 = (0..v).map(|i| table[i * d + j]).sum::<f64>() / v as f64;
        assert!((out[j] - mean).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = bridge_values(&logits, v, &table, d);
        for j in 0..d {
            let col = (0..v).map(|i| table[i * d + j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
        }
    }
}

#[test]
fn bridge_matches_graph_and_is_permutation_equivariant() {
    let m = Model::<f64>::new(tiny(ModelKind::Deconly), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hidden: Vec<f64> = (0..5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [3usize, 0, 4, 1, 2];
    let run = |h: Vec<f64>| {
        let mut g = Graph::inference(&m.store);
        let x = g.input(vec![5, 8], h).unwrap();
        let b = m.embedding_bridge(&mut g, x).unwrap();
        g.value(b).to_vec()
    };
    let base = run(hidden.clone());
    let permuted: Vec<f64> = perm
        .iter()
        .flat_map(|&i| hidden[i * 8..(i + 1) * 8].to_vec())
        .collect();
    let out = run(permuted);
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(&out[r * 8..(r + 1) * 8], &base[i * 8..(i + 1) * 8]);
    }
}

#[test]
fn greedy_decode_terminates() {
    for kind in [ModelKind::Baseline, ModelKind::Encdec, ModelKind::Deconly] {
        let m = Model::<f64>::new(tiny(kind), 3).unwrap();
        let f = frames(20, 4, 1);
        let out = m.greedy_decode(&f).unwrap();
        assert!(out.len() <= 5 + 64);
        assert!(out.iter().all(|&t| t >= NUM_RESERVED));
        assert_eq!(out, m.greedy_decode(&f).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let vocab =
        crate::tokenizer::Vocabulary::from_tokens("abcdefgh".chars().map(String::from).collect())
            .unwrap();
    for kind in [
        ModelKind::Baseline,
        ModelKind::Encdec,
        ModelKind::Deconly,
        ModelKind::EncdecLm,
        ModelKind::DeconlyLm,
    ] {
        let m = Model::<f32>::new(tiny(kind), 9).unwrap();
        let bytes = checkpoint_bytes(&m, &vocab, 42);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.model.frozen, m.frozen);
        assert_eq!(back.to_bytes(), bytes, "{kind:?}");
        for (id, _, t) in m.store.iter() {
            assert_eq!(back.model.store.get(id).requires_grad, t.requires_grad);
        }
    }
}

#[test]
fn corrupt_checkpoint_reports_version_and_hash() {
    let vocab = crate::tokenizer::Vocabulary::from_tokens(vec!["a".into(), "b".into()]).unwrap();
    let m = Model::<f32>::new(tiny(ModelKind::Baseline), 9).unwrap();
    let mut bytes = checkpoint_bytes(&m, &vocab, 1);
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    let err = Checkpoint::<f32>::from_bytes(&bytes)
        .unwrap_err()
        .to_string();
    assert!(err.contains("version 1") && err.contains("hash"), "{err}");
    let err = Checkpoint::<f32>::from_bytes(b"garbage")
        .unwrap_err()
        .to_string();
    assert!(err.contains("magic"), "{err}");
}
