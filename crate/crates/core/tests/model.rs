use adgen_core::corpus::{Vocab, BOS, PAD, SPECIALS};
use adgen_core::decode::{generate, BeamConfig};
use adgen_core::model::{
    encode_graph, load_checkpoint, pool, pool_graph, save_checkpoint, similarity, Bound,
    LoadOptions, Model, ModelConfig, ModelParams,
};
use adgen_core::numeric::{grad_check, GradCheckConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len)
        .map(|_| rng.gen_range(SPECIALS.len()..vocab))
        .collect()
}

fn tiny_model(seed: u64) -> Model {
    Model::init(ModelConfig::tiny(32), seed).unwrap()
}

#[test]
fn encoder_output_has_one_row_per_input_token() {
    let m = tiny_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in 1..=m.config.max_src_len {
        let enc = m.encode(&random_ids(&mut rng, len, 32)).unwrap();
        assert_eq!(enc.states.shape(), &[len, m.config.model_dim]);
    }
    assert!(m
        .encode(&random_ids(&mut rng, m.config.max_src_len + 1, 32))
        .is_err());
}

#[test]
fn pad_suffix_does_not_change_real_positions() {
    let m = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.gen_range(2..10);
        let x = random_ids(&mut rng, n, 32);
        let mut padded = x.clone();
        padded.extend(std::iter::repeat_n(
            PAD,
            rng.gen_range(1..=m.config.max_src_len - n),
        ));
        let a = m.encode(&x).unwrap();
        let b = m.encode(&padded).unwrap();
        for r in 0..n {
            for (u, v) in a.states.row_slice(r).iter().zip(b.states.row_slice(r)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        // and the decoder sees the same source through cross-attention
        let prefix = [BOS, x[0]];
        let la = m.decode_logits(&prefix, &a).unwrap();
        let lb = m.decode_logits(&prefix, &b).unwrap();
        for (u, v) in la.iter().zip(&lb) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let m = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let enc = m.encode(&random_ids(&mut rng, 7, 32)).unwrap();
        let mut prefix = vec![BOS];
        prefix.extend(random_ids(&mut rng, m.config.max_tgt_len - 1, 32));
        let full = m.decode_all_logits(&prefix, &enc).unwrap();
        assert_eq!(full.shape(), &[prefix.len(), 32]);
        for t in 1..=prefix.len() {
            let step = m.decode_logits(&prefix[..t], &enc).unwrap();
            for (u, v) in step.iter().zip(full.row_slice(t - 1)) {
                assert!((u - v).abs() < 1e-10, "position {t}");
            }
        }
    }
}

#[test]
fn session_log_probs_normalise_and_match_logits() {
    let m = tiny_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = random_ids(&mut rng, 9, 32);
    let enc = m.encode(&input).unwrap();
    let mut s = m.session(&input).unwrap();
    let prefix = [BOS, 10, 11, 12];
    for t in 1..=prefix.len() {
        let lp = s.next_log_probs(&prefix[..t]).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let logits = m.decode_logits(&prefix[..t], &enc).unwrap();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (a, l) in lp.iter().zip(&logits) {
            assert!((a - (l - lse)).abs() < 1e-10);
        }
    }
}

#[test]
fn pooling_ignores_padding() {
    let states = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 6.0, 100.0, 100.0, 5.0, -2.0]).unwrap();
    let mask = [true, true, false, true];
    let p = pool(&states, &mask).unwrap();
    assert_eq!(p, vec![3.0, 2.0]);
    assert!(pool(&states, &[false; 4]).is_err());
}

#[test]
fn similarity_matches_dense_computation() {
    let m = tiny_model(9);
    let d = m.config.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let we = m.params.get("proj.w_e").unwrap();
    let wd = m.params.get("proj.w_d").unwrap();
    for _ in 0..10 {
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| w.get(i, j) * v[j]).sum())
                .collect()
        };
        let (a, b) = (proj(we, &h), proj(wd, &z));
        let expected: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((similarity(&h, &z, &m.params).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn pooled_encoder_gradient_passes_grad_check() {
    let cfg = ModelConfig::tiny(32);
    let params = ModelParams::init_with_std(&cfg, 11, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut input = random_ids(&mut rng, 6, 32);
    input.push(PAD);
    let w = Tensor::randn(&[cfg.model_dim, 1], 1.0, &mut rng);
    let f = |g: &mut Graph, vars: &[adgen_core::numeric::Var]| {
        let b = Bound::bind(&cfg, vars, true);
        let enc = encode_graph(g, &b, &cfg, &input, None)?;
        let h = pool_graph(g, enc.states, &enc.mask)?;
        let wv = g.constant(w.clone());
        g.matmul(h, wv)
    };
    let rep = grad_check(f, &params.tensors, &GradCheckConfig::default()).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{:e}", rep.max_rel_err);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let m = tiny_model(13);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let meta = save_checkpoint(&a, &m, "hash-1", "pretrain", Some(12.5)).unwrap();
    let (loaded, meta2) = load_checkpoint(&a, &LoadOptions::default()).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(loaded.params, m.params);
    save_checkpoint(&b, &loaded, "hash-1", "pretrain", Some(12.5)).unwrap();
    for f in ["weights.bin", "checkpoint.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn wrong_vocab_hash_is_rejected() {
    let m = tiny_model(14);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m, "right", "finetune", None).unwrap();
    let opts = LoadOptions {
        expected_vocab_hash: Some("wrong".into()),
        skip_projection: false,
    };
    let err = load_checkpoint(dir.path(), &opts).unwrap_err().to_string();
    assert!(err.contains("vocab"), "{err}");
}

#[test]
fn corrupted_weights_are_rejected() {
    let m = tiny_model(15);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m, "h", "finetune", None).unwrap();
    let p = dir.path().join("weights.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[17] ^= 0xff;
    std::fs::write(&p, bytes).unwrap();
    assert!(load_checkpoint(dir.path(), &LoadOptions::default()).is_err());
}

#[test]
fn generation_does_not_depend_on_projection_heads() {
    let words: Vec<String> = (0..26).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::build([&words]);
    let m = Model::init(ModelConfig::tiny(vocab.len()), 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m, &vocab.hash(), "finetune", None).unwrap();
    let with = load_checkpoint(dir.path(), &LoadOptions::default())
        .unwrap()
        .0;
    let without = load_checkpoint(
        dir.path(),
        &LoadOptions {
            expected_vocab_hash: Some(vocab.hash()),
            skip_projection: true,
        },
    )
    .unwrap()
    .0;
    assert!(with.params.has_projection());
    assert!(!without.params.has_projection());
    let cfg = BeamConfig {
        width: 3,
        max_len: 8,
        length_penalty: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let x: Vec<String> = (0..6)
            .map(|_| words[rng.gen_range(0..words.len())].clone())
            .collect();
        let (a, ra) = generate(&with, &vocab, &x[0], &x, &cfg).unwrap();
        let (b, rb) = generate(&without, &vocab, &x[0], &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.best.score.to_bits(), rb.best.score.to_bits());
    }
}

#[test]
fn outputs_stay_finite_over_many_random_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for pass in 0..1000 {
        let m_seed = pass as u64 % 10;
        let m = tiny_model(m_seed);
        let n = rng.gen_range(1..=m.config.max_src_len);
        let enc = m.encode(&random_ids(&mut rng, n, 32)).unwrap();
        assert!(enc.states.all_finite());
        let mut prefix = vec![BOS];
        let k = rng.gen_range(0..m.config.max_tgt_len);
        prefix.extend(random_ids(&mut rng, k, 32));
        let logits = m.decode_all_logits(&prefix, &enc).unwrap();
        assert!(logits.all_finite(), "pass {pass}");
    }
}
