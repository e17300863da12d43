use adgen_core::corpus::tokenize;
use adgen_core::corpus::*;
use adgen_core::decode::*;
use std::collections::BTreeSet;

#[test]
fn bleu_identity_and_disjoint() {
    let a = tokenize("the taste is very sweet");
    assert!((bleu4(&a, &a) - 1.0).abs() < 1e-12);
    assert_eq!(bleu4(&tokenize("x y z"), &tokenize("a b c")), 0.0);
}

#[test]
fn bleu_one_substitution() {
    let h = tokenize("a b c d e");
    let r = tokenize("a b c d f");
    let expected = (0.8f64 * (4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0)).powf(0.25);
    assert!((bleu4(&h, &r) - expected).abs() < 1e-12);
}

#[test]
fn rouge_cat_fixture() {
    let s = rouge(&tokenize("the cat sat"), &tokenize("the cat ran"));
    assert!((s.rouge1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((s.rouge2 - 0.5).abs() < 1e-12);
    assert!((s.rouge_l - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn rouge_short_sequences() {
    let a = tokenize("wow");
    let s = rouge(&a, &a);
    assert_eq!((s.rouge1, s.rouge2, s.rouge_l), (1.0, 1.0, 1.0));
    let s = rouge(&a, &tokenize("ok"));
    assert_eq!((s.rouge1, s.rouge2, s.rouge_l), (0.0, 0.0, 0.0));
    let empty: Vec<String> = vec![];
    assert_eq!(rouge(&empty, &a).rouge1, 0.0);
}

#[test]
fn copy_step_beam_reproduces_target() {
    let mut m = CopyStep::new(vec![7, 8, 9], 12);
    let r = beam_search(&mut m, &BeamConfig::default()).unwrap();
    assert_eq!(r.best.tokens, vec![BOS, 7, 8, 9, EOS]);
    assert_eq!(r.best.body(), &[7, 8, 9]);
    assert!(!r.truncated);
    assert_eq!(r.best.score, 0.0);
}

#[test]
fn truncation_flag() {
    let mut m = CopyStep::new(vec![7; 10], 12);
    let cfg = BeamConfig {
        width: 2,
        max_len: 3,
        length_penalty: 0.0,
    };
    let r = beam_search(&mut m, &cfg).unwrap();
    assert!(r.truncated);
    assert_eq!(r.best.tokens, vec![BOS, 7, 7, 7]);
}

#[test]
fn post_filter_counts() {
    let texts = vec![tokenize("fresh fruit"), tokenize("scam deal")];
    let none = post_filter(&texts, &BTreeSet::new());
    assert_eq!(none.passing_rate, 1.0);
    let block: BTreeSet<String> = ["scam".to_string()].into();
    let out = post_filter(&texts, &block);
    assert_eq!(out.passed, vec![true, false]);
    assert_eq!(out.passing_rate, 0.5);
}

#[test]
fn bad_beam_config() {
    let mut m = CopyStep::new(vec![], 8);
    let cfg = BeamConfig {
        width: 0,
        ..Default::default()
    };
    assert!(beam_search(&mut m, &cfg).is_err());
}
