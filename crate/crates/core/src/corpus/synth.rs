//! Template-based synthetic reviews and A/B pairs.
//!
//! Reviews are comma-separated segments; some describe an aspect
//! ("the taste is very sweet"), the rest are filler words. Each A/B pair
//! talks about one aspect of its source review; the higher-CTR text is
//! framed with positive-style marker tokens, the lower-CTR one with
//! neutral tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, AbSample, ClickStats, Review, ReviewCorpus};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_reviews: usize,
    pub n_absamples: usize,
    /// Number of distinct filler words (`w0`, `w1`, ...).
    pub filler_vocab: usize,
    /// Aspect term and the opinion words that may describe it.
    pub lexicon: Vec<(String, Vec<String>)>,
    pub intensifiers: Vec<String>,
    pub positive_style: Vec<String>,
    pub neutral_style: Vec<String>,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_impressions: u64,
    pub max_impressions: u64,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        let lexicon = [
            ("taste", ["sweet", "delicious", "rich"]),
            ("price", ["cheap", "fair", "affordable"]),
            ("service", ["friendly", "quick", "warm"]),
            ("portion", ["generous", "large", "filling"]),
            ("delivery", ["fast", "punctual", "careful"]),
            ("freshness", ["crisp", "juicy", "ripe"]),
            ("packaging", ["neat", "sturdy", "tidy"]),
            ("staff", ["helpful", "polite", "kind"]),
        ]
        .iter()
        .map(|(a, os)| (a.to_string(), words(os)))
        .collect();
        SynthConfig {
            n_reviews: 200,
            n_absamples: 200,
            filler_vocab: 40,
            lexicon,
            intensifiers: words(&["very", "really", "quite"]),
            positive_style: words(&["wow", "must-try", "amazing", "love"]),
            neutral_style: words(&["overall", "here", "today"]),
            min_segments: 2,
            max_segments: 4,
            min_impressions: 800,
            max_impressions: 6000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.lexicon.is_empty() || self.lexicon.iter().any(|(_, os)| os.is_empty()) {
            return bad("lexicon needs at least one aspect, each with an opinion word");
        }
        if self.positive_style.len() < 2 || self.neutral_style.len() < 2 {
            return bad("positive and neutral style sets need at least two tokens");
        }
        if self.intensifiers.is_empty() || self.filler_vocab == 0 {
            return bad("intensifiers and filler vocabulary must be non-empty");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad("need 1 <= min_segments <= max_segments");
        }
        if self.min_impressions == 0 || self.min_impressions > self.max_impressions {
            return bad("need 0 < min_impressions <= max_impressions");
        }
        let all: Vec<String> = self
            .lexicon
            .iter()
            .flat_map(|(a, os)| std::iter::once(a).chain(os))
            .chain(&self.positive_style)
            .chain(&self.neutral_style)
            .chain(&self.intensifiers)
            .cloned()
            .collect();
        if all.iter().any(|w| tokenize(w) != vec![w.clone()]) {
            return bad("lexicon entries must be single lowercase tokens");
        }
        Ok(())
    }
}

struct GeneratedReview {
    review: Review,
    /// (aspect index, opinion) for each aspect segment, in text order.
    aspects: Vec<(usize, String)>,
}

fn gen_review(cfg: &SynthConfig, id: String, rng: &mut ChaCha8Rng) -> GeneratedReview {
    let n_seg = rng.gen_range(cfg.min_segments..=cfg.max_segments);
    let n_asp = rng.gen_range(1..=n_seg.min(2).min(cfg.lexicon.len()));
    let mut aspect_ids: Vec<usize> = (0..cfg.lexicon.len()).collect();
    aspect_ids.shuffle(rng);
    aspect_ids.truncate(n_asp);

    // segment slots: Some(aspect) or None (filler)
    let mut slots: Vec<Option<usize>> = aspect_ids.iter().map(|&a| Some(a)).collect();
    slots.resize(n_seg, None);
    slots.shuffle(rng);

    let mut segments = Vec::with_capacity(n_seg);
    let mut aspects = Vec::new();
    for slot in slots {
        match slot {
            Some(a) => {
                let (term, opinions) = &cfg.lexicon[a];
                let op = opinions.choose(rng).expect("validated").clone();
                let int = cfg.intensifiers.choose(rng).expect("validated");
                segments.push(format!("the {term} is {int} {op}"));
                aspects.push((a, op));
            }
            None => {
                let n = rng.gen_range(2..=4);
                let fill: Vec<String> = (0..n)
                    .map(|_| format!("w{}", rng.gen_range(0..cfg.filler_vocab)))
                    .collect();
                segments.push(fill.join(" "));
            }
        }
    }
    let raw = format!("{} .", segments.join(" , "));
    let review = Review::new(id, raw).expect("generated reviews are non-empty");
    GeneratedReview { review, aspects }
}

fn two_distinct(set: &[String], rng: &mut ChaCha8Rng) -> (String, String) {
    let picked: Vec<&String> = set.choose_multiple(rng, 2).collect();
    (picked[0].clone(), picked[1].clone())
}

fn gen_stats(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (ClickStats, ClickStats) {
    let pos_imp = rng.gen_range(cfg.min_impressions..=cfg.max_impressions);
    let neg_imp = rng.gen_range(cfg.min_impressions..=cfg.max_impressions);
    let base: f64 = rng.gen_range(0.03..0.08);
    let lift: f64 = rng.gen_range(1.1..1.8);
    let mut pos_clk = ((base * lift) * pos_imp as f64).round() as u64;
    let mut neg_clk = (base * neg_imp as f64).round() as u64;
    // rounding may tie the two CTRs; restore the strict ordering
    while pos_clk * neg_imp <= neg_clk * pos_imp {
        if neg_clk > 0 {
            neg_clk -= 1;
        } else {
            pos_clk += 1;
        }
    }
    (
        ClickStats::new(pos_imp, pos_clk.min(pos_imp)).expect("ctr < 1"),
        ClickStats::new(neg_imp, neg_clk).expect("ctr < 1"),
    )
}

/// Generates a review corpus and a set of A/B samples, deterministically from `seed`.
pub fn synth_data(cfg: &SynthConfig, seed: u64) -> Result<(ReviewCorpus, Vec<AbSample>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reviews = (0..cfg.n_reviews)
        .map(|i| gen_review(cfg, format!("rev{i:06}"), &mut rng).review)
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_absamples);
    for _ in 0..cfg.n_absamples {
        let g = gen_review(cfg, String::new(), &mut rng);
        let (a, opinion) = g
            .aspects
            .choose(&mut rng)
            .expect("one aspect per review")
            .clone();
        let term = cfg.lexicon[a].0.clone();
        let (p1, p2) = two_distinct(&cfg.positive_style, &mut rng);
        let (n1, n2) = two_distinct(&cfg.neutral_style, &mut rng);
        let pos = vec![p1, opinion.clone(), term.clone(), p2];
        let neg = vec![n1, opinion, term.clone(), n2];
        let (ps, ns) = gen_stats(cfg, &mut rng);
        samples.push(AbSample::new(g.review, term, pos, neg, ps, ns)?);
    }
    Ok((ReviewCorpus::new(reviews), samples))
}
