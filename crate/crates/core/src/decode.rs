//! Beam search, BLEU-4, ROUGE-1/2/L and the post-generation blocklist filter.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{AbSample, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{build_input, Model, Session};

/// Anything that scores the next token given a BOS-initial prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl StepModel for Session<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab_size()
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        Session::next_log_probs(self, prefix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum tokens generated after BOS, EOS included.
    pub max_len: usize,
    /// Exponent of the length divisor for finished hypotheses; 0 disables it.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len: 30,
            length_penalty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens between BOS and EOS.
    pub fn body(&self) -> &[usize] {
        let end = if self.tokens.last() == Some(&EOS) {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// No hypothesis reached EOS within `max_len`.
    pub truncated: bool,
    /// Finished hypotheses, in the order they were completed.
    pub finished: Vec<Hypothesis>,
}

fn ranking_score(h: &Hypothesis, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        h.score
    } else {
        h.score / ((h.tokens.len() - 1) as f64).powf(length_penalty)
    }
}

/// Beam search from BOS. PAD and BOS are never generated.
///
/// Each step keeps the `width` best extensions (ties broken by parent rank,
/// then token id); extensions ending in EOS are moved to the finished list.
pub fn beam_search<M: StepModel + ?Sized>(model: &mut M, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let vocab = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (rank, h) in live.iter().enumerate() {
            let lp = model.next_log_probs(&h.tokens)?;
            if lp.len() != vocab {
                return Err(Error::ShapeMismatch {
                    op: "beam_search",
                    left: vec![lp.len()],
                    right: vec![vocab],
                });
            }
            for (tok, &l) in lp.iter().enumerate() {
                if tok != PAD && tok != BOS && l.is_finite() {
                    candidates.push((h.score + l, rank, tok));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.width);
        for &(score, rank, tok) in candidates.iter().take(cfg.width) {
            let mut tokens = live[rank].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis { tokens, score };
            if tok == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // scores only decrease, so no live hypothesis can overtake the best finished one
        if cfg.length_penalty == 0.0 {
            let best_fin = finished
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_fin >= live[0].score {
                break;
            }
        }
    }

    let pick = |hs: &[Hypothesis]| -> Option<Hypothesis> {
        let mut best: Option<&Hypothesis> = None;
        for h in hs {
            if best.is_none_or(|b| {
                ranking_score(h, cfg.length_penalty) > ranking_score(b, cfg.length_penalty)
            }) {
                best = Some(h);
            }
        }
        best.cloned()
    };
    match pick(&finished) {
        Some(best) => Ok(BeamResult {
            best,
            truncated: false,
            finished,
        }),
        None => Ok(BeamResult {
            best: pick(&live).expect("live beam is non-empty when nothing finished"),
            truncated: true,
            finished,
        }),
    }
}

/// Step model that puts all mass on the next token of a fixed target.
pub struct CopyStep {
    target: Vec<usize>,
    vocab: usize,
}

impl CopyStep {
    /// `target` excludes BOS and EOS.
    pub fn new(target: Vec<usize>, vocab: usize) -> Self {
        CopyStep { target, vocab }
    }
}

impl StepModel for CopyStep {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let t = prefix.len() - 1;
        let next = self.target.get(t).copied().unwrap_or(EOS);
        let mut lp = vec![f64::NEG_INFINITY; self.vocab];
        lp[next] = 0.0;
        Ok(lp)
    }
}

/// One generated text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub source: String,
    pub control: String,
    pub generated: String,
    pub score: f64,
    pub truncated: bool,
}

/// Beam-decodes `[c, SEP, x]` and returns the body tokens as strings.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    control: &str,
    x: &[String],
    cfg: &BeamConfig,
) -> Result<(Vec<String>, BeamResult)> {
    let input = build_input(control, x, vocab, model.config.max_src_len);
    let mut session = model.session(&input)?;
    let cfg = BeamConfig {
        max_len: cfg.max_len.min(model.config.max_tgt_len - 1),
        ..cfg.clone()
    };
    let res = beam_search(&mut session, &cfg)?;
    Ok((vocab.decode(res.best.body()), res))
}

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|t| t.as_ref()).collect())
                .or_insert(0) += 1;
        }
    }
    out
}

fn clipped_overlap<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Matched and total n-gram counts for n = 1..4, plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let (m, t) = clipped_overlap(hyp, reference, n);
            s.matches[n - 1] = m;
            s.totals[n - 1] = t;
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Unigram precision unsmoothed; add-one for n >= 2; brevity penalty.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for i in 1..4 {
            log_sum += ((self.matches[i] + 1) as f64 / (self.totals[i] + 1) as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / 4.0).exp()
    }
}

/// Sentence-level BLEU-4.
pub fn bleu4<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    BleuStats::new(hyp, reference).score()
}

/// Corpus BLEU-4: counts are summed before the geometric mean.
pub fn corpus_bleu4<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        total.add(&BleuStats::new(h, r));
    }
    total.score()
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (hyp_total + ref_total) as f64
}

fn rouge_n<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let (m, ht) = clipped_overlap(hyp, reference, n);
    let rt = reference.len().saturating_sub(n - 1);
    if ht == 0 && rt == 0 {
        // both too short to have n-grams: fall back to exact equality
        let same = hyp.len() == reference.len()
            && hyp
                .iter()
                .zip(reference)
                .all(|(a, b)| a.as_ref() == b.as_ref());
        return if same && !hyp.is_empty() { 1.0 } else { 0.0 };
    }
    f1(m, ht, rt)
}

fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

/// ROUGE-1/2 F1 over clipped n-gram overlap, ROUGE-L F1 over the LCS.
pub fn rouge<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> RougeScores {
    RougeScores {
        rouge1: rouge_n(hyp, reference, 1),
        rouge2: rouge_n(hyp, reference, 2),
        rouge_l: f1(lcs_len(hyp, reference), hyp.len(), reference.len()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n: usize,
    pub width: usize,
    pub checkpoint: Option<String>,
}

/// Corpus BLEU and mean per-sample ROUGE of hypotheses against references.
pub fn score_generations(
    pairs: &[(Vec<String>, Vec<String>)],
    width: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("nothing to evaluate".into()));
    }
    let n = pairs.len() as f64;
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for (h, r) in pairs {
        let s = rouge(h, r);
        r1 += s.rouge1;
        r2 += s.rouge2;
        rl += s.rouge_l;
    }
    Ok(MetricReport {
        bleu4: corpus_bleu4(pairs),
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        n: pairs.len(),
        width,
        checkpoint: None,
    })
}

/// Generates with `gen` for every sample and scores against `y+`.
pub fn evaluate_with<F>(samples: &[AbSample], width: usize, mut gen: F) -> Result<MetricReport>
where
    F: FnMut(&AbSample) -> Result<Vec<String>>,
{
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        pairs.push((gen(s)?, s.pos_target.clone()));
    }
    score_generations(&pairs, width)
}

/// Beam-search evaluation of `model` on held-out samples.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    samples: &[AbSample],
    cfg: &BeamConfig,
) -> Result<MetricReport> {
    evaluate_with(samples, cfg.width, |s| {
        generate(model, vocab, &s.control, &s.source.tokens, cfg).map(|(toks, _)| toks)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// `true` when the text contains no blocked token.
    pub passed: Vec<bool>,
    pub passing_rate: f64,
}

/// Flags texts that contain any blocklisted token.
pub fn post_filter<T: AsRef<str>>(texts: &[Vec<T>], blocklist: &BTreeSet<String>) -> FilterOutcome {
    let passed: Vec<bool> = texts
        .iter()
        .map(|t| !t.iter().any(|w| blocklist.contains(w.as_ref())))
        .collect();
    let passing_rate = if passed.is_empty() {
        1.0
    } else {
        passed.iter().filter(|&&p| p).count() as f64 / passed.len() as f64
    };
    FilterOutcome {
        passed,
        passing_rate,
    }
}
