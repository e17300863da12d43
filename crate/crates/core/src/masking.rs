//! Aspect-controlled masking: aspect extraction, segmentation, TF-IDF
//! matching, pseudo-target selection and the segment-extraction baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Review, ReviewCorpus, DEFAULT_PUNCTUATION, MASK_TOKEN};
use crate::error::{Error, Result};

/// Default number of triples emitted per review in [`build_pretrain_set`].
pub const DEFAULT_ASPECTS_PER_REVIEW: usize = 2;
/// Default minimum token length of a displayable [`seg_ext`] result.
pub const DEFAULT_MIN_DISPLAY_LEN: usize = 5;

/// A single-token aspect term used as a control code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectTerm {
    pub term: String,
    pub idf: f64,
}

impl AspectTerm {
    pub fn new(term: impl Into<String>, idf: f64) -> Result<Self> {
        let term = term.into();
        if tokenize(&term) != [term.clone()] {
            return Err(Error::Precondition(format!(
                "aspect term {term:?} must be a single lowercase token"
            )));
        }
        if !(idf >= 0.0 && idf.is_finite()) {
            return Err(Error::Precondition(format!(
                "aspect idf must be >= 0, got {idf}"
            )));
        }
        Ok(AspectTerm { term, idf })
    }
}

/// Contiguous span `[start, end)` of a review's tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Pre-training example: masked review, control term, masked-out span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTriple {
    pub masked_source: Vec<String>,
    pub control: String,
    pub pseudo_target: Vec<String>,
}

impl MaskedTriple {
    pub fn new(
        masked_source: Vec<String>,
        control: String,
        pseudo_target: Vec<String>,
    ) -> Result<Self> {
        let masks = masked_source.iter().filter(|t| *t == MASK_TOKEN).count();
        if masks != 1 {
            return Err(Error::Precondition(format!(
                "masked source must contain exactly one {MASK_TOKEN}, found {masks}"
            )));
        }
        if pseudo_target.is_empty() {
            return Err(Error::Precondition("pseudo-target is empty".into()));
        }
        Ok(MaskedTriple {
            masked_source,
            control,
            pseudo_target,
        })
    }

    /// Review tokens with the pseudo-target put back in place of the mask.
    pub fn unmask(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.masked_source.len() + self.pseudo_target.len());
        for t in &self.masked_source {
            if t == MASK_TOKEN {
                out.extend(self.pseudo_target.iter().cloned());
            } else {
                out.push(t.clone());
            }
        }
        out
    }
}

fn is_separator(token: &str, punctuation: &[char]) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if punctuation.contains(&c))
}

/// Splits a review at punctuation tokens, dropping empty pieces.
pub fn segment(review: &Review) -> Vec<Segment> {
    segment_tokens(&review.tokens, &DEFAULT_PUNCTUATION)
}

pub fn segment_tokens(tokens: &[String], punctuation: &[char]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..=tokens.len() {
        if i == tokens.len() || is_separator(&tokens[i], punctuation) {
            if i > start {
                out.push(Segment {
                    tokens: tokens[start..i].to_vec(),
                    start,
                    end: i,
                });
            }
            start = i + 1;
        }
    }
    out
}

/// Frequency-ranked aspect candidates whose IDF lies in `idf_band` (inclusive).
///
/// Stands in for a learned aspect extractor; any externally produced aspect
/// list can be used in its place.
pub fn extract_aspects(
    corpus: &ReviewCorpus,
    k: usize,
    idf_band: (f64, f64),
) -> Result<Vec<AspectTerm>> {
    if corpus.is_empty() {
        return Err(Error::EmptyData(
            "aspect extraction needs a non-empty corpus".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let (lo, hi) = idf_band;
    let mut candidates: Vec<(&String, usize, f64)> = corpus
        .doc_freq
        .iter()
        .filter(|(t, _)| !is_separator(t, &DEFAULT_PUNCTUATION))
        .filter(|(t, _)| t.chars().any(char::is_alphabetic))
        .filter_map(|(t, &df)| {
            let idf = corpus.idf(t)?;
            (idf >= lo && idf <= hi).then_some((t, df, idf))
        })
        .collect();
    // doc_freq iterates in token order, so the stable sort breaks ties alphabetically
    candidates.sort_by_key(|c| std::cmp::Reverse(c.1));
    candidates
        .into_iter()
        .take(k)
        .map(|(t, _, idf)| AspectTerm::new(t.clone(), idf))
        .collect()
}

fn tfidf_vector<'a>(
    tokens: impl IntoIterator<Item = &'a String>,
    corpus: &ReviewCorpus,
) -> BTreeMap<&'a str, f64> {
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    for (t, w) in tf.iter_mut() {
        *w *= corpus.smooth_idf(t);
    }
    tf
}

/// Cosine similarity between the TF-IDF vectors of `{control}` and `seg`.
pub fn tfidf_match(control: &str, seg: &Segment, corpus: &ReviewCorpus) -> f64 {
    let c = control.to_string();
    let cv = tfidf_vector(std::iter::once(&c), corpus);
    let sv = tfidf_vector(&seg.tokens, corpus);
    let dot: f64 = cv
        .iter()
        .filter_map(|(t, w)| sv.get(t).map(|v| w * v))
        .sum();
    let norm = |v: &BTreeMap<&str, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    let denom = norm(&cv) * norm(&sv);
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(0.0, 1.0)
    }
}

fn require_control(x: &Review, control: &str) -> Result<()> {
    if x.contains(control) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "control term {control:?} does not occur in review {:?}",
            x.id
        )))
    }
}

fn best_segment(segs: &[Segment], control: &str, corpus: &ReviewCorpus) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in segs.iter().enumerate() {
        let score = tfidf_match(control, s, corpus);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best
}

/// Segment with the highest matching score against `control`; earliest wins ties.
pub fn select_pseudo_target(x: &Review, control: &str, corpus: &ReviewCorpus) -> Result<Segment> {
    require_control(x, control)?;
    let segs = segment(x);
    let (i, _) = best_segment(&segs, control, corpus)
        .ok_or_else(|| Error::Precondition("review has no segments".into()))?;
    Ok(segs[i].clone())
}

/// Replaces `target`'s span in `x` with a single mask token.
pub fn mask(x: &Review, target: &Segment, control: &str) -> Result<MaskedTriple> {
    let ok = target.start < target.end
        && target.end <= x.tokens.len()
        && x.tokens[target.start..target.end] == target.tokens[..];
    if !ok {
        return Err(Error::Precondition(format!(
            "segment [{}, {}) does not match review {:?}",
            target.start, target.end, x.id
        )));
    }
    let mut masked = x.tokens[..target.start].to_vec();
    masked.push(MASK_TOKEN.to_string());
    masked.extend_from_slice(&x.tokens[target.end..]);
    MaskedTriple::new(masked, control.to_string(), target.tokens.clone())
}

/// One triple per (review, aspect) occurrence, at most `per_review` per review,
/// following the order of `aspects`.
pub fn build_pretrain_set(
    corpus: &ReviewCorpus,
    aspects: &[AspectTerm],
    per_review: usize,
) -> Result<Vec<MaskedTriple>> {
    if aspects.is_empty() {
        return Err(Error::Precondition("aspect list is empty".into()));
    }
    let mut out = Vec::new();
    for r in &corpus.reviews {
        for a in aspects
            .iter()
            .filter(|a| r.contains(&a.term))
            .take(per_review)
        {
            let seg = select_pseudo_target(r, &a.term, corpus)?;
            out.push(mask(r, &seg, &a.term)?);
        }
    }
    Ok(out)
}

/// Extractive baseline: the best-matching segment, extended by its better
/// scoring neighbour (left on ties) when shorter than `min_display_len`.
pub fn seg_ext(
    x: &Review,
    control: &str,
    min_display_len: usize,
    corpus: &ReviewCorpus,
) -> Result<Vec<String>> {
    require_control(x, control)?;
    let segs = segment(x);
    let (i, _) = best_segment(&segs, control, corpus)
        .ok_or_else(|| Error::Precondition("review has no segments".into()))?;
    let seg = &segs[i];
    if seg.len() >= min_display_len {
        return Ok(seg.tokens.clone());
    }
    let left = i
        .checked_sub(1)
        .map(|j| (j, tfidf_match(control, &segs[j], corpus)));
    let right = segs
        .get(i + 1)
        .map(|s| (i + 1, tfidf_match(control, s, corpus)));
    let (start, end) = match (left, right) {
        (Some((l, ls)), Some((_, rs))) if ls >= rs => (segs[l].start, seg.end),
        (Some(_), Some((r, _))) => (seg.start, segs[r].end),
        (Some((l, _)), None) => (segs[l].start, seg.end),
        (None, Some((r, _))) => (seg.start, segs[r].end),
        (None, None) => (seg.start, seg.end),
    };
    Ok(x.tokens[start..end].to_vec())
}
