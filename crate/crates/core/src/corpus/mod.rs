//! Reviews, A/B samples, vocabulary, JSONL interchange and dataset filters.

mod filter;
mod jsonl;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use filter::{ab_significance, filter_absamples, filter_reviews, split_dataset};
pub use jsonl::{
    load_absamples, load_aspects, load_jsonl, load_reviews, load_triples, load_vocab,
    save_absamples, save_aspects, save_jsonl, save_reviews, save_triples, save_vocab, RecordKind,
    Records,
};
pub use synth::{synth_data, SynthConfig};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SEP: usize = 5;

pub const PAD_TOKEN: &str = "[PAD]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const SPECIALS: [&str; 6] = [
    PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN,
];

/// Separators used by both the tokenizer and the segmenter.
pub const DEFAULT_PUNCTUATION: [char; 9] = [',', '。', '，', ';', '；', '!', '？', '?', '.'];

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercasing whitespace tokenizer that also splits punctuation marks into
/// their own tokens. Special tokens such as `[MASK]` pass through unchanged.
#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    pub punctuation: Vec<char>,
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        WhitespaceTokenizer {
            punctuation: DEFAULT_PUNCTUATION.to_vec(),
        }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            if is_special(chunk) {
                out.push(chunk.to_string());
                continue;
            }
            let mut cur = String::new();
            for ch in chunk.chars() {
                if self.punctuation.contains(&ch) {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(ch.to_string());
                } else {
                    cur.extend(ch.to_lowercase());
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
        }
        out
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    WhitespaceTokenizer::default().tokenize(text)
}

pub fn join_tokens(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token ↔ index map with the six special tokens at indices 0–5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Specials followed by the sorted set of tokens found in `sequences`.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut set = BTreeSet::new();
        for seq in sequences {
            for t in seq.as_ref() {
                if !is_special(t) {
                    set.insert(t.clone());
                }
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Vocab::from_tokens(tokens).expect("specials are in place")
    }

    /// Vocabulary covering reviews, A/B sources and both targets.
    pub fn for_pipeline(reviews: &[Review], samples: &[AbSample]) -> Self {
        let seqs = reviews.iter().map(|r| &r.tokens).chain(
            samples
                .iter()
                .flat_map(|s| [&s.source.tokens, &s.pos_target, &s.neg_target]),
        );
        let controls: Vec<Vec<String>> = samples.iter().map(|s| vec![s.control.clone()]).collect();
        Vocab::build(seqs.chain(controls.iter()))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocab index {i} must hold {s}")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Index of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub tokens: Vec<String>,
    pub raw: String,
}

impl Review {
    pub fn new(id: impl Into<String>, raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        let tokens = tokenize(&raw);
        Review::from_tokens(id, raw, tokens)
    }

    pub fn from_tokens(id: impl Into<String>, raw: String, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Precondition("review has no tokens".into()));
        }
        if let Some(t) = tokens.iter().find(|t| is_special(t)) {
            return Err(Error::Precondition(format!(
                "review contains special token {t}"
            )));
        }
        Ok(Review {
            id: id.into(),
            tokens,
            raw,
        })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

/// Reviews plus the document frequencies used for IDF weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct ReviewCorpus {
    pub reviews: Vec<Review>,
    pub vocab: Vocab,
    pub doc_freq: BTreeMap<String, usize>,
}

impl ReviewCorpus {
    pub fn new(reviews: Vec<Review>) -> Self {
        let vocab = Vocab::build(reviews.iter().map(|r| &r.tokens));
        ReviewCorpus::with_vocab(reviews, vocab)
    }

    pub fn with_vocab(reviews: Vec<Review>, vocab: Vocab) -> Self {
        let mut doc_freq = BTreeMap::new();
        for r in &reviews {
            let uniq: BTreeSet<&String> = r.tokens.iter().collect();
            for t in uniq {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        ReviewCorpus {
            reviews,
            vocab,
            doc_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn df(&self, token: &str) -> usize {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    /// `ln(N / df)`; `None` for tokens that never occur.
    pub fn idf(&self, token: &str) -> Option<f64> {
        let df = self.df(token);
        (df > 0).then(|| (self.len() as f64 / df as f64).ln())
    }

    /// `ln((1 + N) / (1 + df)) + 1`, strictly positive for every token.
    pub fn smooth_idf(&self, token: &str) -> f64 {
        ((1.0 + self.len() as f64) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickStats {
    pub impressions: u64,
    pub clicks: u64,
}

impl ClickStats {
    pub fn new(impressions: u64, clicks: u64) -> Result<Self> {
        if clicks > impressions {
            return Err(Error::ClickStats {
                clicks,
                impressions,
            });
        }
        Ok(ClickStats {
            impressions,
            clicks,
        })
    }

    pub fn ctr(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }
}

/// One A/B-tested pair of ad texts for a (review, aspect) input.
///
/// Freshly loaded records may have the labels the wrong way round;
/// [`filter_absamples`] repairs them so that `pos` has the higher CTR.
#[derive(Clone, Debug, PartialEq)]
pub struct AbSample {
    pub source: Review,
    pub control: String,
    pub pos_target: Vec<String>,
    pub neg_target: Vec<String>,
    pub pos_stats: ClickStats,
    pub neg_stats: ClickStats,
}

impl AbSample {
    pub fn new(
        source: Review,
        control: String,
        pos_target: Vec<String>,
        neg_target: Vec<String>,
        pos_stats: ClickStats,
        neg_stats: ClickStats,
    ) -> Result<Self> {
        if pos_target.is_empty() || neg_target.is_empty() {
            return Err(Error::Precondition("A/B targets must be non-empty".into()));
        }
        if !source.contains(&control) {
            return Err(Error::Precondition(format!(
                "control term {control:?} does not occur in the source"
            )));
        }
        Ok(AbSample {
            source,
            control,
            pos_target,
            neg_target,
            pos_stats,
            neg_stats,
        })
    }

    pub fn swapped(self) -> Self {
        AbSample {
            pos_target: self.neg_target,
            neg_target: self.pos_target,
            pos_stats: self.neg_stats,
            neg_stats: self.pos_stats,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub min_len: usize,
    pub max_len: usize,
    /// Longest allowed run of one repeated token.
    pub max_repeat_run: usize,
    pub blocklist: BTreeSet<String>,
    pub z_threshold: f64,
    pub min_impressions: u64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_len: 3,
            max_len: 128,
            max_repeat_run: 3,
            blocklist: BTreeSet::new(),
            z_threshold: 1.96,
            min_impressions: 1000,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} > max_len {}",
                self.min_len, self.max_len
            )));
        }
        if self.z_threshold.is_nan() || self.z_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "z_threshold must be positive, got {}",
                self.z_threshold
            )));
        }
        Ok(())
    }
}
