//! One-record-per-line UTF-8 JSON for reviews, A/B samples, aspects and
//! masked triples. Text fields are stored as raw strings and tokenized on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{join_tokens, tokenize, AbSample, ClickStats, Review, Vocab};
use crate::error::{Error, Result};
use crate::masking::{AspectTerm, MaskedTriple};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Reviews,
    AbSamples,
    Aspects,
    Triples,
}

impl std::str::FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reviews" => Ok(RecordKind::Reviews),
            "absamples" => Ok(RecordKind::AbSamples),
            "aspects" => Ok(RecordKind::Aspects),
            "triples" => Ok(RecordKind::Triples),
            other => Err(Error::Config(format!(
                "unknown record kind {other:?} (expected reviews|absamples|aspects|triples)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Reviews(Vec<Review>),
    AbSamples(Vec<AbSample>),
    Aspects(Vec<AspectTerm>),
    Triples(Vec<MaskedTriple>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Reviews(v) => v.len(),
            Records::AbSamples(v) => v.len(),
            Records::Aspects(v) => v.len(),
            Records::Triples(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_jsonl(path: &Path, kind: RecordKind) -> Result<Records> {
    Ok(match kind {
        RecordKind::Reviews => Records::Reviews(load_reviews(path)?),
        RecordKind::AbSamples => Records::AbSamples(load_absamples(path)?),
        RecordKind::Aspects => Records::Aspects(load_aspects(path)?),
        RecordKind::Triples => Records::Triples(load_triples(path)?),
    })
}

pub fn save_jsonl(path: &Path, records: &Records) -> Result<()> {
    match records {
        Records::Reviews(v) => save_reviews(path, v),
        Records::AbSamples(v) => save_absamples(path, v),
        Records::Aspects(v) => save_aspects(path, v),
        Records::Triples(v) => save_triples(path, v),
    }
}

fn read_objects(path: &Path) -> Result<Vec<(usize, Map<String, Value>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(map) => out.push((line_no, map)),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(out)
}

fn str_field<'a>(map: &'a Map<String, Value>, field: &str, line: usize) -> Result<&'a str> {
    match map.get(field) {
        None => Err(Error::MissingField {
            line,
            field: field.into(),
        }),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::InvalidRecord {
            line,
            message: format!("field `{field}` must be a string"),
        }),
    }
}

fn u64_field(map: &Map<String, Value>, field: &str, line: usize) -> Result<u64> {
    match map.get(field) {
        None => Err(Error::MissingField {
            line,
            field: field.into(),
        }),
        Some(v) => v.as_u64().ok_or_else(|| Error::InvalidRecord {
            line,
            message: format!("field `{field}` must be a non-negative integer"),
        }),
    }
}

fn f64_field(map: &Map<String, Value>, field: &str, line: usize) -> Result<f64> {
    match map.get(field) {
        None => Err(Error::MissingField {
            line,
            field: field.into(),
        }),
        Some(v) => v.as_f64().ok_or_else(|| Error::InvalidRecord {
            line,
            message: format!("field `{field}` must be a number"),
        }),
    }
}

fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ClickStats { .. } => Error::InvalidRecord {
            line,
            message: e.to_string(),
        },
        Error::Precondition(m) => Error::InvalidRecord { line, message: m },
        other => other,
    })
}

fn nonempty_tokens(text: &str, field: &str, line: usize) -> Result<Vec<String>> {
    let t = tokenize(text);
    if t.is_empty() {
        return Err(Error::InvalidRecord {
            line,
            message: format!("field `{field}` has no tokens"),
        });
    }
    Ok(t)
}

pub fn load_reviews(path: &Path) -> Result<Vec<Review>> {
    read_objects(path)?
        .into_iter()
        .map(|(line, m)| {
            let id = str_field(&m, "id", line)?;
            let text = str_field(&m, "text", line)?;
            at_line(line, Review::new(id, text))
        })
        .collect()
}

pub fn load_absamples(path: &Path) -> Result<Vec<AbSample>> {
    read_objects(path)?
        .into_iter()
        .map(|(line, m)| {
            let source = at_line(line, Review::new("", str_field(&m, "source", line)?))?;
            let control = str_field(&m, "control", line)?.to_lowercase();
            let pos = nonempty_tokens(str_field(&m, "pos", line)?, "pos", line)?;
            let neg = nonempty_tokens(str_field(&m, "neg", line)?, "neg", line)?;
            let pos_stats = at_line(
                line,
                ClickStats::new(
                    u64_field(&m, "pos_imp", line)?,
                    u64_field(&m, "pos_clk", line)?,
                ),
            )?;
            let neg_stats = at_line(
                line,
                ClickStats::new(
                    u64_field(&m, "neg_imp", line)?,
                    u64_field(&m, "neg_clk", line)?,
                ),
            )?;
            at_line(
                line,
                AbSample::new(source, control, pos, neg, pos_stats, neg_stats),
            )
        })
        .collect()
}

pub fn load_aspects(path: &Path) -> Result<Vec<AspectTerm>> {
    read_objects(path)?
        .into_iter()
        .map(|(line, m)| {
            let term = str_field(&m, "term", line)?;
            let idf = f64_field(&m, "idf", line)?;
            at_line(line, AspectTerm::new(term, idf))
        })
        .collect()
}

pub fn load_triples(path: &Path) -> Result<Vec<MaskedTriple>> {
    read_objects(path)?
        .into_iter()
        .map(|(line, m)| {
            let masked = tokenize(str_field(&m, "masked", line)?);
            let control = str_field(&m, "control", line)?.to_lowercase();
            let target = nonempty_tokens(str_field(&m, "target", line)?, "target", line)?;
            at_line(line, MaskedTriple::new(masked, control, target))
        })
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ReviewRow<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct AbSampleRow<'a> {
    source: &'a str,
    control: &'a str,
    pos: String,
    neg: String,
    pos_imp: u64,
    pos_clk: u64,
    neg_imp: u64,
    neg_clk: u64,
}

#[derive(Serialize)]
struct AspectRow<'a> {
    term: &'a str,
    idf: f64,
}

#[derive(Serialize)]
struct TripleRow<'a> {
    masked: String,
    control: &'a str,
    target: String,
}

pub fn save_reviews(path: &Path, reviews: &[Review]) -> Result<()> {
    write_lines(
        path,
        reviews.iter().map(|r| ReviewRow {
            id: &r.id,
            text: &r.raw,
        }),
    )
}

pub fn save_absamples(path: &Path, samples: &[AbSample]) -> Result<()> {
    write_lines(
        path,
        samples.iter().map(|s| AbSampleRow {
            source: &s.source.raw,
            control: &s.control,
            pos: join_tokens(&s.pos_target),
            neg: join_tokens(&s.neg_target),
            pos_imp: s.pos_stats.impressions,
            pos_clk: s.pos_stats.clicks,
            neg_imp: s.neg_stats.impressions,
            neg_clk: s.neg_stats.clicks,
        }),
    )
}

pub fn save_aspects(path: &Path, aspects: &[AspectTerm]) -> Result<()> {
    write_lines(
        path,
        aspects.iter().map(|a| AspectRow {
            term: &a.term,
            idf: a.idf,
        }),
    )
}

pub fn save_triples(path: &Path, triples: &[MaskedTriple]) -> Result<()> {
    write_lines(
        path,
        triples.iter().map(|t| TripleRow {
            masked: join_tokens(&t.masked_source),
            control: &t.control,
            target: join_tokens(&t.pseudo_target),
        }),
    )
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let text = serde_json::to_string_pretty(&serde_json::json!({ "tokens": vocab.tokens() }))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    #[derive(serde::Deserialize)]
    struct VocabFile {
        tokens: Vec<String>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: VocabFile = serde_json::from_str(&text)?;
    Vocab::from_tokens(f.tokens)
}
