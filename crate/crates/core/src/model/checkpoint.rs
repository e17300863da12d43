//! Checkpoint directory: `weights.bin` (little-endian f64, layout order) and
//! `checkpoint.json` (config, shapes, vocabulary hash, weight digest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.bin";
const MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    /// "pretrain" or "finetune".
    pub stage: String,
    pub dev_perplexity: Option<f64>,
    pub has_projection: bool,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Refuse checkpoints built against a different vocabulary.
    pub expected_vocab_hash: Option<String>,
    /// Drop projection heads even if present.
    pub skip_projection: bool,
}

fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    for t in &params.tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Writes `model` to `dir` (created if missing) and returns the manifest.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    vocab_hash: &str,
    stage: &str,
    dev_perplexity: Option<f64>,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_weights(&model.params);
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        stage: stage.to_string(),
        dev_perplexity: dev_perplexity.filter(|p| p.is_finite()),
        has_projection: model.params.has_projection(),
        tensors: model
            .params
            .names()
            .iter()
            .zip(&model.params.tensors)
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(meta)
}

/// Reads a checkpoint, verifying the digest, shapes and (optionally) vocabulary.
pub fn load_checkpoint(dir: &Path, opts: &LoadOptions) -> Result<(Model, CheckpointMeta)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    if let Some(expected) = &opts.expected_vocab_hash {
        if *expected != meta.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs data {}",
                meta.vocab_hash, expected
            )));
        }
    }
    meta.config.validate()?;
    let wpath = dir.join(WEIGHTS);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if hex::encode(Sha256::digest(&bytes)) != meta.weights_sha256 {
        return Err(Error::Checkpoint("weights digest mismatch".into()));
    }
    let total: usize = meta
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "weights file has {} bytes, manifest needs {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut params = ModelParams::from_parts(&meta.config, tensors, meta.has_projection)?;
    if params
        .names()
        .iter()
        .zip(&meta.tensors)
        .any(|(a, b)| *a != b.name)
    {
        return Err(Error::Checkpoint(
            "tensor names do not match the layout".into(),
        ));
    }
    if opts.skip_projection {
        params = params.without_projection();
    }
    Ok((Model::new(meta.config.clone(), params), meta))
}
