//! TOML run configuration. Every section is optional; command-line flags
//! override whatever is set here.

use std::fs;
use std::path::Path;

use adgen_core::corpus::{FilterRules, SynthConfig};
use adgen_core::decode::BeamConfig;
use adgen_core::masking::DEFAULT_ASPECTS_PER_REVIEW;
use adgen_core::model::ModelConfig;
use adgen_core::numeric::OptimConfig;
use adgen_core::objectives::ContrastiveConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub filter: FilterRules,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub contrastive: ContrastiveConfig,
    pub decode: DecodeSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Number of aspect terms to extract.
    pub aspects: usize,
    pub idf_band: (f64, f64),
    pub per_review: usize,
    /// train / dev / test fractions.
    pub split: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            aspects: 8,
            idf_band: (1.2, 3.0),
            per_review: DEFAULT_ASPECTS_PER_REVIEW,
            split: (0.7, 0.1, 0.2),
        }
    }
}

/// Model shape without the vocabulary size, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        ModelSection {
            layers: d.layers,
            model_dim: d.model_dim,
            heads: d.heads,
            ffn_dim: d.ffn_dim,
            max_src_len: d.max_src_len,
            max_tgt_len: d.max_tgt_len,
            dropout: d.dropout,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<usize>,
    pub max_steps: Option<usize>,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        DecodeSection {
            beam: b.width,
            max_len: b.max_len,
            length_penalty: b.length_penalty,
        }
    }
}
