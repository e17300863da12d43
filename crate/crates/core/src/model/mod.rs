//! Transformer encoder-decoder with a control-code-prefixed source, mean
//! pooling and the two projection heads used by the InfoNCE similarity.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, LoadOptions, CHECKPOINT_VERSION,
};
pub use layers::{
    decode_graph, encode_graph, logits_graph, pool_graph, similarity_graph, Bound, EncodedVars,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Default desk-scale size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_src_len: 64,
            max_tgt_len: 32,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }

    /// Four layers, width 512, inputs up to 128 tokens.
    pub fn base_scale(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            layers: 4,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            max_src_len: 128,
            max_tgt_len: 128,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            layers: 2,
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_src_len: 16,
            max_tgt_len: 12,
            dropout: 0.0,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 6 {
            return bad(format!(
                "vocab_size {} leaves no room for specials",
                self.vocab_size
            ));
        }
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("layers, model_dim, heads and ffn_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.max_src_len < 2 {
            return bad("max_src_len must be at least 2 (control code and SEP)".into());
        }
        if self.max_tgt_len < 2 {
            return bad("max_tgt_len must be at least 2 (BOS and EOS)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

/// Name, shape and initialiser of every parameter, in storage order.
fn layout(cfg: &ModelConfig, with_projection: bool) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal);
    push("enc_pos".into(), vec![cfg.max_src_len, d], Init::Normal);
    push("dec_pos".into(), vec![cfg.max_tgt_len, d], Init::Normal);
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.w{w}"), vec![d, d], Init::Normal);
            push(format!("{p}.b{w}"), vec![1, d], Init::Zeros);
        }
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.gain"), vec![1, d], Init::Ones);
        push(format!("{p}.bias"), vec![1, d], Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, cfg.ffn_dim], Init::Normal);
        push(format!("{p}.b1"), vec![1, cfg.ffn_dim], Init::Zeros);
        push(format!("{p}.w2"), vec![cfg.ffn_dim, d], Init::Normal);
        push(format!("{p}.b2"), vec![1, d], Init::Zeros);
    };
    for l in 0..cfg.layers {
        attn(&mut push, &format!("enc{l}.self"));
        norm(&mut push, &format!("enc{l}.ln1"));
        ffn(&mut push, &format!("enc{l}.ffn"));
        norm(&mut push, &format!("enc{l}.ln2"));
    }
    for l in 0..cfg.layers {
        attn(&mut push, &format!("dec{l}.self"));
        norm(&mut push, &format!("dec{l}.ln1"));
        attn(&mut push, &format!("dec{l}.cross"));
        norm(&mut push, &format!("dec{l}.ln2"));
        ffn(&mut push, &format!("dec{l}.ffn"));
        norm(&mut push, &format!("dec{l}.ln3"));
    }
    if !cfg.tie_embeddings {
        push("out.w".into(), vec![d, cfg.vocab_size], Init::Normal);
    }
    push("out.b".into(), vec![1, cfg.vocab_size], Init::Zeros);
    if with_projection {
        push("proj.w_e".into(), vec![d, d], Init::Normal);
        push("proj.w_d".into(), vec![d, d], Init::Normal);
    }
    out
}

/// All trainable tensors, in [`layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    pub tensors: Vec<Tensor>,
    has_projection: bool,
}

impl ModelParams {
    /// Scaled-normal weights (std 0.02), zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(cfg, seed, INIT_STD)
    }

    /// Like [`ModelParams::init`] with a different weight std.
    pub fn init_with_std(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg, true) {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            names,
            tensors,
            has_projection: true,
        })
    }

    pub(crate) fn from_parts(
        cfg: &ModelConfig,
        tensors: Vec<Tensor>,
        has_projection: bool,
    ) -> Result<Self> {
        let spec = layout(cfg, has_projection);
        if spec.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                spec.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in spec.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            names: spec.into_iter().map(|(n, _, _)| n).collect(),
            tensors,
            has_projection,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_projection(&self) -> bool {
        self.has_projection
    }

    /// Same parameters with the projection heads removed (generation only needs the rest).
    pub fn without_projection(&self) -> Self {
        if !self.has_projection {
            return self.clone();
        }
        let keep = self.tensors.len() - 2;
        ModelParams {
            names: self.names[..keep].to_vec(),
            tensors: self.tensors[..keep].to_vec(),
            has_projection: false,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// `[c, SEP, x...]` as indices, truncated on the right to `max_src_len`.
pub fn build_input(control: &str, x: &[String], vocab: &Vocab, max_src_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(x.len() + 2);
    ids.push(vocab.id(control));
    ids.push(SEP);
    ids.extend(x.iter().map(|t| vocab.id(t)));
    ids.truncate(max_src_len.max(2));
    ids
}

/// Source without the control prefix (used by the no-control ablation).
pub fn build_input_uncontrolled(x: &[String], vocab: &Vocab, max_src_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = x.iter().map(|t| vocab.id(t)).collect();
    ids.truncate(max_src_len);
    ids
}

/// `[BOS, y..., EOS]`, or an error when it exceeds `max_tgt_len`.
pub fn build_target(y: &[String], vocab: &Vocab, max_tgt_len: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(y.len() + 2);
    ids.push(BOS);
    ids.extend(y.iter().map(|t| vocab.id(t)));
    ids.push(crate::corpus::EOS);
    if ids.len() > max_tgt_len {
        return Err(Error::Length {
            what: "target",
            len: ids.len(),
            max: max_tgt_len,
        });
    }
    Ok(ids)
}

/// Encoder top-layer states for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    pub states: Tensor,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

/// Parameters plus configuration; the inference entry point.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Model { config, params }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    fn bind_constants(&self, g: &mut Graph) -> Bound {
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        Bound::bind(&self.config, &vars, self.params.has_projection)
    }

    pub fn encode(&self, input: &[usize]) -> Result<EncodedSource> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g);
        let enc = encode_graph(&mut g, &b, &self.config, input, None)?;
        Ok(EncodedSource {
            states: g.value(enc.states).clone(),
            mask: enc.mask,
        })
    }

    /// Next-token logits after `prefix` (which starts with BOS).
    pub fn decode_logits(&self, prefix: &[usize], enc: &EncodedSource) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g);
        let states = g.constant(enc.states.clone());
        let ev = EncodedVars {
            states,
            mask: enc.mask.clone(),
        };
        let top = decode_graph(&mut g, &b, &self.config, &ev, prefix, None)?;
        let logits = logits_graph(&mut g, &b, &self.config, top)?;
        let t = g.value(logits);
        Ok(t.row_slice(t.rows() - 1).to_vec())
    }

    /// Logits for every prefix position at once, `[prefix_len, vocab]`.
    pub fn decode_all_logits(&self, prefix: &[usize], enc: &EncodedSource) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g);
        let states = g.constant(enc.states.clone());
        let ev = EncodedVars {
            states,
            mask: enc.mask.clone(),
        };
        let top = decode_graph(&mut g, &b, &self.config, &ev, prefix, None)?;
        let logits = logits_graph(&mut g, &b, &self.config, top)?;
        Ok(g.value(logits).clone())
    }

    /// Inference session that encodes `input` once and answers next-token
    /// queries for many prefixes.
    pub fn session(&self, input: &[usize]) -> Result<Session<'_>> {
        let mut graph = Graph::new();
        let bound = self.bind_constants(&mut graph);
        let enc = encode_graph(&mut graph, &bound, &self.config, input, None)?;
        let mark = graph.len();
        Ok(Session {
            model: self,
            graph,
            bound,
            enc,
            mark,
        })
    }
}

pub struct Session<'m> {
    model: &'m Model,
    graph: Graph,
    bound: Bound,
    enc: EncodedVars,
    mark: usize,
}

impl Session<'_> {
    pub fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let g = &mut self.graph;
        let top = decode_graph(g, &self.bound, cfg, &self.enc, prefix, None)?;
        let last = g.slice(top, 0, prefix.len() - 1, prefix.len())?;
        let logits = logits_graph(g, &self.bound, cfg, last)?;
        let lp = g.log_softmax(logits)?;
        let out = g.value(lp).data().to_vec();
        g.truncate(self.mark);
        Ok(out)
    }
}

/// Mean of the unmasked rows of `states`.
pub fn pool(states: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let d = states.cols();
    let rows: Vec<usize> = (0..states.rows())
        .filter(|&r| mask.get(r).copied().unwrap_or(false))
        .collect();
    if rows.is_empty() {
        return Err(Error::Precondition(
            "pooling over an all-masked sequence".into(),
        ));
    }
    let mut out = vec![0.0; d];
    for &r in &rows {
        for (o, v) in out.iter_mut().zip(states.row_slice(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    Ok(out)
}

/// `(W_e h) · (W_d z)` with the model's projection heads.
pub fn similarity(h: &[f64], z: &[f64], params: &ModelParams) -> Result<f64> {
    let (Some(we), Some(wd)) = (params.get("proj.w_e"), params.get("proj.w_d")) else {
        return Err(Error::Precondition("model has no projection heads".into()));
    };
    let d = we.rows();
    if h.len() != d || z.len() != d {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            left: vec![h.len()],
            right: vec![z.len()],
        });
    }
    let mut g = Graph::new();
    let hv = g.constant(Tensor::row(h));
    let zv = g.constant(Tensor::row(z));
    let wev = g.constant(we.clone());
    let wdv = g.constant(wd.clone());
    let s = similarity_graph(&mut g, hv, zv, wev, wdv)?;
    Ok(g.value(s).item())
}

/// Mask marking every non-PAD position.
pub fn padding_mask(input: &[usize]) -> Vec<bool> {
    input.iter().map(|&t| t != PAD).collect()
}
