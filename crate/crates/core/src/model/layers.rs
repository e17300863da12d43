use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

const NEG_INF: f64 = -1e9;

struct Attn {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct Norm {
    gain: Var,
    bias: Var,
}

struct Ffn {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncLayer {
    attn: Attn,
    ln1: Norm,
    ffn: Ffn,
    ln2: Norm,
}

struct DecLayer {
    self_attn: Attn,
    ln1: Norm,
    cross: Attn,
    ln2: Norm,
    ffn: Ffn,
    ln3: Norm,
}

/// Graph handles for every parameter, in storage order.
pub struct Bound {
    tok_emb: Var,
    enc_pos: Var,
    dec_pos: Var,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    out_w: Option<Var>,
    out_b: Var,
    pub w_e: Option<Var>,
    pub w_d: Option<Var>,
    consumed: usize,
}

impl Bound {
    /// `vars` must follow the parameter layout of `cfg`.
    pub fn bind(cfg: &ModelConfig, vars: &[Var], with_projection: bool) -> Bound {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list shorter than layout");
        let tok_emb = next();
        let enc_pos = next();
        let dec_pos = next();
        fn attn(next: &mut dyn FnMut() -> Var) -> Attn {
            Attn {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
            }
        }
        fn norm(next: &mut dyn FnMut() -> Var) -> Norm {
            Norm {
                gain: next(),
                bias: next(),
            }
        }
        fn ffn(next: &mut dyn FnMut() -> Var) -> Ffn {
            Ffn {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            }
        }
        let mut enc = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            enc.push(EncLayer {
                attn: attn(&mut next),
                ln1: norm(&mut next),
                ffn: ffn(&mut next),
                ln2: norm(&mut next),
            });
        }
        let mut dec = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            dec.push(DecLayer {
                self_attn: attn(&mut next),
                ln1: norm(&mut next),
                cross: attn(&mut next),
                ln2: norm(&mut next),
                ffn: ffn(&mut next),
                ln3: norm(&mut next),
            });
        }
        let out_w = (!cfg.tie_embeddings).then(&mut next);
        let out_b = next();
        let (w_e, w_d) = if with_projection {
            (Some(next()), Some(next()))
        } else {
            (None, None)
        };
        let consumed = 3
            + cfg.layers * (8 + 2 + 4 + 2)
            + cfg.layers * (8 + 2 + 8 + 2 + 4 + 2)
            + usize::from(!cfg.tie_embeddings)
            + 1
            + if with_projection { 2 } else { 0 };
        Bound {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            dec,
            out_w,
            out_b,
            w_e,
            w_d,
            consumed,
        }
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// Encoder output inside a graph.
pub struct EncodedVars {
    pub states: Var,
    pub mask: Vec<bool>,
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if p > 0.0 => g.dropout(x, p, &mut **r),
        _ => x,
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm(g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, n.gain)?;
    g.add(y, n.bias)
}

/// Additive mask `[nq, nk]`: key padding plus optional causal structure.
fn attention_mask(nq: usize, key_mask: &[bool], causal: bool) -> Tensor {
    let nk = key_mask.len();
    let mut data = vec![0.0; nq * nk];
    for i in 0..nq {
        for (j, &keep) in key_mask.iter().enumerate() {
            if !keep || (causal && j > i) {
                data[i * nk + j] = NEG_INF;
            }
        }
    }
    Tensor::new(vec![nq, nk], data).expect("mask shape")
}

fn attention(
    g: &mut Graph,
    a: &Attn,
    heads: usize,
    query: Var,
    memory: Var,
    mask: &Tensor,
) -> Result<Var> {
    let d = g.value(query).cols();
    let dh = d / heads;
    let q = affine(g, query, a.wq, a.bq)?;
    let k = affine(g, memory, a.wk, a.bk)?;
    let v = affine(g, memory, a.wv, a.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let s = g.add_const(s, mask)?;
        let p = g.softmax(s, 1)?;
        outs.push(g.matmul(p, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    affine(g, cat, a.wo, a.bo)
}

fn feed_forward(
    g: &mut Graph,
    f: &Ffn,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let h = affine(g, x, f.w1, f.b1)?;
    let h = g.relu(h);
    let h = dropout(g, h, p, rng);
    affine(g, h, f.w2, f.b2)
}

fn embed(g: &mut Graph, table: Var, pos: Var, ids: &[usize], vocab: usize) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Precondition(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    let tok = g.embedding(table, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = g.embedding(pos, &positions)?;
    g.add(tok, p)
}

/// Runs the encoder over `input`; `rng` enables dropout.
pub fn encode_graph(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    input: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedVars> {
    if input.is_empty() || input.len() > cfg.max_src_len {
        return Err(Error::Length {
            what: "source",
            len: input.len(),
            max: cfg.max_src_len,
        });
    }
    let key_mask: Vec<bool> = input.iter().map(|&t| t != PAD).collect();
    if !key_mask.iter().any(|&k| k) {
        return Err(Error::Precondition("source is all padding".into()));
    }
    let mask = attention_mask(input.len(), &key_mask, false);
    let mut x = embed(g, b.tok_emb, b.enc_pos, input, cfg.vocab_size)?;
    x = dropout(g, x, cfg.dropout, &mut rng);
    for layer in &b.enc {
        let a = attention(g, &layer.attn, cfg.heads, x, x, &mask)?;
        let a = dropout(g, a, cfg.dropout, &mut rng);
        let r = g.add(x, a)?;
        x = norm(g, r, &layer.ln1)?;
        let f = feed_forward(g, &layer.ffn, x, cfg.dropout, &mut rng)?;
        let f = dropout(g, f, cfg.dropout, &mut rng);
        let r = g.add(x, f)?;
        x = norm(g, r, &layer.ln2)?;
    }
    Ok(EncodedVars {
        states: x,
        mask: key_mask,
    })
}

/// Decoder top states `[prefix_len, d]` for a BOS-initial prefix.
pub fn decode_graph(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    enc: &EncodedVars,
    prefix: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if prefix.is_empty() || prefix.len() > cfg.max_tgt_len {
        return Err(Error::Length {
            what: "decoder prefix",
            len: prefix.len(),
            max: cfg.max_tgt_len,
        });
    }
    let n = prefix.len();
    let self_mask = attention_mask(n, &vec![true; n], true);
    let cross_mask = attention_mask(n, &enc.mask, false);
    let mut x = embed(g, b.tok_emb, b.dec_pos, prefix, cfg.vocab_size)?;
    x = dropout(g, x, cfg.dropout, &mut rng);
    for layer in &b.dec {
        let a = attention(g, &layer.self_attn, cfg.heads, x, x, &self_mask)?;
        let a = dropout(g, a, cfg.dropout, &mut rng);
        let r = g.add(x, a)?;
        x = norm(g, r, &layer.ln1)?;
        let c = attention(g, &layer.cross, cfg.heads, x, enc.states, &cross_mask)?;
        let c = dropout(g, c, cfg.dropout, &mut rng);
        let r = g.add(x, c)?;
        x = norm(g, r, &layer.ln2)?;
        let f = feed_forward(g, &layer.ffn, x, cfg.dropout, &mut rng)?;
        let f = dropout(g, f, cfg.dropout, &mut rng);
        let r = g.add(x, f)?;
        x = norm(g, r, &layer.ln3)?;
    }
    Ok(x)
}

/// Vocabulary logits for each row of `states`.
pub fn logits_graph(g: &mut Graph, b: &Bound, _cfg: &ModelConfig, states: Var) -> Result<Var> {
    let w = match b.out_w {
        Some(w) => w,
        None => g.transpose(b.tok_emb)?,
    };
    affine(g, states, w, b.out_b)
}

/// Mean over rows where `mask` is true, as a `[1, d]` row.
pub fn pool_graph(g: &mut Graph, states: Var, mask: &[bool]) -> Result<Var> {
    let n = g.value(states).rows();
    if mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "pool",
            left: vec![n],
            right: vec![mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Precondition(
            "pooling over an all-masked sequence".into(),
        ));
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let wv = g.constant(Tensor::row(&w));
    g.matmul(wv, states)
}

/// `(W_e h) · (W_d z)` for row vectors `h`, `z`; returns `[1, 1]`.
pub fn similarity_graph(g: &mut Graph, h: Var, z: Var, w_e: Var, w_d: Var) -> Result<Var> {
    let wet = g.transpose(w_e)?;
    let wdt = g.transpose(w_d)?;
    let a = g.matmul(h, wet)?;
    let c = g.matmul(z, wdt)?;
    let ct = g.transpose(c)?;
    g.matmul(a, ct)
}
