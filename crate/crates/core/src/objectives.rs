//! Training losses: teacher-forced NLL, the hinge on the sequence
//! log-probability gap, InfoNCE over projected pooled states, and the stage-2
//! combination `nll(y+) + nll(y-) + alpha * contrastive`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PAD, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{
    decode_graph, encode_graph, logits_graph, pool_graph, similarity_graph, Bound, EncodedVars,
    Model, ModelConfig, ModelParams,
};
use crate::numeric::{grad_check, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Margin,
    Infonce,
    None,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Margin, Variant::Infonce, Variant::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Margin => "margin",
            Variant::Infonce => "infonce",
            Variant::None => "none",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown contrastive variant {s:?} (expected margin, infonce or none)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Divide sequence log-probabilities by target length inside the hinge.
    pub length_normalize: bool,
    /// With `variant = none`, still add the NLL of the negative target.
    pub keep_negative_nll: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            variant: Variant::Margin,
            gamma: 1.0,
            tau: 1.0,
            alpha: 1e-3,
            length_normalize: false,
            keep_negative_nll: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-sample loss values; `contrastive` is unweighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll_pos: f64,
    pub nll_neg: f64,
    pub contrastive: f64,
    pub variant: Variant,
}

/// `max(0, gamma - (logp_pos - logp_neg))`.
pub fn margin_loss(logp_pos: f64, logp_neg: f64, gamma: f64) -> f64 {
    (gamma - (logp_pos - logp_neg)).max(0.0)
}

/// `-log(e^{s+/tau} / (e^{s+/tau} + e^{s-/tau}))`, shifted by the larger logit.
pub fn infonce_loss(sim_pos: f64, sim_neg: f64, tau: f64) -> f64 {
    let (a, b) = (sim_pos / tau, sim_neg / tau);
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    lse - a
}

/// Hinge inside a graph; inputs are `[1, 1]` sequence log-probabilities.
pub fn margin_graph(g: &mut Graph, logp_pos: Var, logp_neg: Var, gamma: f64) -> Result<Var> {
    let gap = g.sub(logp_pos, logp_neg)?;
    let neg_gap = g.scale(gap, -1.0);
    let shifted = g.add_scalar(neg_gap, gamma);
    Ok(g.relu(shifted))
}

/// InfoNCE inside a graph; inputs are `[1, 1]` similarities.
pub fn infonce_graph(g: &mut Graph, sim_pos: Var, sim_neg: Var, tau: f64) -> Result<Var> {
    let both = g.concat(&[sim_pos, sim_neg], 1)?;
    let scaled = g.scale(both, 1.0 / tau);
    let lp = g.log_softmax(scaled)?;
    let first = g.slice(lp, 1, 0, 1)?;
    Ok(g.scale(first, -1.0))
}

/// Teacher-forced decoder pass over one target.
pub struct TeacherForced {
    /// Summed negative log-likelihood, `[1, 1]`.
    pub nll: Var,
    /// `log p(y_t | y_<t)` for t = 1.. (PAD labels excluded).
    pub token_log_probs: Vec<f64>,
    /// Top decoder states, one row per decoder input position.
    pub states: Var,
    /// Non-PAD decoder input positions.
    pub state_mask: Vec<bool>,
}

fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 || target[0] != crate::corpus::BOS {
        return Err(Error::Precondition(
            "target must start with BOS and contain at least one label".into(),
        ));
    }
    Ok(())
}

/// Decoder input is `target[..n-1]`, labels are `target[1..]`.
pub fn teacher_forced(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    enc: &EncodedVars,
    target: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TeacherForced> {
    check_target(target)?;
    let n = target.len();
    if n > cfg.max_tgt_len {
        return Err(Error::Length {
            what: "target",
            len: n,
            max: cfg.max_tgt_len,
        });
    }
    let input = &target[..n - 1];
    let labels = &target[1..];
    let states = decode_graph(g, b, cfg, enc, input, rng)?;
    let logits = logits_graph(g, b, cfg, states)?;
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let keep: Vec<f64> = labels
        .iter()
        .map(|&l| if l == PAD { 0.0 } else { 1.0 })
        .collect();
    let masked = if keep.iter().all(|&k| k == 1.0) {
        picked
    } else {
        let m = g.constant(Tensor::new(vec![labels.len(), 1], keep.clone())?);
        g.mul(picked, m)?
    };
    let token_log_probs = g
        .value(picked)
        .data()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k == 1.0)
        .map(|(v, _)| *v)
        .collect();
    let total = g.sum(masked);
    let nll = g.scale(total, -1.0);
    Ok(TeacherForced {
        nll,
        token_log_probs,
        states,
        state_mask: input.iter().map(|&t| t != PAD).collect(),
    })
}

/// Number of scored labels in a target.
pub fn target_tokens(target: &[usize]) -> usize {
    target.iter().skip(1).filter(|&&t| t != PAD).count()
}

/// Sequence NLL and per-token log-probs, evaluated without dropout.
pub fn nll(model: &Model, input: &[usize], target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .params
        .tensors
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let b = Bound::bind(&model.config, &vars, model.params.has_projection());
    let enc = encode_graph(&mut g, &b, &model.config, input, None)?;
    let tf = teacher_forced(&mut g, &b, &model.config, &enc, target, None)?;
    Ok((g.value(tf.nll).item(), tf.token_log_probs))
}

/// Graph handles of one stage-2 sample.
pub struct Stage2Vars {
    pub total: Var,
    pub nll_pos: Var,
    pub nll_neg: Var,
    pub contrastive: Option<Var>,
}

impl Stage2Vars {
    pub fn breakdown(&self, g: &Graph, variant: Variant) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            nll_pos: g.value(self.nll_pos).item(),
            nll_neg: g.value(self.nll_neg).item(),
            contrastive: self.contrastive.map_or(0.0, |c| g.value(c).item()),
            variant,
        }
    }
}

/// Builds the stage-2 objective for one `(input, y+, y-)` triple.
#[allow(clippy::too_many_arguments)]
pub fn stage2_graph(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    input: &[usize],
    pos: &[usize],
    neg: &[usize],
    cc: &ContrastiveConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Stage2Vars> {
    cc.validate()?;
    let enc = encode_graph(g, b, cfg, input, rng.as_deref_mut())?;
    let tp = teacher_forced(g, b, cfg, &enc, pos, rng.as_deref_mut())?;
    // a negative that only gets reported must not consume dropout randomness
    let neg_counts = cc.variant != Variant::None || cc.keep_negative_nll;
    let neg_rng = if neg_counts { rng } else { None };
    let tn = teacher_forced(g, b, cfg, &enc, neg, neg_rng)?;

    let contrastive = match cc.variant {
        Variant::None => None,
        Variant::Margin => {
            let mut lp_pos = g.scale(tp.nll, -1.0);
            let mut lp_neg = g.scale(tn.nll, -1.0);
            if cc.length_normalize {
                lp_pos = g.scale(lp_pos, 1.0 / target_tokens(pos).max(1) as f64);
                lp_neg = g.scale(lp_neg, 1.0 / target_tokens(neg).max(1) as f64);
            }
            Some(margin_graph(g, lp_pos, lp_neg, cc.gamma)?)
        }
        Variant::Infonce => {
            let (Some(w_e), Some(w_d)) = (b.w_e, b.w_d) else {
                return Err(Error::Precondition(
                    "InfoNCE needs the projection heads".into(),
                ));
            };
            let h = pool_graph(g, enc.states, &enc.mask)?;
            let zp = pool_graph(g, tp.states, &tp.state_mask)?;
            let zn = pool_graph(g, tn.states, &tn.state_mask)?;
            let sp = similarity_graph(g, h, zp, w_e, w_d)?;
            let sn = similarity_graph(g, h, zn, w_e, w_d)?;
            Some(infonce_graph(g, sp, sn, cc.tau)?)
        }
    };

    let total = match (cc.variant, contrastive) {
        (Variant::None, _) if !cc.keep_negative_nll => tp.nll,
        (_, None) => g.add(tp.nll, tn.nll)?,
        (_, Some(c)) => {
            let both = g.add(tp.nll, tn.nll)?;
            let weighted = g.scale(c, cc.alpha);
            g.add(both, weighted)?
        }
    };
    Ok(Stage2Vars {
        total,
        nll_pos: tp.nll,
        nll_neg: tn.nll,
        contrastive,
    })
}

/// Evaluates the stage-2 objective for one sample without dropout.
pub fn stage2_loss(
    model: &Model,
    input: &[usize],
    pos: &[usize],
    neg: &[usize],
    cc: &ContrastiveConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .params
        .tensors
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let b = Bound::bind(&model.config, &vars, model.params.has_projection());
    let s = stage2_graph(&mut g, &b, &model.config, input, pos, neg, cc, None)?;
    Ok(s.breakdown(&g, cc.variant))
}

/// Named finite-difference checks of every objective on a small random model.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len)
        .map(|_| rng.gen_range(SPECIALS.len()..vocab))
        .collect()
}

/// Weight std for the checks; at the training init scale most gradients are
/// so small that central differences only see float rounding.
pub const SUITE_INIT_STD: f64 = 0.3;

/// Runs the gradient checks for NLL, the hinge, InfoNCE and both stage-2
/// combinations on `cfg` (dropout is forced off).
pub fn gradient_suite(cfg: &ModelConfig, check: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    let params = ModelParams::init_with_std(&cfg, check.seed, SUITE_INIT_STD)?;
    let model = Model::new(cfg.clone(), params);
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed.wrapping_add(1));
    let src_len = 6.min(cfg.max_src_len);
    let tgt_len = 4.min(cfg.max_tgt_len - 2);
    let input = random_ids(&mut rng, src_len, cfg.vocab_size);
    let frame = |body: Vec<usize>| {
        let mut t = vec![crate::corpus::BOS];
        t.extend(body);
        t.push(crate::corpus::EOS);
        t
    };
    let pos = frame(random_ids(&mut rng, tgt_len, cfg.vocab_size));
    let neg = frame(random_ids(
        &mut rng,
        tgt_len.saturating_sub(1).max(1),
        cfg.vocab_size,
    ));
    // keep the hinge active so its gradient is actually exercised
    let probe = stage2_loss(&model, &input, &pos, &neg, &ContrastiveConfig::default())?;
    let gamma = (probe.nll_neg - probe.nll_pos).max(0.0) + 1.0;

    let run = |name: &'static str, which: u8| -> Result<SuiteEntry> {
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let b = Bound::bind(&cfg, vars, true);
            let stage2 = |g: &mut Graph, variant: Variant| {
                let cc = ContrastiveConfig {
                    variant,
                    alpha: 0.5,
                    gamma,
                    ..Default::default()
                };
                stage2_graph(g, &b, &cfg, &input, &pos, &neg, &cc, None).map(|s| s.total)
            };
            match which {
                0 => {
                    let enc = encode_graph(g, &b, &cfg, &input, None)?;
                    Ok(teacher_forced(g, &b, &cfg, &enc, &pos, None)?.nll)
                }
                1 => {
                    let enc = encode_graph(g, &b, &cfg, &input, None)?;
                    let tp = teacher_forced(g, &b, &cfg, &enc, &pos, None)?;
                    let tn = teacher_forced(g, &b, &cfg, &enc, &neg, None)?;
                    let lp = g.scale(tp.nll, -1.0);
                    let ln = g.scale(tn.nll, -1.0);
                    margin_graph(g, lp, ln, gamma)
                }
                2 => {
                    let enc = encode_graph(g, &b, &cfg, &input, None)?;
                    let tp = teacher_forced(g, &b, &cfg, &enc, &pos, None)?;
                    let tn = teacher_forced(g, &b, &cfg, &enc, &neg, None)?;
                    let h = pool_graph(g, enc.states, &enc.mask)?;
                    let zp = pool_graph(g, tp.states, &tp.state_mask)?;
                    let zn = pool_graph(g, tn.states, &tn.state_mask)?;
                    let (we, wd) = (b.w_e.expect("bound"), b.w_d.expect("bound"));
                    let sp = similarity_graph(g, h, zp, we, wd)?;
                    let sn = similarity_graph(g, h, zn, we, wd)?;
                    infonce_graph(g, sp, sn, 1.0)
                }
                3 => stage2(g, Variant::Margin),
                _ => stage2(g, Variant::Infonce),
            }
        };
        Ok(SuiteEntry {
            name,
            report: grad_check(f, &model.params.tensors, check)?,
        })
    };
    [
        ("nll", 0u8),
        ("margin", 1),
        ("infonce", 2),
        ("stage2_margin", 3),
        ("stage2_infonce", 4),
    ]
    .into_iter()
    .map(|(n, w)| run(n, w))
    .collect()
}
