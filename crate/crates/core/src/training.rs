//! Stage-1 controlled pre-training and stage-2 contrastive fine-tuning.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AbSample, Vocab};
use crate::error::{Error, Result};
use crate::masking::MaskedTriple;
use crate::model::{
    build_input, build_input_uncontrolled, encode_graph, load_checkpoint, save_checkpoint, Bound,
    LoadOptions, Model, ModelConfig,
};
use crate::numeric::{Graph, OptimConfig, OptimState, Tensor, Var};
use crate::objectives::{
    nll, stage2_graph, target_tokens, teacher_forced, ContrastiveConfig, LossBreakdown, Variant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Stage-1 input construction (the ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainVariant {
    /// `[c, SEP, masked review]`.
    Full,
    /// `[c, SEP, unmasked review]`.
    NoMask,
    /// `[masked review]` without the control prefix.
    NoControl,
    /// No stage-1 training at all.
    Skip,
}

impl PretrainVariant {
    pub const ALL: [PretrainVariant; 4] = [
        PretrainVariant::Full,
        PretrainVariant::NoMask,
        PretrainVariant::NoControl,
        PretrainVariant::Skip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainVariant::Full => "full",
            PretrainVariant::NoMask => "no_mask",
            PretrainVariant::NoControl => "no_control",
            PretrainVariant::Skip => "skip",
        }
    }
}

impl fmt::Display for PretrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PretrainVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown pretrain variant {s:?} (expected full, no_mask, no_control or skip)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate dev perplexity every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
    pub contrastive: ContrastiveConfig,
    pub pretrain_variant: PretrainVariant,
    pub init_from: Option<PathBuf>,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            eval_every: 0,
            max_steps: 0,
            contrastive: ContrastiveConfig::default(),
            pretrain_variant: PretrainVariant::Full,
            init_from: None,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig::default()
    }

    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.optim.lr
            )));
        }
        self.contrastive.validate()
    }
}

/// One encoder input and a BOS/EOS-framed target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// One encoder input with its higher- and lower-CTR targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub input: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// `[BOS, y..., EOS]`, dropping the tail of `y` that does not fit.
pub fn fit_target(y: &[String], vocab: &Vocab, max_tgt_len: usize) -> Vec<usize> {
    let keep = y.len().min(max_tgt_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(crate::corpus::BOS);
    ids.extend(y[..keep].iter().map(|t| vocab.id(t)));
    ids.push(crate::corpus::EOS);
    ids
}

/// Stage-1 examples under the chosen input variant.
pub fn pretrain_examples(
    triples: &[MaskedTriple],
    variant: PretrainVariant,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<Vec<Seq2SeqExample>> {
    triples
        .iter()
        .map(|t| {
            let input = match variant {
                PretrainVariant::Full => {
                    build_input(&t.control, &t.masked_source, vocab, cfg.max_src_len)
                }
                PretrainVariant::NoMask => {
                    build_input(&t.control, &t.unmask(), vocab, cfg.max_src_len)
                }
                PretrainVariant::NoControl => {
                    build_input_uncontrolled(&t.masked_source, vocab, cfg.max_src_len)
                }
                PretrainVariant::Skip => {
                    return Err(Error::Config(
                        "pretrain variant skip has no training data".into(),
                    ))
                }
            };
            Ok(Seq2SeqExample {
                input,
                target: fit_target(&t.pseudo_target, vocab, cfg.max_tgt_len),
            })
        })
        .collect()
}

/// Stage-2 examples: `[c, SEP, review]` with both targets.
pub fn finetune_examples(
    samples: &[AbSample],
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Vec<PairExample> {
    samples
        .iter()
        .map(|s| PairExample {
            input: build_input(&s.control, &s.source.tokens, vocab, cfg.max_src_len),
            pos: fit_target(&s.pos_target, vocab, cfg.max_tgt_len),
            neg: fit_target(&s.neg_target, vocab, cfg.max_tgt_len),
        })
        .collect()
}

/// `exp(total NLL / scored tokens)` over `(input, target)` pairs.
pub fn perplexity(model: &Model, data: &[Seq2SeqExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("perplexity over an empty set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in data {
        let (l, _) = nll(model, &ex.input, &ex.target)?;
        total += l;
        tokens += target_tokens(&ex.target);
    }
    if tokens == 0 {
        return Err(Error::EmptyData("no scored target tokens".into()));
    }
    Ok((total / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub dev_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    /// Mean per-sample training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-token training NLL (positive targets) of each epoch.
    pub epoch_token_nll: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_dev_perplexity: f64,
    pub final_dev_perplexity: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    /// Not serialized, so reports of identical runs stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Where to write checkpoints and the loss log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub vocab_hash: String,
}

impl TrainOutput {
    pub fn best_dir(&self) -> PathBuf {
        self.dir.join("best")
    }

    pub fn last_dir(&self) -> PathBuf {
        self.dir.join("last")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub report: TrainReport,
}

/// Model to start from: the `init_from` checkpoint, or a fresh seeded init.
pub fn initial_model(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    vocab_hash: &str,
) -> Result<Model> {
    match &cfg.init_from {
        Some(dir) => {
            let opts = LoadOptions {
                expected_vocab_hash: Some(vocab_hash.to_string()),
                skip_projection: false,
            };
            let (model, _) = load_checkpoint(dir, &opts)?;
            if model.config != *model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            Ok(model)
        }
        None => Model::init(model_cfg.clone(), cfg.seed),
    }
}

struct CsvLog {
    file: Option<fs::File>,
    path: PathBuf,
}

impl CsvLog {
    fn open(out: Option<&TrainOutput>) -> Result<Self> {
        let Some(out) = out else {
            return Ok(CsvLog {
                file: None,
                path: PathBuf::new(),
            });
        };
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let path = out.log_path();
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "step,total,nll_pos,nll_neg,contrastive,variant")
            .map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog {
            file: Some(file),
            path,
        })
    }

    fn row(&mut self, step: usize, l: &LossBreakdown) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{step},{},{},{},{},{}",
                l.total, l.nll_pos, l.nll_neg, l.contrastive, l.variant
            )
            .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Per-batch loss construction shared by both stages.
trait Objective {
    type Example;
    fn loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        ex: &Self::Example,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown, usize)>;
}

struct Pretrain;

impl Objective for Pretrain {
    type Example = Seq2SeqExample;

    fn loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        ex: &Seq2SeqExample,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown, usize)> {
        let enc = encode_graph(g, b, cfg, &ex.input, Some(rng))?;
        let tf = teacher_forced(g, b, cfg, &enc, &ex.target, Some(rng))?;
        let v = g.value(tf.nll).item();
        let breakdown = LossBreakdown {
            total: v,
            nll_pos: v,
            nll_neg: 0.0,
            contrastive: 0.0,
            variant: Variant::None,
        };
        Ok((tf.nll, breakdown, target_tokens(&ex.target)))
    }
}

struct Finetune<'c>(&'c ContrastiveConfig);

impl Objective for Finetune<'_> {
    type Example = PairExample;

    fn loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        ex: &PairExample,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown, usize)> {
        let s = stage2_graph(g, b, cfg, &ex.input, &ex.pos, &ex.neg, self.0, Some(rng))?;
        Ok((
            s.total,
            s.breakdown(g, self.0.variant),
            target_tokens(&ex.pos),
        ))
    }
}

fn mean_breakdown(parts: &[LossBreakdown], variant: Variant) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        total: avg(|l| l.total),
        nll_pos: avg(|l| l.nll_pos),
        nll_neg: avg(|l| l.nll_neg),
        contrastive: avg(|l| l.contrastive),
        variant,
    }
}

fn run<O: Objective>(
    objective: &O,
    mut model: Model,
    train: &[O::Example],
    dev: &[Seq2SeqExample],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyData("no training examples".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyData(
            "no dev examples for checkpoint selection".into(),
        ));
    }
    let started = Instant::now();
    let mut log = CsvLog::open(out)?;
    let mut optim = OptimState::new(cfg.optim.clone());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f);
    let variant = match cfg.stage {
        Stage::Pretrain => Variant::None,
        Stage::Finetune => cfg.contrastive.variant,
    };

    let mut report = TrainReport {
        stage: cfg.stage,
        steps: 0,
        epoch_losses: Vec::new(),
        epoch_token_nll: Vec::new(),
        evals: Vec::new(),
        best_step: 0,
        best_dev_perplexity: f64::INFINITY,
        final_dev_perplexity: f64::INFINITY,
        best_checkpoint: None,
        last_checkpoint: None,
        wall_time_secs: 0.0,
    };
    let mut best = model.clone();
    let mut step = 0usize;

    let evaluate = |model: &Model,
                    step: usize,
                    epoch: usize,
                    report: &mut TrainReport,
                    best: &mut Model|
     -> Result<()> {
        let ppl = perplexity(model, dev)?;
        report.evals.push(EvalPoint {
            step,
            epoch,
            dev_perplexity: ppl,
        });
        report.final_dev_perplexity = ppl;
        // strict improvement keeps the earliest of equally good checkpoints
        if ppl < report.best_dev_perplexity || report.evals.len() == 1 {
            report.best_dev_perplexity = ppl;
            report.best_step = step;
            *best = model.clone();
        }
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars: Vec<Var> = model.params.tensors.iter().map(|t| g.param(t)).collect();
            let b = Bound::bind(&model.config, &vars, model.params.has_projection());
            let mut losses = Vec::with_capacity(batch.len());
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let (l, br, ntok) =
                    objective.loss(&mut g, &b, &model.config, &train[i], &mut dropout_rng)?;
                epoch_nll += br.nll_pos;
                epoch_tokens += ntok;
                losses.push(l);
                parts.push(br);
            }
            let summed = if losses.len() == 1 {
                losses[0]
            } else {
                g.concat(&losses, 1).map(|c| g.sum(c))?
            };
            let loss = g.scale(summed, 1.0 / batch.len() as f64);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
            optim.step(&mut model.params.tensors, &grads)?;
            if !model.params.all_finite() {
                return Err(Error::Degenerate(format!(
                    "non-finite parameters after step {}",
                    step + 1
                )));
            }
            step += 1;
            let br = mean_breakdown(&parts, variant);
            epoch_total += br.total * batch.len() as f64;
            log.row(step, &br)?;
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                evaluate(&model, step, epoch + 1, &mut report, &mut best)?;
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                report.epoch_losses.push(epoch_total / train.len() as f64);
                report
                    .epoch_token_nll
                    .push(epoch_nll / epoch_tokens.max(1) as f64);
                break 'epochs;
            }
        }
        report.epoch_losses.push(epoch_total / train.len() as f64);
        report
            .epoch_token_nll
            .push(epoch_nll / epoch_tokens.max(1) as f64);
        if cfg.eval_every == 0 {
            evaluate(&model, step, epoch + 1, &mut report, &mut best)?;
        }
    }
    if report.evals.last().map(|e| e.step) != Some(step) {
        evaluate(
            &model,
            step,
            report.epoch_losses.len(),
            &mut report,
            &mut best,
        )?;
    }
    report.steps = step;

    if let Some(out) = out {
        let stage = cfg.stage.as_str();
        save_checkpoint(
            &out.best_dir(),
            &best,
            &out.vocab_hash,
            stage,
            Some(report.best_dev_perplexity),
        )?;
        save_checkpoint(
            &out.last_dir(),
            &model,
            &out.vocab_hash,
            stage,
            Some(report.final_dev_perplexity),
        )?;
        report.best_checkpoint = Some(out.best_dir());
        report.last_checkpoint = Some(out.last_dir());
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        best,
        last: model,
        report,
    })
}

/// Stage 1: NLL of the pseudo-target given the (masked, controlled) review.
pub fn pretrain(
    model: Model,
    train: &[Seq2SeqExample],
    dev: &[Seq2SeqExample],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain needs stage = pretrain".into()));
    }
    if cfg.pretrain_variant == PretrainVariant::Skip {
        return Err(Error::Config(
            "pretrain variant skip means no stage-1 run".into(),
        ));
    }
    run(&Pretrain, model, train, dev, cfg, out)
}

/// Stage 2; dev perplexity is measured on the positive targets.
pub fn finetune(
    model: Model,
    train: &[PairExample],
    dev: &[PairExample],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("finetune needs stage = finetune".into()));
    }
    let dev_pos: Vec<Seq2SeqExample> = dev
        .iter()
        .map(|e| Seq2SeqExample {
            input: e.input.clone(),
            target: e.pos.clone(),
        })
        .collect();
    run(
        &Finetune(&cfg.contrastive),
        model,
        train,
        &dev_pos,
        cfg,
        out,
    )
}

/// Serializes a report as pretty JSON.
pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
