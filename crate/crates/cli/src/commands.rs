use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adgen_core::corpus::{
    filter_absamples, filter_reviews, join_tokens, load_absamples, load_reviews, load_triples,
    load_vocab, save_absamples, save_aspects, save_reviews, save_triples, save_vocab,
    split_dataset, synth_data, AbSample, ReviewCorpus, Vocab,
};
use adgen_core::decode::{self, beam_search, post_filter, BeamConfig, CopyStep, Generation};
use adgen_core::masking::{build_pretrain_set, extract_aspects};
use adgen_core::model::{load_checkpoint, LoadOptions, Model, ModelConfig};
use adgen_core::numeric::GradCheckConfig;
use adgen_core::objectives::{gradient_suite, Variant};
use adgen_core::training::{
    self, finetune_examples, initial_model, pretrain_examples, write_report, PretrainVariant,
    TrainConfig, TrainOutcome, TrainOutput,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{FileConfig, TrainSection};
use crate::manifest::{timestamp, RunManifest};
use crate::{
    BuildDataArgs, CliError, DecodeFlags, EvaluateArgs, FinetuneArgs, GenerateArgs, GradcheckArgs,
    PretrainArgs, TrainFlags, GRADCHECK_TOLERANCE,
};

pub struct Context {
    pub file: FileConfig,
    pub seed: u64,
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn fail(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn require_input(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "input not found: {}",
            path.display()
        )))
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| fail(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Failed(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| fail(path, e))
}

fn start_manifest(
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        artifacts: Default::default(),
        started_at: timestamp(),
        finished_at: 0,
    }
}

fn data_file(data: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = data.join(name);
    require_input(&p)?;
    Ok(p)
}

fn load_data_vocab(data: &Path) -> Result<(PathBuf, Vocab), CliError> {
    let p = data_file(data, VOCAB_FILE)?;
    let vocab = load_vocab(&p)?;
    Ok((p, vocab))
}

pub fn build_data(ctx: &Context, a: &BuildDataArgs) -> Result<(), CliError> {
    let d = &ctx.file.data;
    let mut synth = ctx.file.synth.clone();
    if let Some(n) = a.n_reviews {
        synth.n_reviews = n;
    }
    if let Some(n) = a.n_absamples {
        synth.n_absamples = n;
    }
    let mut inputs: Vec<&Path> = Vec::new();
    let (corpus, samples) = match (&a.reviews, &a.absamples) {
        _ if a.synth => synth_data(&synth, ctx.seed)?,
        (Some(r), Some(s)) => {
            require_input(r)?;
            require_input(s)?;
            inputs.extend([r.as_path(), s.as_path()]);
            (ReviewCorpus::new(load_reviews(r)?), load_absamples(s)?)
        }
        _ => {
            return Err(CliError::Usage(
                "build-data needs --synth or both --reviews and --absamples".into(),
            ))
        }
    };
    let k = a.aspects.unwrap_or(d.aspects);
    let per_review = a.per_review.unwrap_or(d.per_review);

    let reviews = filter_reviews(&corpus, &ctx.file.filter)?;
    let aspects = extract_aspects(&reviews, k, d.idf_band)?;
    let triples = build_pretrain_set(&reviews, &aspects, per_review)?;
    let kept = filter_absamples(&samples, &ctx.file.filter)?;
    let vocab = Vocab::for_pipeline(&reviews.reviews, &kept);
    let (ptr, pdv, pte) = split_dataset(&triples, d.split, ctx.seed)?;
    let (ftr, fdv, fte) = split_dataset(&kept, d.split, ctx.seed)?;

    let out = &a.out;
    create_out(out)?;
    save_vocab(&out.join(VOCAB_FILE), &vocab)?;
    save_reviews(&out.join("reviews.jsonl"), &reviews.reviews)?;
    save_aspects(&out.join("aspects.jsonl"), &aspects)?;
    for (name, part) in SPLITS.iter().zip([&ptr, &pdv, &pte]) {
        save_triples(&out.join(format!("pretrain_{name}.jsonl")), part)?;
    }
    for (name, part) in SPLITS.iter().zip([&ftr, &fdv, &fte]) {
        save_absamples(&out.join(format!("finetune_{name}.jsonl")), part)?;
    }
    println!(
        "reviews {} (kept {}), aspects {}, triples {} ({}/{}/{}), ab samples {} (kept {}: {}/{}/{}), vocab {}",
        corpus.len(),
        reviews.len(),
        aspects.len(),
        triples.len(),
        ptr.len(),
        pdv.len(),
        pte.len(),
        samples.len(),
        kept.len(),
        ftr.len(),
        fdv.len(),
        fte.len(),
        vocab.len()
    );
    let config = json!({
        "source": if a.synth { "synth" } else { "files" },
        "synth": if a.synth { to_json(&synth)? } else { serde_json::Value::Null },
        "filter": to_json(&ctx.file.filter)?,
        "aspects": k,
        "idf_band": d.idf_band,
        "per_review": per_review,
        "split": d.split,
    });
    start_manifest("build-data", config, ctx.seed, &inputs).finish(out)?;
    Ok(())
}

fn train_config(
    base: TrainConfig,
    section: &TrainSection,
    flags: &TrainFlags,
    seed: u64,
) -> TrainConfig {
    let mut tc = base;
    tc.seed = seed;
    tc.optim = section.optim.clone();
    if let Some(v) = flags.epochs.or(section.epochs) {
        tc.epochs = v;
    }
    if let Some(v) = flags.batch_size.or(section.batch_size) {
        tc.batch_size = v;
    }
    if let Some(v) = flags.max_steps.or(section.max_steps) {
        tc.max_steps = v;
    }
    if let Some(v) = flags.eval_every.or(section.eval_every) {
        tc.eval_every = v;
    }
    if let Some(lr) = flags.lr {
        tc.optim.lr = lr;
    }
    tc
}

fn finish_training(
    command: &str,
    ctx: &Context,
    out: &Path,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    inputs: &[&Path],
    outcome: &TrainOutcome,
) -> Result<(), CliError> {
    write_report(&out.join("report.json"), &outcome.report)?;
    println!(
        "steps {}, best dev perplexity {:.4} at step {}, final dev perplexity {:.4}",
        outcome.report.steps,
        outcome.report.best_dev_perplexity,
        outcome.report.best_step,
        outcome.report.final_dev_perplexity
    );
    let config = json!({ "model": to_json(model_cfg)?, "train": to_json(tc)? });
    start_manifest(command, config, ctx.seed, inputs).finish(out)?;
    Ok(())
}

pub fn pretrain(ctx: &Context, a: &PretrainArgs) -> Result<(), CliError> {
    let f = &a.train;
    let (vocab_path, vocab) = load_data_vocab(&f.data)?;
    let train_path = data_file(&f.data, "pretrain_train.jsonl")?;
    let dev_path = data_file(&f.data, "pretrain_dev.jsonl")?;
    let variant: PretrainVariant = a.pretrain_variant.parse()?;
    let model_cfg = ctx.file.model.with_vocab(vocab.len());
    model_cfg.validate()?;
    let mut tc = train_config(TrainConfig::pretrain(), &ctx.file.pretrain, f, ctx.seed);
    tc.pretrain_variant = variant;
    tc.validate()?;

    let train = pretrain_examples(&load_triples(&train_path)?, variant, &vocab, &model_cfg)?;
    let dev = pretrain_examples(&load_triples(&dev_path)?, variant, &vocab, &model_cfg)?;
    let out = TrainOutput {
        dir: f.out.clone(),
        vocab_hash: vocab.hash(),
    };
    create_out(&f.out)?;
    let model = initial_model(&tc, &model_cfg, &out.vocab_hash)?;
    let outcome = training::pretrain(model, &train, &dev, &tc, Some(&out))?;
    let inputs = [vocab_path.as_path(), &train_path, &dev_path];
    finish_training("pretrain", ctx, &f.out, &model_cfg, &tc, &inputs, &outcome)
}

pub fn finetune(ctx: &Context, a: &FinetuneArgs) -> Result<(), CliError> {
    let f = &a.train;
    let (vocab_path, vocab) = load_data_vocab(&f.data)?;
    let train_path = data_file(&f.data, "finetune_train.jsonl")?;
    let dev_path = data_file(&f.data, "finetune_dev.jsonl")?;

    let mut cc = ctx.file.contrastive.clone();
    if let Some(v) = &a.contrastive {
        cc.variant = v.parse::<Variant>()?;
    }
    if let Some(g) = a.gamma {
        cc.gamma = g;
    }
    if let Some(t) = a.tau {
        cc.tau = t;
    }
    if let Some(al) = a.alpha {
        cc.alpha = al;
    }
    cc.keep_negative_nll |= a.keep_negative_nll;
    cc.length_normalize |= a.length_normalize;

    let pv = match &a.pretrain_variant {
        Some(s) => s.parse::<PretrainVariant>()?,
        None if a.init_from.is_some() => PretrainVariant::Full,
        None => PretrainVariant::Skip,
    };
    match (&a.init_from, pv) {
        (Some(_), PretrainVariant::Skip) => {
            return Err(CliError::Usage(
                "--pretrain-variant skip cannot be combined with --init-from".into(),
            ))
        }
        (None, v) if v != PretrainVariant::Skip => {
            return Err(CliError::Usage(format!(
                "--pretrain-variant {v} needs --init-from <stage-1 checkpoint>"
            )))
        }
        _ => {}
    }

    let model_cfg = match &a.init_from {
        Some(dir) => {
            require_input(dir)?;
            let opts = LoadOptions {
                expected_vocab_hash: Some(vocab.hash()),
                skip_projection: false,
            };
            load_checkpoint(dir, &opts)?.1.config
        }
        None => ctx.file.model.with_vocab(vocab.len()),
    };
    model_cfg.validate()?;
    let mut tc = train_config(TrainConfig::finetune(), &ctx.file.finetune, f, ctx.seed);
    tc.contrastive = cc;
    tc.pretrain_variant = pv;
    tc.init_from = a.init_from.clone();
    tc.validate()?;

    let train = finetune_examples(&load_absamples(&train_path)?, &vocab, &model_cfg);
    let dev = finetune_examples(&load_absamples(&dev_path)?, &vocab, &model_cfg);
    let out = TrainOutput {
        dir: f.out.clone(),
        vocab_hash: vocab.hash(),
    };
    create_out(&f.out)?;
    let model = initial_model(&tc, &model_cfg, &out.vocab_hash)?;
    let outcome = training::finetune(model, &train, &dev, &tc, Some(&out))?;
    let mut inputs = vec![vocab_path.as_path(), &train_path, &dev_path];
    if let Some(p) = &a.init_from {
        inputs.push(p);
    }
    finish_training("finetune", ctx, &f.out, &model_cfg, &tc, &inputs, &outcome)
}

fn beam_config(ctx: &Context, d: &DecodeFlags) -> Result<BeamConfig, CliError> {
    let s = &ctx.file.decode;
    let cfg = BeamConfig {
        width: d.beam.unwrap_or(s.beam),
        max_len: d.max_len.unwrap_or(s.max_len),
        length_penalty: s.length_penalty,
    };
    if cfg.width == 0 || cfg.max_len == 0 {
        return Err(CliError::Usage(
            "beam width and max length must be at least 1".into(),
        ));
    }
    Ok(cfg)
}

fn load_model(checkpoint: &Path, vocab: &Vocab) -> Result<Model, CliError> {
    require_input(checkpoint)?;
    let opts = LoadOptions {
        expected_vocab_hash: Some(vocab.hash()),
        skip_projection: true,
    };
    Ok(load_checkpoint(checkpoint, &opts)?.0)
}

fn load_split(d: &DecodeFlags) -> Result<(PathBuf, Vec<AbSample>), CliError> {
    let p = data_file(&d.data, &format!("finetune_{}.jsonl", d.split))?;
    let samples = load_absamples(&p)?;
    Ok((p, samples))
}

fn read_blocklist(path: &Path) -> Result<BTreeSet<String>, CliError> {
    require_input(path)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Serialize)]
struct GenerationRecord {
    #[serde(flatten)]
    generation: Generation,
    #[serde(skip_serializing_if = "Option::is_none")]
    passed: Option<bool>,
}

pub fn generate(ctx: &Context, a: &GenerateArgs) -> Result<(), CliError> {
    let d = &a.decode;
    let (vocab_path, vocab) = load_data_vocab(&d.data)?;
    let (split_path, samples) = load_split(d)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let beam = beam_config(ctx, d)?;
    let blocklist = a.blocklist.as_deref().map(read_blocklist).transpose()?;

    let mut generations = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for s in &samples {
        let (tokens, res) = decode::generate(&model, &vocab, &s.control, &s.source.tokens, &beam)?;
        generations.push(Generation {
            source: join_tokens(&s.source.tokens),
            control: s.control.clone(),
            generated: join_tokens(&tokens),
            score: res.best.score,
            truncated: res.truncated,
        });
        texts.push(tokens);
    }
    let filtered = blocklist.as_ref().map(|b| post_filter(&texts, b));

    create_out(&d.out)?;
    let path = d.out.join("generations.jsonl");
    let mut file = fs::File::create(&path).map_err(|e| fail(&path, e))?;
    for (i, g) in generations.into_iter().enumerate() {
        let rec = GenerationRecord {
            generation: g,
            passed: filtered.as_ref().map(|f| f.passed[i]),
        };
        let line = serde_json::to_string(&rec).map_err(|e| CliError::Failed(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| fail(&path, e))?;
    }
    drop(file);
    println!("{} generations written to {}", texts.len(), path.display());
    if let Some(f) = &filtered {
        write_json(&d.out.join("post_filter.json"), f)?;
        println!("post-filter passing rate {:.4}", f.passing_rate);
    }

    let config = json!({ "beam": to_json(&beam)?, "split": d.split, "blocklist": blocklist });
    let mut inputs = vec![vocab_path.as_path(), &split_path, &a.checkpoint];
    if let Some(b) = &a.blocklist {
        inputs.push(b);
    }
    start_manifest("generate", config, ctx.seed, &inputs).finish(&d.out)?;
    Ok(())
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<(), CliError> {
    let d = &a.decode;
    let (vocab_path, vocab) = load_data_vocab(&d.data)?;
    let (split_path, samples) = load_split(d)?;
    let beam = beam_config(ctx, d)?;
    let mut inputs = vec![vocab_path.as_path(), &split_path];

    let report = match &a.checkpoint {
        Some(ckpt) if !a.oracle_copy => {
            let model = load_model(ckpt, &vocab)?;
            inputs.push(ckpt);
            let mut r = decode::evaluate(&model, &vocab, &samples, &beam)?;
            r.checkpoint = Some(ckpt.display().to_string());
            r
        }
        _ => {
            let mut r = decode::evaluate_with(&samples, beam.width, |s| {
                let ids = vocab.encode(&s.pos_target);
                let cfg = BeamConfig {
                    max_len: beam.max_len.max(ids.len() + 1),
                    ..beam.clone()
                };
                let mut stub = CopyStep::new(ids, vocab.len());
                let res = beam_search(&mut stub, &cfg)?;
                Ok(vocab.decode(res.best.body()))
            })?;
            r.checkpoint = Some("oracle-copy".into());
            r
        }
    };
    create_out(&d.out)?;
    write_json(&d.out.join("metrics.json"), &report)?;
    println!(
        "n {} BLEU-4 {:.4} ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4}",
        report.n, report.bleu4, report.rouge1, report.rouge2, report.rouge_l
    );
    let config = json!({ "beam": to_json(&beam)?, "split": d.split, "oracle_copy": a.oracle_copy });
    start_manifest("evaluate", config, ctx.seed, &inputs).finish(&d.out)?;
    Ok(())
}

pub fn gradcheck(ctx: &Context, a: &GradcheckArgs) -> Result<(), CliError> {
    let defaults = GradCheckConfig::default();
    let check = GradCheckConfig {
        eps: a.eps.unwrap_or(defaults.eps),
        coords_per_param: a.coords.unwrap_or(defaults.coords_per_param),
        seed: ctx.seed,
        ..defaults
    };
    let model_cfg = ModelConfig::tiny(a.vocab_size);
    let entries = gradient_suite(&model_cfg, &check)?;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for e in &entries {
        let r = &e.report;
        println!(
            "{:<16} max_rel_err {:.3e}  checked {:>5}  kink-skipped {:>4}",
            e.name, r.max_rel_err, r.checked, r.skipped_kinks
        );
        worst = worst.max(r.max_rel_err);
        rows.push(json!({
            "objective": e.name,
            "max_rel_err": r.max_rel_err,
            "checked": r.checked,
            "skipped_kinks": r.skipped_kinks,
        }));
    }
    let pass = worst < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {worst:.3e} ({})",
        if pass { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        let report = json!({
            "tolerance": GRADCHECK_TOLERANCE,
            "max_rel_err": worst,
            "pass": pass,
            "objectives": rows,
        });
        write_json(&out.join("gradcheck.json"), &report)?;
        let config = json!({
            "model": to_json(&model_cfg)?,
            "eps": check.eps,
            "coords_per_param": check.coords_per_param,
        });
        start_manifest("gradcheck", config, ctx.seed, &[]).finish(out)?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )))
    }
}
