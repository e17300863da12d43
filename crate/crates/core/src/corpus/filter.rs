use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AbSample, ClickStats, FilterRules, Review, ReviewCorpus};
use crate::error::{Error, Result};

fn longest_run(tokens: &[String]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (i, t) in tokens.iter().enumerate() {
        run = if i > 0 && tokens[i - 1] == *t {
            run + 1
        } else {
            1
        };
        best = best.max(run);
    }
    best
}

fn review_passes(r: &Review, rules: &FilterRules) -> bool {
    let n = r.tokens.len();
    n >= rules.min_len
        && n <= rules.max_len
        && longest_run(&r.tokens) <= rules.max_repeat_run
        && !r.tokens.iter().any(|t| rules.blocklist.contains(t))
}

/// Keeps reviews that satisfy the length, repeat-run and blocklist rules.
pub fn filter_reviews(corpus: &ReviewCorpus, rules: &FilterRules) -> Result<ReviewCorpus> {
    rules.validate()?;
    let kept = corpus
        .reviews
        .iter()
        .filter(|r| review_passes(r, rules))
        .cloned()
        .collect();
    Ok(ReviewCorpus::with_vocab(kept, corpus.vocab.clone()))
}

/// Pooled two-proportion z statistic of CTR(a) − CTR(b).
pub fn ab_significance(a: &ClickStats, b: &ClickStats) -> Result<f64> {
    if a.impressions == 0 || b.impressions == 0 {
        return Err(Error::Degenerate("zero impressions".into()));
    }
    let (na, nb) = (a.impressions as f64, b.impressions as f64);
    let pooled = (a.clicks + b.clicks) as f64 / (na + nb);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Err(Error::Degenerate(format!(
            "pooled CTR {pooled} leaves the z statistic undefined"
        )));
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    Ok((a.ctr() - b.ctr()) / se)
}

/// Drops under-exposed or insignificant A/B pairs and orients the rest so the
/// positive target has the higher CTR.
pub fn filter_absamples(samples: &[AbSample], rules: &FilterRules) -> Result<Vec<AbSample>> {
    rules.validate()?;
    let mut out = Vec::new();
    for s in samples {
        if s.pos_stats.impressions < rules.min_impressions
            || s.neg_stats.impressions < rules.min_impressions
        {
            continue;
        }
        let s = if s.neg_stats.ctr() > s.pos_stats.ctr() {
            s.clone().swapped()
        } else {
            s.clone()
        };
        let Ok(z) = ab_significance(&s.pos_stats, &s.neg_stats) else {
            continue;
        };
        if s.pos_stats.ctr() > s.neg_stats.ctr() && z.abs() >= rules.z_threshold {
            out.push(s);
        }
    }
    Ok(out)
}

/// Seeded shuffle followed by a train/dev/test cut.
///
/// Dev and test sizes are `floor(n * ratio)`; the remainder goes to train.
pub fn split_dataset<T: Clone>(
    items: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyData("nothing to split".into()));
    }
    let (tr, dv, te) = ratios;
    if !(tr > 0.0 && dv > 0.0 && te > 0.0) || ((tr + dv + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = items.len();
    // tolerance guards products like 0.1 * 30 landing just under an integer
    let size = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let n_dev = size(dv);
    let n_test = size(te);
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}
