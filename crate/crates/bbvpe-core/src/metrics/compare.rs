//! Strategy comparison over per-image prompt scores.
//!
//! Every strategy picks one scored prompt session per image; rows report the
//! mean session score and aggregate classification metrics. The oracle picks
//! per image, fixed strategies pick once, and the random strategy is a seeded
//! draw reported next to its analytic expectation.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{pope_metrics, ConfusionCounts, MetricsError, PopeMetrics};
use crate::dataset::{ImageEvaluation, ScoreRecord};

pub const STRATEGY_BASELINE: &str = "baseline";
pub const STRATEGY_RANDOM: &str = "random_vp";
pub const STRATEGY_RANDOM_EXPECTED: &str = "random_vp_expected";
pub const STRATEGY_BEST: &str = "best_vp";
pub const STRATEGY_BBVPE: &str = "bbvpe";
pub const STRATEGY_ORACLE: &str = "oracle";

/// Everything the comparison needs, already evaluated and cached upstream.
#[derive(Debug, Clone)]
pub struct ComparatorInput {
    /// Complete evaluations only: one record per pool prompt per image.
    pub evaluations: Vec<ImageEvaluation>,
    /// Pool prompt ids in pool order.
    pub pool_order: Vec<String>,
    /// Router-chosen prompt id per image id; None omits the routed row.
    pub router_choice: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparatorOptions {
    pub seed: u64,
    /// Exclude the identity prompt from the random strategy's pool.
    pub random_excludes_none: bool,
}

impl ComparatorOptions {
    pub fn new(seed: u64) -> Self {
        ComparatorOptions { seed, random_excludes_none: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    /// Extra context: the fixed prompt id, or the random seed.
    pub detail: Option<String>,
    /// Mean per-image session score.
    pub mean_s: f64,
    /// Absent for the analytic-expectation row, which picks no concrete
    /// answers to tally.
    pub metrics: Option<PopeMetrics>,
    pub confusion: Option<ConfusionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<StrategyRow>,
    pub images: usize,
    pub notices: Vec<String>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

fn record_for<'e>(
    eval: &'e ImageEvaluation,
    prompt_id: &str,
) -> Result<&'e ScoreRecord, MetricsError> {
    eval.records.iter().find(|r| r.prompt_id == prompt_id).ok_or_else(|| MetricsError::MissingRecord {
        image_id: eval.image_id.clone(),
        prompt_id: prompt_id.to_string(),
    })
}

fn row_from_picks(strategy: &str, detail: Option<String>, picks: &[&ScoreRecord]) -> Result<StrategyRow, MetricsError> {
    let mean_s = picks.iter().map(|r| r.score).sum::<f64>() / picks.len() as f64;
    let mut confusion = ConfusionCounts::default();
    for r in picks {
        confusion.add(&ConfusionCounts::from_outcomes(&r.outcomes));
    }
    Ok(StrategyRow {
        strategy: strategy.to_string(),
        detail,
        mean_s,
        metrics: Some(pope_metrics(&confusion)?),
        confusion: Some(confusion),
    })
}

/// Per-image oracle picks: the earliest pool prompt reaching the maximum
/// score on that image.
pub fn oracle_choices(input: &ComparatorInput) -> Result<BTreeMap<String, String>, MetricsError> {
    let mut out = BTreeMap::new();
    for e in &input.evaluations {
        let mut pick: Option<&ScoreRecord> = None;
        for p in &input.pool_order {
            let r = record_for(e, p)?;
            if pick.is_none_or(|best| r.score > best.score) {
                pick = Some(r);
            }
        }
        out.insert(e.image_id.clone(), pick.expect("pool is non-empty").prompt_id.clone());
    }
    Ok(out)
}

/// Uniform index draw keyed by (seed, image id): the random strategy never
/// depends on corpus order.
fn random_pick(seed: u64, image_id: &str, n: usize) -> usize {
    let mut hasher = Sha256::new();
    hasher.update(b"random-vp");
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into()).random_range(0..n)
}

/// Builds the comparison table: no prompt at all, a seeded random prompt
/// (with its analytic expectation), the single best fixed prompt, the
/// router's choice when available, and the per-image oracle. Verifies the
/// ordering the oracle and expectation guarantee by construction.
pub fn run_comparators(
    input: &ComparatorInput,
    opts: &ComparatorOptions,
) -> Result<ComparisonReport, MetricsError> {
    if input.evaluations.is_empty() {
        return Err(MetricsError::EmptyDescriptions);
    }
    let mut evals: Vec<&ImageEvaluation> = input.evaluations.iter().collect();
    evals.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let n_images = evals.len();

    let random_pool: Vec<&String> = input
        .pool_order
        .iter()
        .filter(|p| !(opts.random_excludes_none && p.as_str() == "none"))
        .collect();
    if random_pool.is_empty() {
        return Err(MetricsError::MissingRecord { image_id: "*".into(), prompt_id: "<random pool empty>".into() });
    }

    let mut rows = Vec::new();
    let mut notices = Vec::new();

    // Baseline: the unprompted image.
    let baseline: Vec<&ScoreRecord> =
        evals.iter().map(|e| record_for(e, "none")).collect::<Result<_, _>>()?;
    rows.push(row_from_picks(STRATEGY_BASELINE, None, &baseline)?);

    // Random prompt: one seeded draw per image, plus the expectation over
    // the whole pool, which is what the ordering guarantee speaks about.
    let random: Vec<&ScoreRecord> = evals
        .iter()
        .map(|e| record_for(e, random_pool[random_pick(opts.seed, &e.image_id, random_pool.len())]))
        .collect::<Result<_, _>>()?;
    rows.push(row_from_picks(STRATEGY_RANDOM, Some(format!("seed={}", opts.seed)), &random)?);

    let mut expected_sum = 0.0;
    for e in &evals {
        let mut image_sum = 0.0;
        for p in &random_pool {
            image_sum += record_for(e, p)?.score;
        }
        expected_sum += image_sum / random_pool.len() as f64;
    }
    let expected_random = expected_sum / n_images as f64;
    rows.push(StrategyRow {
        strategy: STRATEGY_RANDOM_EXPECTED.to_string(),
        detail: Some(format!("pool={}", random_pool.len())),
        mean_s: expected_random,
        metrics: None,
        confusion: None,
    });

    // Best fixed prompt: argmax over pool of the corpus-mean score, ties to
    // the earliest pool position.
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in input.pool_order.iter().enumerate() {
        let mean = evals.iter().map(|e| record_for(e, p).map(|r| r.score)).sum::<Result<f64, _>>()?
            / n_images as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((i, mean));
        }
    }
    let (best_idx, best_mean) = best.expect("pool is non-empty");
    let best_prompt = &input.pool_order[best_idx];
    let best_picks: Vec<&ScoreRecord> =
        evals.iter().map(|e| record_for(e, best_prompt)).collect::<Result<_, _>>()?;
    rows.push(row_from_picks(STRATEGY_BEST, Some(best_prompt.clone()), &best_picks)?);

    // Routed choice, when a router was supplied.
    match &input.router_choice {
        Some(choices) => {
            let picks: Vec<&ScoreRecord> = evals
                .iter()
                .map(|e| {
                    let prompt = choices.get(&e.image_id).ok_or_else(|| MetricsError::MissingRecord {
                        image_id: e.image_id.clone(),
                        prompt_id: "<router choice>".into(),
                    })?;
                    record_for(e, prompt)
                })
                .collect::<Result<_, _>>()?;
            rows.push(row_from_picks(STRATEGY_BBVPE, None, &picks)?);
        }
        None => notices.push("no router provided; routed row omitted".to_string()),
    }

    // Oracle: per-image argmax, ties to the earliest pool position.
    let oracle_map = oracle_choices(input)?;
    let oracle: Vec<&ScoreRecord> = evals
        .iter()
        .map(|e| record_for(e, &oracle_map[&e.image_id]))
        .collect::<Result<_, MetricsError>>()?;
    rows.push(row_from_picks(STRATEGY_ORACLE, None, &oracle)?);

    let oracle_mean = rows.iter().find(|r| r.strategy == STRATEGY_ORACLE).unwrap().mean_s;
    // The oracle dominates every selection rule on the same records, and the
    // best fixed prompt dominates the pool average. Violations mean a bug.
    for row in &rows {
        if oracle_mean < row.mean_s - 1e-12 {
            return Err(MetricsError::Ordering(format!(
                "oracle mean {oracle_mean} below {} mean {}",
                row.strategy, row.mean_s
            )));
        }
    }
    if best_mean < expected_random - 1e-12 {
        return Err(MetricsError::Ordering(format!(
            "best fixed mean {best_mean} below random expectation {expected_random}"
        )));
    }

    Ok(ComparisonReport { rows, images: n_images, notices })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One header row, then one row per strategy; empty cells where a column
/// does not apply.
pub fn comparison_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("strategy,detail,mean_s,accuracy,precision,recall,f1,tp,fp,tn,fn\n");
    for row in &report.rows {
        let m = row.metrics;
        let c = row.confusion;
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{},{},{}\n",
            row.strategy,
            row.detail.clone().unwrap_or_default(),
            row.mean_s,
            fmt_opt(m.map(|m| m.accuracy)),
            fmt_opt(m.map(|m| m.precision)),
            fmt_opt(m.map(|m| m.recall)),
            fmt_opt(m.map(|m| m.f1)),
            c.map(|c| c.tp.to_string()).unwrap_or_default(),
            c.map(|c| c.fp.to_string()).unwrap_or_default(),
            c.map(|c| c.tn.to_string()).unwrap_or_default(),
            c.map(|c| c.fn_.to_string()).unwrap_or_default(),
        ));
    }
    out
}

/// Fixed-width table for terminals and logs.
pub fn comparison_table(report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("strategies over {} images\n", report.images));
    out.push_str(&format!(
        "{:<20} {:<14} {:>8} {:>9} {:>10} {:>8} {:>8}\n",
        "strategy", "detail", "mean_s", "accuracy", "precision", "recall", "f1"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<20} {:<14} {:>8.4} {:>9} {:>10} {:>8} {:>8}\n",
            row.strategy,
            row.detail.clone().unwrap_or_default(),
            row.mean_s,
            fmt_opt(row.metrics.map(|m| m.accuracy)),
            fmt_opt(row.metrics.map(|m| m.precision)),
            fmt_opt(row.metrics.map(|m| m.recall)),
            fmt_opt(row.metrics.map(|m| m.f1)),
        ));
    }
    for notice in &report.notices {
        out.push_str(&format!("note: {notice}\n"));
    }
    out
}
