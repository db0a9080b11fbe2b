//! Scoring every prompt on every image and assembling the router training set.
//!
//! Each image is asked one fixed question set; every pool prompt answers the
//! same set through the gateway. An image contributes a training example only
//! when a single prompt is strictly best: ties, degenerate images (no
//! localized objects), and images with failed queries are excluded and
//! counted in the dataset manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::gateway::{DecodeParams, Gateway, GatewayError, LvlmRequest};
use crate::pope::{
    generate_questions, parse_yes_no, score_session, AnswerOutcome, PopeError, PopeSetup,
    PresenceQuestion,
};
use crate::raster::ImageRaster;
use crate::vp::{apply_prompt, VisualPrompt, VpError};

pub const DATASET_VERSION: &str = "vpdata/1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Vp(#[from] VpError),
    #[error(transparent)]
    Pope(#[from] PopeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("dataset: {0}")]
    Invalid(String),
}

/// One prompt's answered question session on one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    /// Digest (hex) of the unprompted source raster.
    pub source_digest: String,
    pub prompt_id: String,
    /// Fraction of questions answered correctly.
    pub score: f64,
    pub correct: u32,
    pub total: u32,
    pub outcomes: Vec<AnswerOutcome>,
    pub degenerate: bool,
}

/// All prompt sessions for one image plus bookkeeping for exclusions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub image_id: String,
    pub source_digest: String,
    /// One record per pool prompt that answered every question, in pool order.
    pub records: Vec<ScoreRecord>,
    /// Pool size when the evaluation ran; fewer records means failures.
    pub expected_prompts: usize,
    pub degenerate: bool,
    /// Per-prompt failures as (prompt id, error text).
    pub failures: Vec<(String, String)>,
}

impl ImageEvaluation {
    pub fn incomplete(&self) -> bool {
        self.records.len() < self.expected_prompts
    }
}

/// A training pair: image reference plus the uniquely optimal prompt id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterExample {
    pub image_id: String,
    /// Digest (hex) of the unprompted raster the features come from.
    pub feature_ref: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub total_images: usize,
    pub excluded_tie: usize,
    pub excluded_degenerate: usize,
    pub excluded_incomplete: usize,
    pub label_histogram: BTreeMap<String, usize>,
}

/// Everything `evaluate_corpus` needs besides the corpus itself.
#[derive(Debug, Clone)]
pub struct EvaluationOptions {
    pub model_ref: String,
    pub setup: PopeSetup,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub decode: DecodeParams,
    pub max_in_flight: usize,
}

/// An image loaded for evaluation.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub record: ImageRecord,
    pub raster: ImageRaster,
}

/// Scores every pool prompt on one image against one shared question set.
/// Query failures drop that prompt's record and are reported in `failures`.
pub fn evaluate_all_prompts(
    item: &CorpusItem,
    pool: &[VisualPrompt],
    questions: &[PresenceQuestion],
    gateway: &Gateway,
    opts: &EvaluationOptions,
) -> Result<ImageEvaluation, DatasetError> {
    let source_digest = item.raster.digest_hex();
    let regions: Vec<_> = item.record.boxes.iter().map(|b| b.region).collect();
    let mut evaluation = ImageEvaluation {
        image_id: item.record.image_id.clone(),
        source_digest: source_digest.clone(),
        records: Vec::new(),
        expected_prompts: pool.len(),
        degenerate: regions.is_empty(),
        failures: Vec::new(),
    };
    if questions.is_empty() {
        evaluation.failures.push(("*".into(), "no questions could be generated".into()));
        return Ok(evaluation);
    }

    for prompt in pool {
        let prompted = apply_prompt(&item.raster, prompt, &regions)?;
        let requests: Vec<LvlmRequest> = questions
            .iter()
            .map(|q| LvlmRequest {
                model_ref: opts.model_ref.clone(),
                image: prompted.clone(),
                text: q.text.clone(),
                decode: opts.decode,
            })
            .collect();
        let replies = gateway.batch_collect(&requests, opts.max_in_flight)?;

        let mut outcomes = Vec::with_capacity(questions.len());
        let mut failed = None;
        for (question, reply) in questions.iter().zip(replies) {
            match reply {
                Ok(resp) => {
                    outcomes.push(AnswerOutcome::judge(question.clone(), parse_yes_no(&resp.text)));
                }
                Err(err) => {
                    failed = Some(err.to_string());
                    break;
                }
            }
        }
        if let Some(err) = failed {
            evaluation.failures.push((prompt.id.clone(), err));
            continue;
        }
        let correct = outcomes.iter().filter(|o| o.correct).count() as u32;
        let score = score_session(&outcomes)?;
        evaluation.records.push(ScoreRecord {
            image_id: item.record.image_id.clone(),
            source_digest: source_digest.clone(),
            prompt_id: prompt.id.clone(),
            score,
            correct,
            total: outcomes.len() as u32,
            outcomes,
            degenerate: evaluation.degenerate,
        });
    }
    Ok(evaluation)
}

/// Evaluates the whole corpus with one question set per image.
pub fn evaluate_corpus(
    items: &[CorpusItem],
    pool: &[VisualPrompt],
    stats: &crate::annotations::CategoryStats,
    gateway: &Gateway,
    opts: &EvaluationOptions,
) -> Result<Vec<ImageEvaluation>, DatasetError> {
    let mut evaluations = Vec::with_capacity(items.len());
    for item in items {
        let questions = generate_questions(&item.record, stats, opts.setup, opts.n_pos, opts.n_neg, opts.seed);
        evaluations.push(evaluate_all_prompts(item, pool, &questions, gateway, opts)?);
    }
    Ok(evaluations)
}

/// Picks the prompt with strictly more correct answers than every other.
/// Scores compare as exact rationals (correct/total), never as floats.
/// Returns None when the maximum is shared.
pub fn select_optimal(records: &[ScoreRecord]) -> Option<&str> {
    let best = records.iter().max_by(|a, b| cmp_rational(a, b))?;
    let tied = records
        .iter()
        .filter(|r| cmp_rational(r, best) == std::cmp::Ordering::Equal)
        .count();
    (tied == 1).then(|| best.prompt_id.as_str())
}

fn cmp_rational(a: &ScoreRecord, b: &ScoreRecord) -> std::cmp::Ordering {
    // correct_a/total_a vs correct_b/total_b without division.
    (a.correct as u64 * b.total as u64).cmp(&(b.correct as u64 * a.total as u64))
}

/// Assembles training examples from per-image evaluations. Exclusion
/// precedence per image: degenerate, then incomplete, then tie.
pub fn build_dataset(
    evaluations: &[ImageEvaluation],
) -> Result<(Vec<RouterExample>, DatasetManifest), DatasetError> {
    let mut sorted: Vec<&ImageEvaluation> = evaluations.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut manifest = DatasetManifest {
        version: DATASET_VERSION.into(),
        total_images: evaluations.len(),
        excluded_tie: 0,
        excluded_degenerate: 0,
        excluded_incomplete: 0,
        label_histogram: BTreeMap::new(),
    };
    let mut examples = Vec::new();
    for eval in sorted {
        if eval.degenerate {
            manifest.excluded_degenerate += 1;
        } else if eval.incomplete() {
            manifest.excluded_incomplete += 1;
        } else if let Some(label) = select_optimal(&eval.records) {
            *manifest.label_histogram.entry(label.to_string()).or_insert(0) += 1;
            examples.push(RouterExample {
                image_id: eval.image_id.clone(),
                feature_ref: eval.source_digest.clone(),
                label: label.to_string(),
            });
        } else {
            manifest.excluded_tie += 1;
        }
    }

    let excluded = manifest.excluded_tie + manifest.excluded_degenerate + manifest.excluded_incomplete;
    if examples.len() + excluded != manifest.total_images {
        return Err(DatasetError::Invalid(format!(
            "{} examples + {} excluded != {} images",
            examples.len(),
            excluded,
            manifest.total_images
        )));
    }
    Ok((examples, manifest))
}
