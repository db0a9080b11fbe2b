//! Evaluation metrics: presence-question classification scores, hallucination
//! rates over free-form descriptions, strategy comparisons, and the
//! eight-description judge protocol.

use serde::{Deserialize, Serialize};

use crate::pope::{AnswerOutcome, ParsedAnswer, Polarity};

mod chair;
mod compare;
mod judge;

pub use chair::{chair, ChairInput, ChairReport, SynonymTable};
pub use compare::{
    comparison_csv, comparison_table, oracle_choices, run_comparators, ComparatorInput,
    ComparatorOptions, ComparisonReport, StrategyRow, STRATEGY_BASELINE, STRATEGY_BBVPE,
    STRATEGY_BEST, STRATEGY_ORACLE, STRATEGY_RANDOM, STRATEGY_RANDOM_EXPECTED,
};
pub use judge::{
    build_judge_prompt, format_judge_reply, parse_judge_scores, JudgeScores, JUDGE_CRITERIA,
    JUDGE_DESCRIPTION_COUNT, JUDGE_SYSTEM_MESSAGE,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics over an all-zero confusion table are undefined")]
    EmptyConfusion,
    #[error("synonym table is empty")]
    EmptySynonymTable,
    #[error("synonym table line {line}: {reason}")]
    SynonymFormat { line: usize, reason: String },
    #[error("no sentences to score")]
    EmptyDescriptions,
    #[error("judge prompt needs exactly {JUDGE_DESCRIPTION_COUNT} descriptions, got {0}")]
    JudgeArity(usize),
    #[error("judge reply: {0}")]
    JudgeParse(String),
    #[error("image {image_id} has no record for prompt {prompt_id:?}")]
    MissingRecord { image_id: String, prompt_id: String },
    #[error("strategy ordering violated: {0}")]
    Ordering(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Question-level confusion table with "Yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies judged answers. An unparseable answer is a miss of the true
    /// label: a false negative on a positive question, a false positive on a
    /// negative one.
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a AnswerOutcome>) -> Self {
        let mut c = ConfusionCounts::default();
        for o in outcomes {
            match (o.question.polarity, o.parsed) {
                (Polarity::Positive, ParsedAnswer::Yes) => c.tp += 1,
                (Polarity::Positive, _) => c.fn_ += 1,
                (Polarity::Negative, ParsedAnswer::No) => c.tn += 1,
                (Polarity::Negative, _) => c.fp += 1,
            }
        }
        c
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy/precision/recall/F1 over a confusion table. A zero denominator
/// inside precision, recall, or F1 yields 0; an entirely empty table is an
/// error.
pub fn pope_metrics(c: &ConfusionCounts) -> Result<PopeMetrics, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PopeMetrics { accuracy, precision, recall, f1 })
}
