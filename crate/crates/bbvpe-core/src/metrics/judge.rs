//! The eight-description quality-judgment protocol: building the judge's
//! instruction and parsing its score reply.

use serde::{Deserialize, Serialize};

use super::MetricsError;

pub const JUDGE_DESCRIPTION_COUNT: usize = 8;

pub const JUDGE_CRITERIA: [&str; 5] = ["Accuracy", "Detail", "Comprehensiveness", "Relevance", "Robustness"];

pub const JUDGE_SYSTEM_MESSAGE: &str = "You are an expert in image description evaluation. Your task is to assess how well textual descriptions capture the detailed visual information of images.";

/// The fixed instruction text around the eight descriptions. This wording is
/// a protocol constant: the reply parser and any external judge model must
/// agree on it, so it must not be edited casually.
const INSTRUCTION_HEAD: &str = "Compare and evaluate the following 8 descriptions of the provided image.\n\nDescriptions:\n";

const INSTRUCTION_TAIL: &str = "\nFor each description, rate a score on a scale of 1 to 10, where a higher score indicates better performance, for each of the 5 criteria:\n1. Accuracy: How precisely does the description reflect the actual objects, details, and attributes (such as color, shape, and number of objects) visible in the image?\n2. Detail: How thoroughly does the description capture visual details of the objects, including finer elements like positions, relative sizes, and relationships?\n3. Comprehensiveness: How well does the description cover all key elements of the image, without omitting important objects or details?\n4. Relevance: Does the description focus on significant and pertinent details from the image. The score decreases if the description includes unnecessary or unrelated information that distracts from the core details of the image.\n5. Robustness: Does the description avoid mentioning any objects or attributes that are not present in the image? Descriptions without any false information score higher. If nonexistent elements are included, the score decreases.\n\nOnly provide the numerical scores for each criterion and the total score, formatted as follows:\n1. Accuracy: score1 | score2 | score3 | score4 | score5 | score6 | score7 | score8\n2. Detail: score1 | score2 | score3 | score4 | score5 | score6 | score7 | score8\n3. Comprehensiveness: score1 | score2 | score3 | score4 | score5 | score6 | score7 | score8\n4. Relevance: score1 | score2 | score3 | score4 | score5 | score6 | score7 | score8\n5. Robustness: score1 | score2 | score3 | score4 | score5 | score6 | score7 | score8\nTotal Score: total1 | total2 | total3 | total4 | total5 | total6 | total7 | total8";

/// Renders the judge instruction with the eight descriptions substituted in
/// order, one per line.
pub fn build_judge_prompt(descriptions: &[String]) -> Result<String, MetricsError> {
    if descriptions.len() != JUDGE_DESCRIPTION_COUNT {
        return Err(MetricsError::JudgeArity(descriptions.len()));
    }
    let mut out = String::from(INSTRUCTION_HEAD);
    for d in descriptions {
        out.push_str(d);
        out.push('\n');
    }
    out.push_str(INSTRUCTION_TAIL);
    Ok(out)
}

/// Scores parsed from a judge reply: five criteria and a stated total per
/// description, with totals re-derived for consistency checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    /// criteria[c][d]: criterion c's score for description d.
    pub criteria: [[f64; JUDGE_DESCRIPTION_COUNT]; 5],
    pub stated_totals: [f64; JUDGE_DESCRIPTION_COUNT],
    pub computed_totals: [f64; JUDGE_DESCRIPTION_COUNT],
    /// Per description: the stated total disagrees with the criterion sum.
    pub total_mismatch: [bool; JUDGE_DESCRIPTION_COUNT],
}

impl JudgeScores {
    pub fn consistent(&self) -> bool {
        !self.total_mismatch.iter().any(|&m| m)
    }
}

fn parse_score_line(line: &str, label: &str) -> Result<[f64; JUDGE_DESCRIPTION_COUNT], MetricsError> {
    let (_, values) = line
        .split_once(':')
        .ok_or_else(|| MetricsError::JudgeParse(format!("line {label:?} has no ':' separator")))?;
    let parts: Vec<&str> = values.split('|').map(str::trim).collect();
    if parts.len() != JUDGE_DESCRIPTION_COUNT {
        return Err(MetricsError::JudgeParse(format!(
            "line {label:?} has {} scores, expected {JUDGE_DESCRIPTION_COUNT}",
            parts.len()
        )));
    }
    let mut out = [0.0; JUDGE_DESCRIPTION_COUNT];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<f64>()
            .map_err(|_| MetricsError::JudgeParse(format!("line {label:?}: {p:?} is not a number")))?;
    }
    Ok(out)
}

/// Extracts the five criterion lines and the total line from a judge reply.
/// Criterion scores must lie in [1, 10]; stated totals are kept verbatim and
/// flagged where they disagree with the recomputed sum.
pub fn parse_judge_scores(reply: &str) -> Result<JudgeScores, MetricsError> {
    let mut criteria = [[0.0; JUDGE_DESCRIPTION_COUNT]; 5];
    for (c, name) in JUDGE_CRITERIA.iter().enumerate() {
        let label = format!("{}. {}", c + 1, name);
        let line = reply
            .lines()
            .map(str::trim)
            .find(|l| l.starts_with(&label))
            .ok_or_else(|| MetricsError::JudgeParse(format!("line {label:?} not found")))?;
        criteria[c] = parse_score_line(line, &label)?;
        for v in criteria[c] {
            if !(1.0..=10.0).contains(&v) {
                return Err(MetricsError::JudgeParse(format!("line {label:?}: score {v} outside [1, 10]")));
            }
        }
    }
    let total_line = reply
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with("Total Score"))
        .ok_or_else(|| MetricsError::JudgeParse("line \"Total Score\" not found".into()))?;
    let stated_totals = parse_score_line(total_line, "Total Score")?;

    let mut computed_totals = [0.0; JUDGE_DESCRIPTION_COUNT];
    for d in 0..JUDGE_DESCRIPTION_COUNT {
        computed_totals[d] = (0..5).map(|c| criteria[c][d]).sum();
    }
    let mut total_mismatch = [false; JUDGE_DESCRIPTION_COUNT];
    for d in 0..JUDGE_DESCRIPTION_COUNT {
        total_mismatch[d] = (computed_totals[d] - stated_totals[d]).abs() > 1e-9;
    }
    Ok(JudgeScores { criteria, stated_totals, computed_totals, total_mismatch })
}

/// Renders a well-formed reply from scores — the inverse of parsing, used by
/// tests and the deterministic mock judge.
pub fn format_judge_reply(criteria: &[[f64; JUDGE_DESCRIPTION_COUNT]; 5], totals: &[f64; JUDGE_DESCRIPTION_COUNT]) -> String {
    let line = |values: &[f64]| values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" | ");
    let mut out = String::new();
    for (c, name) in JUDGE_CRITERIA.iter().enumerate() {
        out.push_str(&format!("{}. {}: {}\n", c + 1, name, line(&criteria[c])));
    }
    out.push_str(&format!("Total Score: {}", line(totals)));
    out
}
