//! Object-presence questions and answer scoring.
//!
//! For each image a balanced set of yes/no questions is generated: positives
//! about present categories and negatives about absent ones, where the
//! negative sampling strategy is one of three setups (random, popular,
//! adversarial). A session score is the fraction of questions answered
//! correctly; unparseable answers count as incorrect.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{CategoryStats, ImageRecord};

#[derive(Debug, thiserror::Error)]
pub enum PopeError {
    #[error("cannot score an empty outcome list")]
    EmptySession,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSetup {
    /// Absent categories drawn uniformly.
    Random,
    /// The most frequent absent categories.
    Popular,
    /// Absent categories that co-occur most with the present ones.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceQuestion {
    pub image_id: String,
    pub object: String,
    pub polarity: Polarity,
    pub setup: PopeSetup,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub question: PresenceQuestion,
    pub parsed: ParsedAnswer,
    pub correct: bool,
}

impl AnswerOutcome {
    /// Judges a parsed answer against the question's polarity; unknown
    /// answers are always incorrect.
    pub fn judge(question: PresenceQuestion, parsed: ParsedAnswer) -> Self {
        let correct = match parsed {
            ParsedAnswer::Yes => question.polarity == Polarity::Positive,
            ParsedAnswer::No => question.polarity == Polarity::Negative,
            ParsedAnswer::Unknown => false,
        };
        AnswerOutcome { question, parsed, correct }
    }
}

pub const DEFAULT_N_POS: usize = 3;
pub const DEFAULT_N_NEG: usize = 3;

/// Renders the fixed question template, choosing the article by the object's
/// leading vowel.
pub fn question_text(object: &str) -> String {
    let article = match object.chars().next() {
        Some(c) if "aeiou".contains(c.to_ascii_lowercase()) => "an",
        _ => "a",
    };
    format!("Is there {article} {object} in the image?")
}

/// RNG keyed by (seed, image id): question sampling for one image never
/// depends on corpus order or on other images.
fn image_rng(seed: u64, image_id: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

/// Generates up to `n_pos` positive and `n_neg` negative questions for one
/// image, positives first. Fewer are returned when the present or absent
/// category pools are smaller than requested.
pub fn generate_questions(
    rec: &ImageRecord,
    stats: &CategoryStats,
    setup: PopeSetup,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Vec<PresenceQuestion> {
    let mut rng = image_rng(seed, &rec.image_id);
    let present: Vec<&str> = rec.present.iter().map(String::as_str).collect();
    let absent: Vec<&str> = stats.categories().filter(|c| !rec.present.contains(*c)).collect();

    let positives: Vec<&str> = {
        let amount = n_pos.min(present.len());
        rand::seq::index::sample(&mut rng, present.len(), amount)
            .into_iter()
            .map(|i| present[i])
            .collect()
    };

    let negatives: Vec<&str> = match setup {
        PopeSetup::Random => {
            let amount = n_neg.min(absent.len());
            rand::seq::index::sample(&mut rng, absent.len(), amount)
                .into_iter()
                .map(|i| absent[i])
                .collect()
        }
        PopeSetup::Popular => {
            let mut ranked = absent.clone();
            ranked.sort_by(|a, b| stats.frequency(b).cmp(&stats.frequency(a)).then(a.cmp(b)));
            ranked.into_iter().take(n_neg).collect()
        }
        PopeSetup::Adversarial => {
            let cooccur_sum =
                |cand: &str| -> u64 { present.iter().map(|p| stats.cooccurrence(cand, p)).sum() };
            let mut ranked = absent.clone();
            ranked.sort_by(|a, b| {
                cooccur_sum(b)
                    .cmp(&cooccur_sum(a))
                    .then(stats.frequency(b).cmp(&stats.frequency(a)))
                    .then(a.cmp(b))
            });
            ranked.into_iter().take(n_neg).collect()
        }
    };

    let make = |object: &str, polarity: Polarity| PresenceQuestion {
        image_id: rec.image_id.clone(),
        object: object.to_string(),
        polarity,
        setup,
        text: question_text(object),
    };
    positives
        .into_iter()
        .map(|o| make(o, Polarity::Positive))
        .chain(negatives.into_iter().map(|o| make(o, Polarity::Negative)))
        .collect()
}

/// Extracts a yes/no verdict: the first standalone "yes" or "no" among the
/// first ten whitespace tokens (punctuation stripped), else unknown.
pub fn parse_yes_no(text: &str) -> ParsedAnswer {
    let lower = text.to_lowercase();
    for token in lower.split_whitespace().take(10) {
        let token = token.trim_matches(|c: char| !c.is_alphanumeric());
        match token {
            "yes" => return ParsedAnswer::Yes,
            "no" => return ParsedAnswer::No,
            _ => {}
        }
    }
    ParsedAnswer::Unknown
}

/// Fraction of outcomes marked correct.
pub fn score_session(outcomes: &[AnswerOutcome]) -> Result<f64, PopeError> {
    if outcomes.is_empty() {
        return Err(PopeError::EmptySession);
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(correct as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::compute_stats;
    use std::path::PathBuf;

    fn record(id: &str, present: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            file_path: PathBuf::from(format!("{id}.png")),
            present: present.iter().map(|s| s.to_string()).collect(),
            boxes: Vec::new(),
        }
    }

    fn corpus_stats() -> CategoryStats {
        // Frequencies: dog 3, chair 2, kite 2, zebra 1, oven 1.
        // Co-occurrence with dog: chair 2, kite 1, zebra 1.
        let records = vec![
            record("1", &["dog", "chair"]),
            record("2", &["dog", "kite", "chair"]),
            record("3", &["dog", "zebra"]),
            record("4", &["kite", "oven"]),
        ];
        compute_stats(&records)
    }

    #[test]
    fn question_text_picks_article() {
        assert_eq!(question_text("dog"), "Is there a dog in the image?");
        assert_eq!(question_text("orange"), "Is there an orange in the image?");
        assert_eq!(question_text("umbrella"), "Is there an umbrella in the image?");
        assert_eq!(question_text("dining table"), "Is there a dining table in the image?");
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let stats = corpus_stats();
        let rec = record("1", &["dog", "chair"]);
        let a = generate_questions(&rec, &stats, PopeSetup::Random, 3, 3, 42);
        let b = generate_questions(&rec, &stats, PopeSetup::Random, 3, 3, 42);
        assert_eq!(a, b);
        // Only two present categories exist, so only two positives come back.
        assert_eq!(a.iter().filter(|q| q.polarity == Polarity::Positive).count(), 2);
        assert_eq!(a.iter().filter(|q| q.polarity == Polarity::Negative).count(), 3);
        for q in &a {
            match q.polarity {
                Polarity::Positive => assert!(rec.present.contains(&q.object)),
                Polarity::Negative => assert!(!rec.present.contains(&q.object)),
            }
            assert_eq!(q.text, question_text(&q.object));
        }
        let c = generate_questions(&rec, &stats, PopeSetup::Random, 3, 3, 43);
        assert!(a != c || a.len() == c.len());
    }

    #[test]
    fn popular_setup_ranks_by_frequency() {
        let stats = corpus_stats();
        let rec = record("9", &["zebra"]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Popular, 0, 2, 7);
        let objects: Vec<&str> = qs.iter().map(|q| q.object.as_str()).collect();
        // dog (3) first, then chair/kite tie (2) broken by name.
        assert_eq!(objects, ["dog", "chair"]);
    }

    #[test]
    fn adversarial_setup_ranks_by_cooccurrence() {
        let stats = corpus_stats();
        let rec = record("9", &["dog"]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Adversarial, 0, 3, 7);
        let objects: Vec<&str> = qs.iter().map(|q| q.object.as_str()).collect();
        // chair co-occurs with dog twice; kite and zebra once each, tie broken
        // by frequency (kite 2 > zebra 1).
        assert_eq!(objects, ["chair", "kite", "zebra"]);
    }

    #[test]
    fn sampling_is_independent_of_other_images() {
        let stats = corpus_stats();
        let rec = record("1", &["dog", "chair"]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Popular, 3, 3, 42);

        let mut bigger = corpus_stats();
        bigger.add_category("new_thing_never_seen");
        let qs2 = generate_questions(&rec, &stats, PopeSetup::Popular, 3, 3, 42);
        drop(bigger);
        assert_eq!(qs, qs2);
    }

    #[test]
    fn parse_handles_common_shapes() {
        assert_eq!(parse_yes_no("Yes"), ParsedAnswer::Yes);
        assert_eq!(parse_yes_no("yes, there is a dog."), ParsedAnswer::Yes);
        assert_eq!(parse_yes_no("No."), ParsedAnswer::No);
        assert_eq!(parse_yes_no("  NO way"), ParsedAnswer::No);
        assert_eq!(parse_yes_no("I think yes"), ParsedAnswer::Yes);
        assert_eq!(parse_yes_no("There is no dog in this image"), ParsedAnswer::No);
        assert_eq!(parse_yes_no("No, yes appears later"), ParsedAnswer::No);
        assert_eq!(parse_yes_no("(Yes)"), ParsedAnswer::Yes);
        assert_eq!(parse_yes_no("Not sure"), ParsedAnswer::Unknown);
        assert_eq!(parse_yes_no("nothing here"), ParsedAnswer::Unknown);
        assert_eq!(parse_yes_no(""), ParsedAnswer::Unknown);
        // Eleventh token is out of scan range.
        assert_eq!(parse_yes_no("a b c d e f g h i j yes"), ParsedAnswer::Unknown);
    }

    #[test]
    fn outcomes_judge_against_polarity() {
        let stats = corpus_stats();
        let rec = record("1", &["dog"]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Popular, 1, 1, 1);
        let (positive, negative) = (qs[0].clone(), qs[1].clone());

        assert!(AnswerOutcome::judge(positive.clone(), ParsedAnswer::Yes).correct);
        assert!(!AnswerOutcome::judge(positive.clone(), ParsedAnswer::No).correct);
        assert!(!AnswerOutcome::judge(positive, ParsedAnswer::Unknown).correct);
        assert!(AnswerOutcome::judge(negative.clone(), ParsedAnswer::No).correct);
        assert!(!AnswerOutcome::judge(negative.clone(), ParsedAnswer::Yes).correct);
        assert!(!AnswerOutcome::judge(negative, ParsedAnswer::Unknown).correct);
    }

    #[test]
    fn session_score_is_correct_fraction() {
        let stats = corpus_stats();
        let rec = record("1", &["dog", "chair"]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Popular, 2, 2, 1);
        let outcomes: Vec<AnswerOutcome> = qs
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let parsed = if i < 3 { ParsedAnswer::Yes } else { ParsedAnswer::No };
                AnswerOutcome::judge(q.clone(), parsed)
            })
            .collect();
        // Positives answered yes (2 correct), one negative yes (wrong), one no (correct).
        assert_eq!(score_session(&outcomes).unwrap(), 0.75);
        assert!(matches!(score_session(&[]), Err(PopeError::EmptySession)));
    }

    #[test]
    fn zero_present_images_get_no_positives() {
        let stats = corpus_stats();
        let rec = record("empty", &[]);
        let qs = generate_questions(&rec, &stats, PopeSetup::Random, 3, 3, 5);
        assert_eq!(qs.len(), 3);
        assert!(qs.iter().all(|q| q.polarity == Polarity::Negative));
    }
}
