//! Deterministic stand-in for a real vision-language model.
//!
//! Whether the mock answers a presence question correctly is a pure function
//! of (source image digest, prompt id, question text) and the configured
//! accuracy: the hash of those inputs is mapped to a uniform number in [0,1)
//! and compared against the accuracy. That makes corpus-scale runs exactly
//! reproducible and lets tests recompute expected scores independently.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, LvlmProvider, LvlmRequest, ProviderReply};

/// Fixed prompt used whenever a full image description is wanted.
pub const DESCRIPTION_PROMPT: &str = "Please describe this image in detail.";

/// Per-prompt answer accuracies, optionally overridden per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    /// Accuracy used when no per-prompt or per-image entry matches.
    pub default_accuracy: f64,
    /// Accuracy per prompt id.
    #[serde(default)]
    pub per_prompt: BTreeMap<String, f64>,
    /// Accuracy per source image digest (hex), then prompt id.
    #[serde(default)]
    pub per_image: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Default for MockProfile {
    fn default() -> Self {
        MockProfile { default_accuracy: 0.8, per_prompt: BTreeMap::new(), per_image: BTreeMap::new() }
    }
}

impl MockProfile {
    pub fn effective_accuracy(&self, image_digest_hex: &str, prompt_id: &str) -> f64 {
        if let Some(per_prompt) = self.per_image.get(image_digest_hex) {
            if let Some(acc) = per_prompt.get(prompt_id) {
                return *acc;
            }
        }
        self.per_prompt.get(prompt_id).copied().unwrap_or(self.default_accuracy)
    }
}

/// Hash-derived uniform number in [0,1): the first eight big-endian bytes of
/// SHA-256(digest || prompt_id || question) divided by 2^64.
pub fn mock_uniform(image_digest: &[u8; 32], prompt_id: &str, question: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(image_digest);
    hasher.update(prompt_id.as_bytes());
    hasher.update(question.as_bytes());
    let out: [u8; 32] = hasher.finalize().into();
    let x = u64::from_be_bytes(out[..8].try_into().unwrap());
    x as f64 / 2f64.powi(64)
}

/// Answers a presence question: correct with probability `accuracy` taken
/// from the profile, decided by the deterministic uniform draw.
pub fn mock_respond(
    profile: &MockProfile,
    image_digest: &[u8; 32],
    prompt_id: &str,
    question: &str,
    truth_is_yes: bool,
) -> String {
    let acc = profile.effective_accuracy(&hex::encode(image_digest), prompt_id);
    let correct = mock_uniform(image_digest, prompt_id, question) < acc;
    if truth_is_yes == correct {
        "Yes".to_string()
    } else {
        "No".to_string()
    }
}

/// Extracts the object from text shaped like `Is there a/an {object} in the image?`.
pub fn parse_presence_question(text: &str) -> Option<String> {
    let lower = text.trim().to_lowercase();
    let rest = lower.strip_prefix("is there an ").or_else(|| lower.strip_prefix("is there a "))?;
    let object = rest.strip_suffix(" in the image?")?;
    (!object.is_empty()).then(|| object.to_string())
}

/// In-process provider that knows the ground truth for registered images.
pub struct MockLvlm {
    pub profile: MockProfile,
    truth: RwLock<HashMap<String, BTreeSet<String>>>,
    vocabulary: RwLock<BTreeSet<String>>,
}

impl MockLvlm {
    pub fn new(profile: MockProfile) -> Self {
        MockLvlm { profile, truth: RwLock::new(HashMap::new()), vocabulary: RwLock::new(BTreeSet::new()) }
    }

    /// Registers which categories are actually present in an image.
    pub fn register_image(&self, digest: [u8; 32], present: BTreeSet<String>) {
        self.vocabulary.write().unwrap().extend(present.iter().cloned());
        self.truth.write().unwrap().insert(hex::encode(digest), present);
    }

    /// Categories the mock may hallucinate into descriptions.
    pub fn extend_vocabulary(&self, categories: impl IntoIterator<Item = String>) {
        self.vocabulary.write().unwrap().extend(categories);
    }

    fn describe(&self, digest: &[u8; 32], prompt_id: &str) -> String {
        let digest_hex = hex::encode(digest);
        let truth = self.truth.read().unwrap();
        let present = truth.get(&digest_hex).cloned().unwrap_or_default();
        let acc = self.profile.effective_accuracy(&digest_hex, prompt_id);
        let mut sentences = vec!["The image shows a scene".to_string()];
        for cat in &present {
            sentences.push(format!("There is a {cat} in the picture"));
        }
        for cat in self.vocabulary.read().unwrap().iter() {
            if present.contains(cat) {
                continue;
            }
            let u = mock_uniform(digest, prompt_id, &format!("describe:{cat}"));
            if u >= acc {
                sentences.push(format!("A {cat} appears near the center"));
            }
        }
        sentences.join(". ") + "."
    }

    /// Well-formed judge reply with hash-derived scores in [1, 10]. Keyed by
    /// the full instruction text, so the scores react to the descriptions.
    fn judge_reply(&self, digest: &[u8; 32], prompt_id: &str, instruction: &str) -> String {
        let mut criteria = [[0.0; 8]; 5];
        for (c, row) in criteria.iter_mut().enumerate() {
            for (d, score) in row.iter_mut().enumerate() {
                let u = mock_uniform(digest, prompt_id, &format!("judge:{c}:{d}:{instruction}"));
                *score = (1.0 + (u * 10.0).floor()).min(10.0);
            }
        }
        let mut totals = [0.0; 8];
        for (d, total) in totals.iter_mut().enumerate() {
            *total = (0..5).map(|c| criteria[c][d]).sum();
        }
        crate::metrics::format_judge_reply(&criteria, &totals)
    }
}

impl LvlmProvider for MockLvlm {
    fn complete(&self, req: &LvlmRequest) -> Result<ProviderReply, GatewayError> {
        let digest = &req.image.source_digest;
        let text = if let Some(object) = parse_presence_question(&req.text) {
            let truth_is_yes = self
                .truth
                .read()
                .unwrap()
                .get(&hex::encode(digest))
                .map(|cats| cats.contains(&object))
                .unwrap_or(false);
            mock_respond(&self.profile, digest, &req.image.prompt_id, &req.text, truth_is_yes)
        } else if req.text == DESCRIPTION_PROMPT {
            self.describe(digest, &req.image.prompt_id)
        } else if req.text.starts_with("Compare and evaluate the following 8 descriptions") {
            self.judge_reply(digest, &req.image.prompt_id, &req.text)
        } else {
            "I cannot tell from this image.".to_string()
        };
        let token_count = text.split_whitespace().count() as u32;
        Ok(ProviderReply { text, token_count })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(tag: u8) -> [u8; 32] {
        [tag; 32]
    }

    #[test]
    fn uniform_is_deterministic_and_input_sensitive() {
        let a = mock_uniform(&digest(1), "none", "Is there a dog in the image?");
        let b = mock_uniform(&digest(1), "none", "Is there a dog in the image?");
        assert_eq!(a, b);
        assert!((0.0..1.0).contains(&a));
        assert_ne!(a, mock_uniform(&digest(2), "none", "Is there a dog in the image?"));
        assert_ne!(a, mock_uniform(&digest(1), "blur", "Is there a dog in the image?"));
        assert_ne!(a, mock_uniform(&digest(1), "none", "Is there a cat in the image?"));
    }

    #[test]
    fn uniform_draws_look_uniform() {
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|i| mock_uniform(&digest(3), "none", &format!("Is there a q{i} in the image?")))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn accuracy_extremes_pin_answers() {
        let sure = MockProfile { default_accuracy: 1.0, ..Default::default() };
        let wrong = MockProfile { default_accuracy: 0.0, ..Default::default() };
        for (q, truth) in [("Is there a dog in the image?", true), ("Is there a cat in the image?", false)] {
            let yes_no = if truth { "Yes" } else { "No" };
            let flipped = if truth { "No" } else { "Yes" };
            assert_eq!(mock_respond(&sure, &digest(5), "none", q, truth), yes_no);
            assert_eq!(mock_respond(&wrong, &digest(5), "none", q, truth), flipped);
        }
    }

    #[test]
    fn empirical_accuracy_tracks_profile() {
        let profile = MockProfile { default_accuracy: 0.7, ..Default::default() };
        let n = 1000;
        let correct = (0..n)
            .filter(|i| {
                let q = format!("Is there a thing{i} in the image?");
                mock_respond(&profile, &digest(8), "crop", &q, true) == "Yes"
            })
            .count();
        let rate = correct as f64 / n as f64;
        assert!((rate - 0.7).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn per_image_overrides_beat_per_prompt() {
        let d = digest(4);
        let hexd = hex::encode(d);
        let profile = MockProfile {
            default_accuracy: 0.1,
            per_prompt: [("blur".to_string(), 0.5)].into(),
            per_image: [(hexd.clone(), [("blur".to_string(), 0.9)].into())].into(),
        };
        assert_eq!(profile.effective_accuracy(&hexd, "blur"), 0.9);
        assert_eq!(profile.effective_accuracy("other", "blur"), 0.5);
        assert_eq!(profile.effective_accuracy("other", "crop"), 0.1);
    }

    #[test]
    fn question_parsing_round_trips() {
        assert_eq!(parse_presence_question("Is there a dog in the image?"), Some("dog".into()));
        assert_eq!(parse_presence_question("Is there an orange in the image?"), Some("orange".into()));
        assert_eq!(parse_presence_question("Is there a dining table in the image?"), Some("dining table".into()));
        assert_eq!(parse_presence_question("Describe the image."), None);
    }

    #[test]
    fn descriptions_mention_all_truth() {
        let mock = MockLvlm::new(MockProfile { default_accuracy: 0.5, ..Default::default() });
        let d = digest(6);
        mock.register_image(d, ["dog".to_string(), "kite".to_string()].into());
        mock.extend_vocabulary(["zebra".to_string(), "couch".to_string(), "tv".to_string()]);
        let text = mock.describe(&d, "none");
        assert!(text.contains("dog") && text.contains("kite"));
        assert_eq!(text, mock.describe(&d, "none"));
    }

    #[test]
    fn judge_prompts_get_parseable_consistent_replies() {
        let mock = MockLvlm::new(MockProfile::default());
        let d = digest(9);
        let descriptions: Vec<String> = (1..=8).map(|i| format!("Description {i}.")).collect();
        let instruction = crate::metrics::build_judge_prompt(&descriptions).unwrap();
        let reply = mock.judge_reply(&d, "none", &instruction);
        let scores = crate::metrics::parse_judge_scores(&reply).unwrap();
        assert!(scores.consistent());
        assert!(scores.criteria.iter().flatten().all(|s| (1.0..=10.0).contains(s)));
        assert_eq!(reply, mock.judge_reply(&d, "none", &instruction));
        // Different descriptions change the scores.
        let other = crate::metrics::build_judge_prompt(&vec!["x.".to_string(); 8]).unwrap();
        assert_ne!(reply, mock.judge_reply(&d, "none", &other));
    }
}
