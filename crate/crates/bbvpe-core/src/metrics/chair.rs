//! Hallucination rates over free-form image descriptions.
//!
//! Descriptions are split into sentences, object mentions are extracted by
//! longest-match lookup in a synonym table, and a mention is hallucinated
//! when its canonical category is not in the image's ground truth. CH_S is
//! the fraction of sentences containing a hallucinated mention; CH_I is the
//! fraction of mention instances that are hallucinated.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Surface form → canonical category, matched case-insensitively on word
/// boundaries, longest surface form first. A trailing "s" is stripped before
/// a failed lookup is given up on, so plural forms need no separate entries.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
    /// Longest surface form, in words.
    max_words: usize,
}

/// Extra surface forms folded into every default table when their target
/// category exists in the corpus.
const BUILTIN_SYNONYMS: &[(&str, &str)] = &[
    ("automobile", "car"),
    ("aeroplane", "airplane"),
    ("plane", "airplane"),
    ("bicycle", "bike"),
    ("bike", "bicycle"),
    ("motorcycle", "motorbike"),
    ("motorbike", "motorcycle"),
    ("television", "tv"),
    ("couch", "sofa"),
    ("sofa", "couch"),
    ("man", "person"),
    ("woman", "person"),
    ("boy", "person"),
    ("girl", "person"),
    ("child", "person"),
    ("kid", "person"),
    ("guy", "person"),
    ("people", "person"),
    ("puppy", "dog"),
    ("kitten", "cat"),
    ("cellphone", "cell phone"),
    ("mobile phone", "cell phone"),
];

impl SynonymTable {
    /// Identity mapping over the given categories plus the built-in synonym
    /// list restricted to targets among them.
    pub fn identity<'a>(categories: impl IntoIterator<Item = &'a str>) -> Self {
        let mut table = SynonymTable::default();
        let cats: BTreeSet<String> = categories.into_iter().map(|c| c.to_lowercase()).collect();
        for c in &cats {
            table.insert(c, c);
        }
        for (surface, canonical) in BUILTIN_SYNONYMS {
            if cats.contains(*canonical) {
                table.insert(surface, canonical);
            }
        }
        table
    }

    /// Two-column TSV: surface form, then canonical category. Empty lines
    /// and `#` comments are skipped.
    pub fn from_tsv(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)?;
        let mut table = SynonymTable::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(surface), Some(canonical), None) if !surface.trim().is_empty() && !canonical.trim().is_empty() => {
                    table.insert(surface.trim(), canonical.trim());
                }
                _ => {
                    return Err(MetricsError::SynonymFormat {
                        line: i + 1,
                        reason: "expected exactly two tab-separated columns".into(),
                    });
                }
            }
        }
        Ok(table)
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        let surface = normalize_phrase(surface);
        self.max_words = self.max_words.max(surface.split(' ').count());
        self.map.insert(surface, canonical.to_lowercase());
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Exact lookup, then a retry with one trailing "s" stripped.
    fn lookup(&self, phrase: &str) -> Option<&str> {
        if let Some(c) = self.map.get(phrase) {
            return Some(c);
        }
        let singular = phrase.strip_suffix('s')?;
        if singular.is_empty() {
            return None;
        }
        self.map.get(singular).map(String::as_str)
    }
}

fn normalize_phrase(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One description paired with the objects actually in its image.
#[derive(Debug, Clone)]
pub struct ChairInput {
    pub description: String,
    pub truth: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    /// Fraction of sentences with at least one hallucinated mention.
    pub ch_s: f64,
    /// Fraction of mention instances that are hallucinated.
    pub ch_i: f64,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    /// Distinct hallucinated categories, for inspection.
    pub hallucinated_objects: BTreeSet<String>,
}

fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?']).map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn words(sentence: &str) -> Vec<String> {
    let lower = sentence.to_lowercase();
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// All canonical-category mentions in one sentence, one entry per instance,
/// longest surface forms matched first.
fn extract_mentions(sentence: &str, table: &SynonymTable) -> Vec<String> {
    let words = words(sentence);
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = None;
        let longest = table.max_words.min(words.len() - i);
        for len in (1..=longest).rev() {
            let phrase = words[i..i + len].join(" ");
            if let Some(canonical) = table.lookup(&phrase) {
                matched = Some((canonical.to_string(), len));
                break;
            }
        }
        match matched {
            Some((canonical, len)) => {
                mentions.push(canonical);
                i += len;
            }
            None => i += 1,
        }
    }
    mentions
}

/// Sentence- and instance-level hallucination rates over a batch of
/// descriptions. CH_I is 0 when nothing is mentioned at all.
pub fn chair(inputs: &[ChairInput], table: &SynonymTable) -> Result<ChairReport, MetricsError> {
    if table.is_empty() {
        return Err(MetricsError::EmptySynonymTable);
    }
    let mut report = ChairReport {
        ch_s: 0.0,
        ch_i: 0.0,
        sentences: 0,
        hallucinated_sentences: 0,
        mentions: 0,
        hallucinated_mentions: 0,
        hallucinated_objects: BTreeSet::new(),
    };
    for input in inputs {
        let truth: BTreeSet<String> = input.truth.iter().map(|t| t.to_lowercase()).collect();
        for sentence in split_sentences(&input.description) {
            report.sentences += 1;
            let mut sentence_hallucinated = false;
            for mention in extract_mentions(sentence, table) {
                report.mentions += 1;
                if !truth.contains(&mention) {
                    report.hallucinated_mentions += 1;
                    sentence_hallucinated = true;
                    report.hallucinated_objects.insert(mention);
                }
            }
            if sentence_hallucinated {
                report.hallucinated_sentences += 1;
            }
        }
    }
    if report.sentences == 0 {
        return Err(MetricsError::EmptyDescriptions);
    }
    report.ch_s = report.hallucinated_sentences as f64 / report.sentences as f64;
    report.ch_i = if report.mentions == 0 {
        0.0
    } else {
        report.hallucinated_mentions as f64 / report.mentions as f64
    };
    Ok(report)
}
