//! Object annotations: ground-truth loading, corpus statistics, and the
//! localization endpoint client.
//!
//! Ground-truth boxes always take precedence over endpoint output; the
//! endpoint exists for corpora without annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::http::{HttpError, HttpJson};
use crate::raster::{encode_png, ImageRaster, RasterError, RectRegion};

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation schema: {0}")]
    Schema(String),
    #[error("localization endpoint: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// One localized object: lowercase category, pixel region, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub category: String,
    pub region: RectRegion,
    pub score: f64,
}

/// One corpus image with its present categories and object boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file_path: PathBuf,
    pub present: BTreeSet<String>,
    pub boxes: Vec<ObjectBox>,
}

/// Parsed annotation file: records sorted by image id plus the declared
/// category universe (sorted, lowercase).
#[derive(Debug, Clone)]
pub struct AnnotationCorpus {
    pub records: Vec<ImageRecord>,
    pub categories: Vec<String>,
}

/// Category frequency and symmetric co-occurrence counts over a corpus.
/// Frequency counts images containing the category; co-occurrence counts
/// images containing both members of a pair.
#[derive(Debug, Clone, Default)]
pub struct CategoryStats {
    universe: BTreeSet<String>,
    frequency: BTreeMap<String, u64>,
    cooccur: BTreeMap<(String, String), u64>,
}

impl CategoryStats {
    /// All known categories, sorted.
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.universe.iter().map(|s| s.as_str())
    }

    pub fn add_category(&mut self, name: &str) {
        self.universe.insert(name.to_lowercase());
    }

    pub fn frequency(&self, category: &str) -> u64 {
        self.frequency.get(category).copied().unwrap_or(0)
    }

    pub fn cooccurrence(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.cooccur.get(&key).copied().unwrap_or(0)
    }
}

/// Counts frequencies and pairwise co-occurrence over the records' present sets.
pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> CategoryStats {
    let mut stats = CategoryStats::default();
    for rec in records {
        let present: Vec<&String> = rec.present.iter().collect();
        for cat in &present {
            stats.universe.insert((*cat).clone());
            *stats.frequency.entry((*cat).clone()).or_insert(0) += 1;
        }
        for i in 0..present.len() {
            for j in (i + 1)..present.len() {
                let key = (present[i].clone(), present[j].clone());
                *stats.cooccur.entry(key).or_insert(0) += 1;
            }
        }
    }
    stats
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

/// Converts a float `[x, y, w, h]` box to a pixel region, clamped to the
/// image when its dimensions are known. Returns None for empty boxes.
fn bbox_to_region(bbox: [f64; 4], width: Option<u32>, height: Option<u32>) -> Option<RectRegion> {
    let [x, y, w, h] = bbox;
    if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
        return None;
    }
    let x0 = x.floor().max(0.0) as u32;
    let y0 = y.floor().max(0.0) as u32;
    let mut x1 = (x + w).ceil().max(0.0) as u32;
    let mut y1 = (y + h).ceil().max(0.0) as u32;
    if let Some(w) = width {
        x1 = x1.min(w);
    }
    if let Some(h) = height {
        y1 = y1.min(h);
    }
    (x0 < x1 && y0 < y1).then_some(RectRegion::new(x0, y0, x1, y1))
}

/// Loads a COCO-style annotation file (`images`, `annotations`, `categories`).
/// Records come back sorted by image id; category names are lowercased.
pub fn load_annotations(path: &Path) -> Result<AnnotationCorpus, AnnotationError> {
    let text = std::fs::read_to_string(path)?;
    let file: CocoFile = serde_json::from_str(&text)?;

    let mut categories = BTreeMap::new();
    for cat in &file.categories {
        categories.insert(cat.id, cat.name.to_lowercase());
    }

    let mut records: BTreeMap<i64, ImageRecord> = BTreeMap::new();
    for img in &file.images {
        if records.contains_key(&img.id) {
            return Err(AnnotationError::Schema(format!("duplicate image id {}", img.id)));
        }
        records.insert(
            img.id,
            ImageRecord {
                image_id: img.id.to_string(),
                file_path: PathBuf::from(&img.file_name),
                present: BTreeSet::new(),
                boxes: Vec::new(),
            },
        );
    }

    let dims: BTreeMap<i64, (Option<u32>, Option<u32>)> =
        file.images.iter().map(|img| (img.id, (img.width, img.height))).collect();

    for ann in &file.annotations {
        let category = categories
            .get(&ann.category_id)
            .ok_or_else(|| AnnotationError::Schema(format!("unknown category id {}", ann.category_id)))?
            .clone();
        let rec = records
            .get_mut(&ann.image_id)
            .ok_or_else(|| AnnotationError::Schema(format!("annotation references unknown image id {}", ann.image_id)))?;
        let (w, h) = dims[&ann.image_id];
        if let Some(region) = bbox_to_region(ann.bbox, w, h) {
            rec.present.insert(category.clone());
            rec.boxes.push(ObjectBox { category, region, score: ann.score.unwrap_or(1.0).clamp(0.0, 1.0) });
        }
    }

    // BTreeMap iteration gives numeric image-id order.
    let records: Vec<ImageRecord> = records.into_values().collect();
    let mut names: Vec<String> = categories.into_values().collect();
    names.sort();
    names.dedup();
    Ok(AnnotationCorpus { records, categories: names })
}

#[derive(Deserialize)]
struct EndpointBox {
    #[serde(default)]
    category: Option<String>,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    score: f64,
}

/// Client for a JSON-over-HTTP object localization service.
pub struct LocalizationClient {
    endpoint: String,
    http: std::sync::Arc<dyn HttpJson>,
    pub min_score: f64,
}

pub const DEFAULT_MIN_SCORE: f64 = 0.5;

impl LocalizationClient {
    pub fn new(endpoint: impl Into<String>, http: std::sync::Arc<dyn HttpJson>) -> Self {
        LocalizationClient { endpoint: endpoint.into(), http, min_score: DEFAULT_MIN_SCORE }
    }

    /// Sends the image and returns boxes with `score >= min_score`, clamped to
    /// the image bounds and sorted by descending score (stable).
    pub fn localize(&self, img: &ImageRaster) -> Result<Vec<ObjectBox>, AnnotationError> {
        use base64::Engine;
        let png = encode_png(img)?;
        let body = serde_json::json!({ "image": base64::engine::general_purpose::STANDARD.encode(png) });
        let reply = self.http.post_json(&self.endpoint, &[], &body)?;
        if !reply.ok() {
            return Err(AnnotationError::Endpoint(format!("status {}", reply.status)));
        }
        let raw: Vec<EndpointBox> = serde_json::from_value(reply.body)
            .map_err(|e| AnnotationError::Endpoint(format!("malformed box list: {e}")))?;

        let mut boxes = Vec::new();
        for b in raw {
            if !b.score.is_finite() || b.score < self.min_score {
                continue;
            }
            let region = bbox_to_region(
                [b.x0, b.y0, b.x1 - b.x0, b.y1 - b.y0],
                Some(img.width()),
                Some(img.height()),
            );
            if let Some(region) = region {
                boxes.push(ObjectBox {
                    category: b.category.unwrap_or_else(|| "object".into()).to_lowercase(),
                    region,
                    score: b.score.clamp(0.0, 1.0),
                });
            }
        }
        boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        Ok(boxes)
    }
}
