//! The prompt router: a one-hidden-layer MLP over frozen image features.
//!
//! Given features of the unprompted image it scores every pool prompt at
//! once; the highest score wins. Weights are stored as f32 for a stable
//! on-disk format, but all arithmetic (forward, loss, gradients, optimizer)
//! runs in f64, which keeps analytic gradients within finite-difference
//! checking tolerance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::HttpError;
use crate::raster::RasterError;

mod features;

pub use features::{
    BuiltinFeatures, EndpointFeatures, FeatureProvider, FeatureVector, BUILTIN_FEATURE_DIM,
    BUILTIN_FEATURE_ID,
};

pub const MODEL_VERSION: &str = "vprouter/1";

#[derive(Debug, thiserror::Error)]
pub enum RouterError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("feature dimension {got} does not match expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("label {0:?} is not in the prompt order")]
    UnknownLabel(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("prompt order mismatch: model {model:?} vs pool {pool:?}")]
    PromptOrderMismatch { model: Vec<String>, pool: Vec<String> },
    #[error("feature endpoint: {0}")]
    Endpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub epochs: u32,
    pub learning_rate: f64,
}

/// Dense MLP: scores = W2 * relu(W1 * x + b1) + b2. Matrices are row-major:
/// `w1` is hidden x input, `w2` is prompts x hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Output order; index i scores prompt_order[i]. Frozen at training time.
    pub prompt_order: Vec<String>,
    /// Feature provider the model was trained with.
    pub provider_id: String,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub metadata: TrainMetadata,
}

impl RouterModel {
    pub fn n_prompts(&self) -> usize {
        self.prompt_order.len()
    }

    fn validate_shapes(&self) -> Result<(), RouterError> {
        let (d, h, n) = (self.input_dim, self.hidden_dim, self.n_prompts());
        if d == 0 || h == 0 || n == 0 {
            return Err(RouterError::Format("zero dimension".into()));
        }
        if self.w1.len() != h * d || self.b1.len() != h || self.w2.len() != n * h || self.b2.len() != n {
            return Err(RouterError::Format("weight blob sizes do not match header dims".into()));
        }
        Ok(())
    }

    /// Fails unless the pool ids match the training-time order exactly.
    pub fn verify_prompt_order(&self, pool_ids: &[String]) -> Result<(), RouterError> {
        if self.prompt_order == pool_ids {
            Ok(())
        } else {
            Err(RouterError::PromptOrderMismatch { model: self.prompt_order.clone(), pool: pool_ids.to_vec() })
        }
    }
}

/// Numerically safe softmax: exponentials are taken after subtracting the
/// maximum, so uniform shifts of the input change nothing.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of the softmax distribution against `target`, computed in
/// fused log-sum-exp form (never materializing probabilities).
pub fn cross_entropy(scores: &[f64], target: usize) -> f64 {
    assert!(target < scores.len(), "target {target} out of range for {} scores", scores.len());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - (scores[target] - max)
}

fn check_dim(model: &RouterModel, features: &FeatureVector) -> Result<(), RouterError> {
    if features.dim() != model.input_dim {
        return Err(RouterError::DimMismatch { got: features.dim(), expected: model.input_dim });
    }
    model.validate_shapes()
}

fn forward_parts(model: &RouterModel, x: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let (d, h, n) = (model.input_dim, model.hidden_dim, model.n_prompts());
    let mut hidden = vec![0f64; h];
    for i in 0..h {
        let row = &model.w1[i * d..(i + 1) * d];
        let mut acc = model.b1[i] as f64;
        for (w, v) in row.iter().zip(x) {
            acc += *w as f64 * *v as f64;
        }
        hidden[i] = acc.max(0.0);
    }
    let mut scores = vec![0f64; n];
    for k in 0..n {
        let row = &model.w2[k * h..(k + 1) * h];
        let mut acc = model.b2[k] as f64;
        for (w, a) in row.iter().zip(&hidden) {
            acc += *w as f64 * *a;
        }
        scores[k] = acc;
    }
    (hidden, scores)
}

/// Raw prompt scores for one image.
pub fn forward(model: &RouterModel, features: &FeatureVector) -> Result<Vec<f64>, RouterError> {
    check_dim(model, features)?;
    Ok(forward_parts(model, &features.values).1)
}

/// The prompt with the highest score; ties resolve to the lowest index.
pub fn predict<'m>(model: &'m RouterModel, features: &FeatureVector) -> Result<&'m str, RouterError> {
    let scores = forward(model, features)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(&model.prompt_order[best])
}

/// Analytic gradients of the cross-entropy loss, in f64, same layouts as the
/// model's weight vectors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Loss and its gradient for a single (features, target prompt) pair.
pub fn loss_and_gradient(
    model: &RouterModel,
    features: &FeatureVector,
    target: usize,
) -> Result<(f64, Gradients), RouterError> {
    check_dim(model, features)?;
    if target >= model.n_prompts() {
        return Err(RouterError::UnknownLabel(format!("target index {target}")));
    }
    let (d, h, n) = (model.input_dim, model.hidden_dim, model.n_prompts());
    let x = &features.values;
    let (hidden, scores) = forward_parts(model, x);
    let loss = cross_entropy(&scores, target);

    // dL/dscores = softmax(scores) - onehot(target)
    let mut dscores = softmax(&scores);
    dscores[target] -= 1.0;

    let mut grads = Gradients {
        w1: vec![0.0; h * d],
        b1: vec![0.0; h],
        w2: vec![0.0; n * h],
        b2: dscores.clone(),
    };
    let mut dhidden = vec![0f64; h];
    for k in 0..n {
        let ds = dscores[k];
        for j in 0..h {
            grads.w2[k * h + j] = ds * hidden[j];
            dhidden[j] += model.w2[k * h + j] as f64 * ds;
        }
    }
    for i in 0..h {
        if hidden[i] > 0.0 {
            let dz = dhidden[i];
            grads.b1[i] = dz;
            let row = &mut grads.w1[i * d..(i + 1) * d];
            for (g, v) in row.iter_mut().zip(x) {
                *g = dz * *v as f64;
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of images held out by id hash for validation accuracy.
    pub validation_fraction: f64,
    pub hidden_dim: usize,
    /// Stop after this many epochs without validation improvement; None (the
    /// default) trains for the full epoch budget.
    pub early_stop_patience: Option<u32>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.01,
            seed,
            validation_fraction: 0.1,
            hidden_dim: 512,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image_id: String,
    pub features: FeatureVector,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

pub type TrainingLog = Vec<EpochStats>;

/// Deterministic id-hash split: an image lands in the validation set when
/// the uniform hash of its id falls below `fraction`. Stable across runs and
/// corpus orderings.
pub fn in_validation_split(image_id: &str, fraction: f64) -> bool {
    let h: [u8; 32] = Sha256::digest(image_id.as_bytes()).into();
    let x = u64::from_be_bytes(h[..8].try_into().unwrap());
    (x as f64 / 2f64.powi(64)) < fraction
}

fn derived_rng(tag: &str, seed: u64, extra: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(extra.to_le_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam step over a parameter vector.
fn adamw_step(w: &mut [f64], g: &[f64], state: &mut AdamState, t: u32, lr: f64, decay: f64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..w.len() {
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g[i];
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        w[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + decay * w[i]);
    }
}

/// Trains a router with AdamW and mini-batch cross-entropy.
///
/// Initialization, batch order, and therefore the resulting weights are a
/// pure function of the config seed and the example set. Weight decay
/// applies to weight matrices only, not biases.
pub fn fit(
    examples: &[TrainExample],
    prompt_order: &[String],
    provider_id: &str,
    cfg: &TrainConfig,
) -> Result<(RouterModel, TrainingLog), RouterError> {
    if examples.is_empty() {
        return Err(RouterError::InvalidConfig("no training examples".into()));
    }
    if prompt_order.is_empty() {
        return Err(RouterError::InvalidConfig("empty prompt order".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden_dim == 0 {
        return Err(RouterError::InvalidConfig("batch_size and hidden_dim must be positive".into()));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.validation_fraction) || cfg.weight_decay < 0.0 {
        return Err(RouterError::InvalidConfig("bad learning_rate, validation_fraction, or weight_decay".into()));
    }

    let d = examples[0].features.dim();
    let label_index: BTreeMap<&str, usize> =
        prompt_order.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.features.dim() != d {
            return Err(RouterError::DimMismatch { got: ex.features.dim(), expected: d });
        }
        let idx = label_index
            .get(ex.label.as_str())
            .ok_or_else(|| RouterError::UnknownLabel(ex.label.clone()))?;
        targets.push(*idx);
    }

    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for (i, ex) in examples.iter().enumerate() {
        if in_validation_split(&ex.image_id, cfg.validation_fraction) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(RouterError::InvalidConfig("validation split consumed every example".into()));
    }

    let (h, n) = (cfg.hidden_dim, prompt_order.len());
    // Uniform fan-in init; biases start at zero.
    let mut init_rng = derived_rng("init", cfg.seed, 0);
    let bound1 = 1.0 / (d as f64).sqrt();
    let bound2 = 1.0 / (h as f64).sqrt();
    let mut w1: Vec<f64> = (0..h * d).map(|_| init_rng.random_range(-bound1..bound1)).collect();
    let mut b1 = vec![0f64; h];
    let mut w2: Vec<f64> = (0..n * h).map(|_| init_rng.random_range(-bound2..bound2)).collect();
    let mut b2 = vec![0f64; n];

    let mut states = [
        AdamState::new(h * d),
        AdamState::new(h),
        AdamState::new(n * h),
        AdamState::new(n),
    ];
    let mut step = 0u32;
    let mut log = TrainingLog::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0u32;
    let mut epochs_run = 0u32;

    let snapshot = |w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], epochs: u32| RouterModel {
        input_dim: d,
        hidden_dim: h,
        prompt_order: prompt_order.to_vec(),
        provider_id: provider_id.to_string(),
        w1: w1.iter().map(|v| *v as f32).collect(),
        b1: b1.iter().map(|v| *v as f32).collect(),
        w2: w2.iter().map(|v| *v as f32).collect(),
        b2: b2.iter().map(|v| *v as f32).collect(),
        metadata: TrainMetadata { seed: cfg.seed, epochs, learning_rate: cfg.learning_rate },
    };

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut derived_rng("shuffle", cfg.seed, epoch as u64));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // Gradients averaged over the batch; the f32 snapshot below is
            // only a view for loss_and_gradient, updates happen in f64.
            let view = snapshot(&w1, &b1, &w2, &b2, epoch);
            let mut acc_w1 = vec![0f64; h * d];
            let mut acc_b1 = vec![0f64; h];
            let mut acc_w2 = vec![0f64; n * h];
            let mut acc_b2 = vec![0f64; n];
            for &i in batch {
                let (loss, g) = loss_and_gradient(&view, &examples[i].features, targets[i])?;
                epoch_loss += loss;
                for (a, b) in acc_w1.iter_mut().zip(&g.w1) {
                    *a += b;
                }
                for (a, b) in acc_b1.iter_mut().zip(&g.b1) {
                    *a += b;
                }
                for (a, b) in acc_w2.iter_mut().zip(&g.w2) {
                    *a += b;
                }
                for (a, b) in acc_b2.iter_mut().zip(&g.b2) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in [&mut acc_w1, &mut acc_b1, &mut acc_w2, &mut acc_b2] {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            step += 1;
            adamw_step(&mut w1, &acc_w1, &mut states[0], step, cfg.learning_rate, cfg.weight_decay);
            adamw_step(&mut b1, &acc_b1, &mut states[1], step, cfg.learning_rate, 0.0);
            adamw_step(&mut w2, &acc_w2, &mut states[2], step, cfg.learning_rate, cfg.weight_decay);
            adamw_step(&mut b2, &acc_b2, &mut states[3], step, cfg.learning_rate, 0.0);
        }
        epochs_run = epoch + 1;

        let val_accuracy = if val_idx.is_empty() {
            None
        } else {
            let view = snapshot(&w1, &b1, &w2, &b2, epochs_run);
            let correct = val_idx
                .iter()
                .filter(|&&i| {
                    predict(&view, &examples[i].features).map(|p| p == examples[i].label).unwrap_or(false)
                })
                .count();
            Some(correct as f64 / val_idx.len() as f64)
        };
        log.push(EpochStats {
            epoch: epochs_run,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_accuracy,
        });

        if let (Some(patience), Some(acc)) = (cfg.early_stop_patience, val_accuracy) {
            if acc > best_val {
                best_val = acc;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    Ok((snapshot(&w1, &b1, &w2, &b2, epochs_run), log))
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    input_dim: usize,
    hidden_dim: usize,
    prompt_order: Vec<String>,
    provider_id: String,
    seed: u64,
    epochs: u32,
    learning_rate: f64,
}

/// Writes the model: a version line, a JSON header line, then the raw
/// little-endian f32 weight blobs (w1, b1, w2, b2). Loading reproduces the
/// weights bit for bit.
pub fn save_model(model: &RouterModel, path: &Path) -> Result<(), RouterError> {
    model.validate_shapes()?;
    let header = ModelHeader {
        input_dim: model.input_dim,
        hidden_dim: model.hidden_dim,
        prompt_order: model.prompt_order.clone(),
        provider_id: model.provider_id.clone(),
        seed: model.metadata.seed,
        epochs: model.metadata.epochs,
        learning_rate: model.metadata.learning_rate,
    };
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_VERSION.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for blob in [&model.w1, &model.b1, &model.w2, &model.b2] {
        for v in blob.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RouterModel, RouterError> {
    let bytes = std::fs::read(path)?;
    let magic_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RouterError::Format("missing version line".into()))?;
    if &bytes[..magic_end] != MODEL_VERSION.as_bytes() {
        return Err(RouterError::Format(format!(
            "version {:?}, expected {MODEL_VERSION:?}",
            String::from_utf8_lossy(&bytes[..magic_end])
        )));
    }
    let rest = &bytes[magic_end + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RouterError::Format("missing header line".into()))?;
    let header: ModelHeader =
        serde_json::from_slice(&rest[..header_end]).map_err(|e| RouterError::Format(format!("bad header: {e}")))?;
    let blob = &rest[header_end + 1..];

    let (d, h) = (header.input_dim, header.hidden_dim);
    let n = header.prompt_order.len();
    let counts = [h * d, h, n * h, n];
    let expected_bytes: usize = counts.iter().sum::<usize>() * 4;
    if blob.len() != expected_bytes {
        return Err(RouterError::Format(format!(
            "weight blob is {} bytes, expected {expected_bytes}",
            blob.len()
        )));
    }
    let mut offset = 0;
    let mut read_blob = |count: usize| -> Vec<f32> {
        let out = blob[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += count * 4;
        out
    };
    let model = RouterModel {
        input_dim: d,
        hidden_dim: h,
        w1: read_blob(counts[0]),
        b1: read_blob(counts[1]),
        w2: read_blob(counts[2]),
        b2: read_blob(counts[3]),
        prompt_order: header.prompt_order,
        provider_id: header.provider_id,
        metadata: TrainMetadata { seed: header.seed, epochs: header.epochs, learning_rate: header.learning_rate },
    };
    model.validate_shapes()?;
    Ok(model)
}
