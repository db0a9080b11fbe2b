//! Feature extraction for the router.
//!
//! The router sees only the unprompted image. The built-in provider resizes
//! to 336x336, then concatenates a 32x32 grayscale thumbnail (1024 values in
//! [0,1]) with three 16-bin L1-normalized channel histograms (48 values), for
//! 1072 dimensions total. A remote embedding endpoint can replace it.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::RouterError;
use crate::http::HttpJson;
use crate::raster::{encode_png, resize_bilinear, ImageRaster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub trait FeatureProvider: Send + Sync {
    /// Stable identifier recorded in trained models; a model refuses features
    /// from a different provider.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageRaster) -> Result<FeatureVector, RouterError>;
}

pub const BUILTIN_FEATURE_ID: &str = "gray32+hist16/1";
pub const BUILTIN_FEATURE_DIM: usize = 32 * 32 + 3 * 16;
const CANVAS: u32 = 336;

pub struct BuiltinFeatures;

impl FeatureProvider for BuiltinFeatures {
    fn id(&self) -> &str {
        BUILTIN_FEATURE_ID
    }

    fn dim(&self) -> usize {
        BUILTIN_FEATURE_DIM
    }

    fn extract(&self, img: &ImageRaster) -> Result<FeatureVector, RouterError> {
        let canvas = resize_bilinear(img, CANVAS, CANVAS)?;
        let thumb = resize_bilinear(&canvas, 32, 32)?;

        let mut values = Vec::with_capacity(BUILTIN_FEATURE_DIM);
        for y in 0..32 {
            for x in 0..32 {
                let p = thumb.get(x, y);
                let luma = 0.299 * p.r as f64 + 0.587 * p.g as f64 + 0.114 * p.b as f64;
                values.push((luma / 255.0) as f32);
            }
        }

        let mut hist = [[0u32; 16]; 3];
        for chunk in canvas.as_bytes().chunks_exact(3) {
            for c in 0..3 {
                hist[c][(chunk[c] >> 4) as usize] += 1;
            }
        }
        let total = (CANVAS * CANVAS) as f32;
        for channel in &hist {
            for &count in channel {
                values.push(count as f32 / total);
            }
        }
        Ok(FeatureVector { values })
    }
}

#[derive(Deserialize)]
struct EndpointReply {
    dim: usize,
    values: Vec<f32>,
}

/// Remote embedding provider: POSTs PNG bytes, expects `{dim, values}`.
/// Responses are cached by image digest for the life of the provider.
pub struct EndpointFeatures {
    endpoint: String,
    id: String,
    dim: usize,
    http: Arc<dyn HttpJson>,
    cache: RwLock<HashMap<String, FeatureVector>>,
}

impl EndpointFeatures {
    pub fn new(endpoint: impl Into<String>, dim: usize, http: Arc<dyn HttpJson>) -> Self {
        let endpoint = endpoint.into();
        EndpointFeatures {
            id: format!("endpoint:{endpoint}:{dim}"),
            endpoint,
            dim,
            http,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl FeatureProvider for EndpointFeatures {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &ImageRaster) -> Result<FeatureVector, RouterError> {
        let digest = img.digest_hex();
        if let Some(hit) = self.cache.read().unwrap().get(&digest) {
            return Ok(hit.clone());
        }
        let png = encode_png(img)?;
        let reply = self.http.post_bytes(&self.endpoint, &[], "image/png", &png)?;
        if !reply.ok() {
            return Err(RouterError::Endpoint(format!("status {}", reply.status)));
        }
        let parsed: EndpointReply = serde_json::from_value(reply.body)
            .map_err(|e| RouterError::Endpoint(format!("malformed embedding reply: {e}")))?;
        if parsed.values.len() != parsed.dim || parsed.dim != self.dim {
            return Err(RouterError::DimMismatch { got: parsed.values.len(), expected: self.dim });
        }
        let features = FeatureVector { values: parsed.values };
        self.cache.write().unwrap().insert(digest, features.clone());
        Ok(features)
    }
}
