//! Cache-aware gateway in front of vision-language model providers.
//!
//! Every query is keyed by the full request content; hits are served without
//! provider I/O and misses are persisted to the cache log before the response
//! is returned. Transient provider failures retry with exponential backoff
//! and full jitter.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::HttpError;
use crate::vp::PromptedImage;

mod cache;
mod mock;
mod providers;

pub use cache::{CacheError, CacheRecord, CachedEntry, ResponseCache, CACHE_VERSION};
pub use mock::{
    mock_respond, mock_uniform, parse_presence_question, MockLvlm, MockProfile, DESCRIPTION_PROMPT,
};
pub use providers::{ChatCompletionsProvider, MessagesProvider};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider returned {status}: {message}")]
    Provider { status: u16, message: String, retryable: bool },
    #[error("transport: {0}")]
    Transport(String),
    #[error("unusable provider response: {0}")]
    Malformed(String),
    #[error("no provider registered for model ref {0:?}")]
    UnknownModel(String),
    #[error("API key environment variable {env} is not set")]
    MissingApiKey { env: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl From<HttpError> for GatewayError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Transport(msg) => GatewayError::Transport(msg),
            HttpError::Body(msg) => GatewayError::Malformed(msg),
        }
    }
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::Provider { retryable, .. } => *retryable,
            GatewayError::Transport(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Greedy decoding; the experiment protocol never samples.
    pub greedy: bool,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { greedy: true, max_tokens: 512 }
    }
}

#[derive(Debug, Clone)]
pub struct LvlmRequest {
    pub model_ref: String,
    pub image: PromptedImage,
    pub text: String,
    pub decode: DecodeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LvlmResponse {
    pub text: String,
    pub latency_ms: f64,
    pub token_count: u32,
    pub from_cache: bool,
}

/// Cache key: SHA-256 over a canonical length-prefixed serialization of
/// (model ref, raster dimensions and bytes, prompt id, question text, decode
/// parameters). Any change to any field changes the key.
pub fn cache_key(req: &LvlmRequest) -> [u8; 32] {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(req.model_ref.as_bytes());
    field(&req.image.raster.width().to_le_bytes());
    field(&req.image.raster.height().to_le_bytes());
    field(req.image.raster.as_bytes());
    field(req.image.prompt_id.as_bytes());
    field(req.text.as_bytes());
    field(&[req.decode.greedy as u8]);
    field(&req.decode.max_tokens.to_le_bytes());
    hasher.finalize().into()
}

pub trait LvlmProvider: Send + Sync {
    fn complete(&self, req: &LvlmRequest) -> Result<ProviderReply, GatewayError>;
}

#[derive(Debug)]
pub struct ProviderReply {
    pub text: String,
    pub token_count: u32,
}

/// Retry schedule for transient provider failures: `retries` extra attempts
/// with exponential backoff (base, 2*base, 4*base, ...) and full jitter.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { retries: 3, base: Duration::from_secs(1) }
    }
}

/// Aggregate latency accounting, split by cache outcome.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LatencyStats {
    pub uncached_calls: u64,
    pub uncached_total_ms: f64,
    pub cached_hits: u64,
}

impl LatencyStats {
    pub fn mean_uncached_ms(&self) -> f64 {
        if self.uncached_calls == 0 {
            0.0
        } else {
            self.uncached_total_ms / self.uncached_calls as f64
        }
    }
}

pub struct Gateway {
    providers: BTreeMap<String, Arc<dyn LvlmProvider>>,
    cache: ResponseCache,
    retry: RetryPolicy,
    provider_calls: AtomicU64,
    latency: Mutex<LatencyStats>,
}

impl Gateway {
    pub fn new(cache: ResponseCache) -> Self {
        Gateway {
            providers: BTreeMap::new(),
            cache,
            retry: RetryPolicy::default(),
            provider_calls: AtomicU64::new(0),
            latency: Mutex::new(LatencyStats::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Routes requests whose `model_ref` equals `model_ref` to `provider`.
    pub fn register_provider(&mut self, model_ref: impl Into<String>, provider: Arc<dyn LvlmProvider>) {
        self.providers.insert(model_ref.into(), provider);
    }

    /// Number of provider attempts made (cache hits never count).
    pub fn provider_calls(&self) -> u64 {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn latency_stats(&self) -> LatencyStats {
        *self.latency.lock().unwrap()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Answers the request from cache when possible; otherwise calls the
    /// provider (with retries), persists the exchange, then returns it.
    pub fn query(&self, req: &LvlmRequest) -> Result<LvlmResponse, GatewayError> {
        let key = cache_key(req);
        if let Some(hit) = self.cache.get(&key) {
            self.latency.lock().unwrap().cached_hits += 1;
            return Ok(LvlmResponse {
                text: hit.response_text,
                latency_ms: hit.latency_ms,
                token_count: hit.token_count,
                from_cache: true,
            });
        }

        let provider = self
            .providers
            .get(&req.model_ref)
            .ok_or_else(|| GatewayError::UnknownModel(req.model_ref.clone()))?;

        let start = Instant::now();
        let mut attempt = 0u32;
        let reply = loop {
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match provider.complete(req) {
                Ok(reply) => break reply,
                Err(err) if err.retryable() && attempt < self.retry.retries => {
                    let ceiling = self.retry.base.as_secs_f64() * 2f64.powi(attempt as i32);
                    let jittered = rand::rng().random_range(0.0..=ceiling);
                    std::thread::sleep(Duration::from_secs_f64(jittered));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;

        self.cache.put(
            key,
            CacheRecord {
                key: hex::encode(key),
                model_ref: req.model_ref.clone(),
                image_digest: hex::encode(req.image.source_digest),
                prompt_id: req.image.prompt_id.clone(),
                text: req.text.clone(),
                greedy: req.decode.greedy,
                max_tokens: req.decode.max_tokens,
                response_text: reply.text.clone(),
                latency_ms,
                token_count: reply.token_count,
            },
        )?;
        {
            let mut stats = self.latency.lock().unwrap();
            stats.uncached_calls += 1;
            stats.uncached_total_ms += latency_ms;
        }
        Ok(LvlmResponse { text: reply.text, latency_ms, token_count: reply.token_count, from_cache: false })
    }

    /// Answers a batch in request order with at most `max_in_flight`
    /// concurrent uncached calls. Failures are reported per item.
    pub fn batch_collect(
        &self,
        requests: &[LvlmRequest],
        max_in_flight: usize,
    ) -> Result<Vec<Result<LvlmResponse, GatewayError>>, GatewayError> {
        if max_in_flight == 0 {
            return Err(GatewayError::InvalidRequest("max_in_flight must be at least 1".into()));
        }
        let workers = max_in_flight.min(requests.len().max(1));
        let next = AtomicU64::new(0);
        let results: Vec<Mutex<Option<Result<LvlmResponse, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst) as usize;
                    if i >= requests.len() {
                        break;
                    }
                    let out = self.query(&requests[i]);
                    *results[i].lock().unwrap() = Some(out);
                });
            }
        });

        Ok(results
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("every slot is filled"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Color, ImageRaster};
    use std::collections::BTreeSet;
    use std::sync::atomic::AtomicUsize;

    fn prompted(tag: u8) -> PromptedImage {
        let raster = ImageRaster::new(6, 6, Color::new(tag, tag, tag)).unwrap();
        PromptedImage { source_digest: raster.digest(), prompt_id: "none".into(), raster, degenerate: false }
    }

    fn request(tag: u8, text: &str) -> LvlmRequest {
        LvlmRequest {
            model_ref: "mock:test".into(),
            image: prompted(tag),
            text: text.into(),
            decode: DecodeParams::default(),
        }
    }

    fn mock_gateway() -> Gateway {
        let mock = MockLvlm::new(MockProfile { default_accuracy: 1.0, ..Default::default() });
        mock.register_image(prompted(1).source_digest, BTreeSet::from(["dog".to_string()]));
        let mut gw = Gateway::new(ResponseCache::in_memory());
        gw.register_provider("mock:test", Arc::new(mock));
        gw
    }

    #[test]
    fn cache_key_changes_with_every_field() {
        let base = request(1, "Is there a dog in the image?");
        let k = cache_key(&base);
        assert_eq!(k, cache_key(&base.clone()));

        let mut other = base.clone();
        other.model_ref = "mock:other".into();
        assert_ne!(k, cache_key(&other));

        let mut other = base.clone();
        other.text = "Is there a cat in the image?".into();
        assert_ne!(k, cache_key(&other));

        let mut other = base.clone();
        other.image.prompt_id = "blur".into();
        assert_ne!(k, cache_key(&other));

        let mut other = base.clone();
        other.decode.max_tokens = 64;
        assert_ne!(k, cache_key(&other));

        let mut other = base.clone();
        other.decode.greedy = false;
        assert_ne!(k, cache_key(&other));

        let other = request(2, "Is there a dog in the image?");
        assert_ne!(k, cache_key(&other));
    }

    #[test]
    fn query_hits_cache_on_repeat() {
        let gw = mock_gateway();
        let req = request(1, "Is there a dog in the image?");
        let first = gw.query(&req).unwrap();
        assert_eq!(first.text, "Yes");
        assert!(!first.from_cache);
        assert_eq!(gw.provider_calls(), 1);

        let second = gw.query(&req).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.text, "Yes");
        assert_eq!(gw.provider_calls(), 1);
        let stats = gw.latency_stats();
        assert_eq!((stats.uncached_calls, stats.cached_hits), (1, 1));
    }

    #[test]
    fn persisted_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        let req = request(1, "Is there a dog in the image?");
        {
            let mock = MockLvlm::new(MockProfile { default_accuracy: 1.0, ..Default::default() });
            mock.register_image(req.image.source_digest, BTreeSet::from(["dog".to_string()]));
            let mut gw = Gateway::new(ResponseCache::open(&path).unwrap());
            gw.register_provider("mock:test", Arc::new(mock));
            gw.query(&req).unwrap();
        }
        // Fresh gateway with no provider registered: only the cache can answer.
        let gw = Gateway::new(ResponseCache::open(&path).unwrap());
        let hit = gw.query(&req).unwrap();
        assert!(hit.from_cache);
        assert_eq!(hit.text, "Yes");
        assert_eq!(gw.provider_calls(), 0);
    }

    #[test]
    fn unknown_model_ref_errors() {
        let gw = Gateway::new(ResponseCache::in_memory());
        let err = gw.query(&request(1, "Is there a dog in the image?")).unwrap_err();
        assert!(matches!(err, GatewayError::UnknownModel(_)));
    }

    struct FlakyProvider {
        failures: AtomicUsize,
        status: u16,
    }

    impl LvlmProvider for FlakyProvider {
        fn complete(&self, _req: &LvlmRequest) -> Result<ProviderReply, GatewayError> {
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                Err(GatewayError::Provider { status: self.status, message: "busy".into(), retryable: self.status == 429 || self.status >= 500 })
            } else {
                Ok(ProviderReply { text: "Yes".into(), token_count: 1 })
            }
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { retries: 3, base: Duration::from_millis(1) }
    }

    #[test]
    fn transient_failures_retry_until_success() {
        let mut gw = Gateway::new(ResponseCache::in_memory()).with_retry(fast_retry());
        gw.register_provider("mock:test", Arc::new(FlakyProvider { failures: AtomicUsize::new(2), status: 429 }));
        let out = gw.query(&request(1, "Is there a dog in the image?")).unwrap();
        assert_eq!(out.text, "Yes");
        assert_eq!(gw.provider_calls(), 3);
    }

    #[test]
    fn retries_exhaust_into_error() {
        let mut gw = Gateway::new(ResponseCache::in_memory()).with_retry(fast_retry());
        gw.register_provider("mock:test", Arc::new(FlakyProvider { failures: AtomicUsize::new(99), status: 503 }));
        let err = gw.query(&request(1, "Is there a dog in the image?")).unwrap_err();
        assert!(matches!(err, GatewayError::Provider { status: 503, .. }));
        assert_eq!(gw.provider_calls(), 4);
    }

    #[test]
    fn client_errors_do_not_retry() {
        let mut gw = Gateway::new(ResponseCache::in_memory()).with_retry(fast_retry());
        gw.register_provider("mock:test", Arc::new(FlakyProvider { failures: AtomicUsize::new(99), status: 400 }));
        let err = gw.query(&request(1, "Is there a dog in the image?")).unwrap_err();
        assert!(matches!(err, GatewayError::Provider { status: 400, .. }));
        assert_eq!(gw.provider_calls(), 1);
    }

    #[test]
    fn batch_preserves_order_and_reports_item_errors() {
        let mock = MockLvlm::new(MockProfile { default_accuracy: 1.0, ..Default::default() });
        mock.register_image(prompted(1).source_digest, BTreeSet::from(["dog".to_string()]));
        let mut gw = Gateway::new(ResponseCache::in_memory());
        gw.register_provider("mock:test", Arc::new(mock));

        let mut requests: Vec<LvlmRequest> = (0..6)
            .map(|i| request(1, &format!("Is there a thing{i} in the image?")))
            .collect();
        requests[3].model_ref = "mock:missing".into();
        let results = gw.batch_collect(&requests, 2).unwrap();
        assert_eq!(results.len(), 6);
        for (i, res) in results.iter().enumerate() {
            if i == 3 {
                assert!(matches!(res, Err(GatewayError::UnknownModel(_))));
            } else {
                let out = res.as_ref().unwrap();
                assert_eq!(out.text, "No");
            }
        }
        assert!(gw.batch_collect(&requests, 0).is_err());
    }

    struct SlowProvider {
        current: AtomicUsize,
        high_water: AtomicUsize,
    }

    impl LvlmProvider for SlowProvider {
        fn complete(&self, _req: &LvlmRequest) -> Result<ProviderReply, GatewayError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.high_water.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(ProviderReply { text: "Yes".into(), token_count: 1 })
        }
    }

    #[test]
    fn batch_caps_in_flight_calls() {
        let provider = Arc::new(SlowProvider { current: AtomicUsize::new(0), high_water: AtomicUsize::new(0) });
        let mut gw = Gateway::new(ResponseCache::in_memory());
        gw.register_provider("mock:test", provider.clone());
        let requests: Vec<LvlmRequest> = (0..10)
            .map(|i| request(1, &format!("Is there a thing{i} in the image?")))
            .collect();
        gw.batch_collect(&requests, 3).unwrap();
        assert!(provider.high_water.load(Ordering::SeqCst) <= 3);
    }
}
