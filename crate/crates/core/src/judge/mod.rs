//! Backend-agnostic judge invocation: caching, retries with backoff, and the
//! built-in offline judges.

pub mod cache;
pub mod http;
pub mod mock;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_canonical_json};
use crate::error::{Error, Result};
use crate::prompting::{PromptText, ResponseError, Stage};

pub use cache::ResponseCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Oracle,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "http" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            "oracle" => Ok(BackendKind::Oracle),
            other => Err(Error::config(format!("unknown backend {other:?} (expected http, mock or oracle)"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
            BackendKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    pub temperature: f64,
    pub endpoint_url: Option<String>,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub timeout_s: f64,
    /// First retry waits up to this many seconds; each later retry doubles it.
    pub backoff_base_s: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            model_id: "mock".into(),
            temperature: 0.1,
            endpoint_url: None,
            max_retries: 3,
            max_in_flight: 4,
            timeout_s: 120.0,
            backoff_base_s: 1.0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be >= 1"));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::config("timeout_s must be positive"));
        }
        if !(self.backoff_base_s >= 0.0 && self.backoff_base_s.is_finite()) {
            return Err(Error::config("backoff_base_s must be a non-negative number"));
        }
        if self.kind == BackendKind::Http && self.endpoint_url.as_deref().unwrap_or("").is_empty() {
            return Err(Error::config("http backend requires endpoint_url"));
        }
        Ok(())
    }

    /// Upper bound of the jittered delay before retry `retry` (0-based).
    /// The lower bound is always zero.
    pub fn backoff_window(&self, retry: u32) -> (Duration, Duration) {
        let max = self.backoff_base_s * 2f64.powi(retry.min(30) as i32);
        (Duration::ZERO, Duration::from_secs_f64(max))
    }
}

#[derive(Debug, Clone)]
pub struct JudgeRequest {
    pub prompt: PromptText,
    pub image: Option<Arc<Vec<u8>>>,
    pub image_digest: Option<String>,
    pub model_id: String,
    pub temperature: f64,
}

impl JudgeRequest {
    /// Multimodal request carrying the montage PNG.
    pub fn stage_one(prompt: PromptText, png: Vec<u8>, config: &BackendConfig) -> Result<Self> {
        if prompt.stage != Stage::One {
            return Err(Error::validation("stage-one request needs a stage-one prompt"));
        }
        Ok(JudgeRequest {
            image_digest: Some(sha256_hex(&png)),
            image: Some(Arc::new(png)),
            prompt,
            model_id: config.model_id.clone(),
            temperature: config.temperature,
        })
    }

    pub fn stage_two(prompt: PromptText, config: &BackendConfig) -> Result<Self> {
        if prompt.stage != Stage::Two {
            return Err(Error::validation("stage-two request needs a stage-two prompt"));
        }
        Ok(JudgeRequest {
            prompt,
            image: None,
            image_digest: None,
            model_id: config.model_id.clone(),
            temperature: config.temperature,
        })
    }
}

/// SHA-256 (hex) of the canonical encoding of model, temperature, prompt text
/// and image digest.
pub fn cache_key(request: &JudgeRequest) -> String {
    let encoded = to_canonical_json(&(
        "lrmr-judge-v1",
        &request.model_id,
        request.temperature,
        &request.prompt.text,
        request.image_digest.as_deref().unwrap_or(""),
    ))
    .expect("tuple serializes");
    sha256_hex(encoded.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub cache_hit: bool,
    pub attempts: u32,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("judge failed after {attempts} attempt(s): {last_cause}")]
pub struct JudgeFailure {
    pub attempts: u32,
    pub last_cause: String,
}

/// Anything that turns a request into raw judge text.
pub trait JudgeBackend: Send + Sync {
    fn complete(&self, request: &JudgeRequest) -> std::result::Result<String, TransportError>;
}

#[derive(Debug, Default)]
pub struct JudgeStats {
    pub backend_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub failures: u64,
}

/// A backend bound to a configuration and an optional on-disk cache.
pub struct JudgeClient {
    backend: Arc<dyn JudgeBackend>,
    config: BackendConfig,
    cache: Option<ResponseCache>,
    stats: JudgeStats,
}

impl JudgeClient {
    pub fn new(backend: Arc<dyn JudgeBackend>, config: BackendConfig, cache: Option<ResponseCache>) -> Result<Self> {
        config.validate()?;
        Ok(JudgeClient {
            backend,
            config,
            cache,
            stats: JudgeStats::default(),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            backend_calls: self.stats.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.stats.cache_hits.load(Ordering::Relaxed),
            failures: self.stats.failures.load(Ordering::Relaxed),
        }
    }

    /// Consults the cache, then calls the backend, retrying transport errors
    /// and replies rejected by `validate`. Only validated text is cached.
    pub fn invoke<T>(
        &self,
        request: &JudgeRequest,
        validate: impl Fn(&str) -> std::result::Result<T, ResponseError>,
    ) -> std::result::Result<(T, JudgeResponse), JudgeFailure> {
        let started = Instant::now();
        let key = cache_key(request);
        if let Some(cache) = &self.cache {
            if let Some(raw) = cache.get(&key) {
                match validate(&raw) {
                    Ok(value) => {
                        self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                        let response = JudgeResponse {
                            raw_text: raw,
                            cache_hit: true,
                            attempts: 0,
                            latency_s: started.elapsed().as_secs_f64(),
                        };
                        return Ok((value, response));
                    }
                    Err(e) => log::warn!("ignoring cached reply {key} that no longer validates: {e}"),
                }
            }
        }

        let mut last_cause = String::new();
        let mut attempts = 0;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let (_, max) = self.config.backoff_window(attempt - 1);
                let delay = if max.is_zero() {
                    Duration::ZERO
                } else {
                    Duration::from_secs_f64(rand::rng().random_range(0.0..=max.as_secs_f64()))
                };
                std::thread::sleep(delay);
            }
            attempts += 1;
            self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
            let raw = match self.backend.complete(request) {
                Ok(raw) => raw,
                Err(e) => {
                    log::debug!("attempt {attempts} failed: {e}");
                    last_cause = e.to_string();
                    continue;
                }
            };
            match validate(&raw) {
                Ok(value) => {
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(&key, request, &raw) {
                            log::warn!("could not write cache entry {key}: {e}");
                        }
                    }
                    let response = JudgeResponse {
                        raw_text: raw,
                        cache_hit: false,
                        attempts,
                        latency_s: started.elapsed().as_secs_f64(),
                    };
                    return Ok((value, response));
                }
                Err(e) => {
                    log::debug!("attempt {attempts} rejected: {e}");
                    last_cause = e.to_string();
                }
            }
        }
        self.stats.failures.fetch_add(1, Ordering::Relaxed);
        Err(JudgeFailure { attempts, last_cause })
    }
}

/// Builds the backend named by `config.kind`.
pub fn make_backend(config: &BackendConfig, options: &mock::MockOptions) -> Result<Arc<dyn JudgeBackend>> {
    Ok(match config.kind {
        BackendKind::Http => Arc::new(http::HttpBackend::new(config)?),
        BackendKind::Mock => Arc::new(mock::MockJudge::new(options.clone())),
        BackendKind::Oracle => Arc::new(mock::OracleJudge::new(options.clone())),
    })
}

/// Runs `f` over `items` on at most `workers` threads and returns results in
/// input order. `f` receives the item index.
pub fn map_bounded<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::build_stage1_prompt;
    use crate::report::ReportMode;
    use std::sync::atomic::AtomicU32;

    struct Scripted {
        replies: Mutex<Vec<std::result::Result<String, TransportError>>>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(mut replies: Vec<std::result::Result<String, TransportError>>) -> Arc<Self> {
            replies.reverse();
            Arc::new(Scripted {
                replies: Mutex::new(replies),
                calls: AtomicU32::new(0),
            })
        }
    }

    impl JudgeBackend for Scripted {
        fn complete(&self, _: &JudgeRequest) -> std::result::Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err(TransportError("script exhausted".into())))
        }
    }

    fn fast_config() -> BackendConfig {
        BackendConfig {
            backoff_base_s: 0.0,
            ..Default::default()
        }
    }

    fn request(cfg: &BackendConfig) -> JudgeRequest {
        let p = build_stage1_prompt(3, ReportMode::Structured).unwrap();
        JudgeRequest::stage_one(p, vec![1, 2, 3], cfg).unwrap()
    }

    fn accept_json(raw: &str) -> std::result::Result<String, ResponseError> {
        crate::prompting::extract_json_payload(raw)
    }

    #[test]
    fn cache_key_examples() {
        let cfg = fast_config();
        let r = request(&cfg);
        assert_eq!(cache_key(&r), cache_key(&r.clone()));
        assert_eq!(cache_key(&r).len(), 64);

        let mut warmer = r.clone();
        warmer.temperature = 0.2;
        assert_ne!(cache_key(&r), cache_key(&warmer));

        let mut no_image = r.clone();
        no_image.image_digest = None;
        assert_ne!(cache_key(&r), cache_key(&no_image));

        let mut other_model = r.clone();
        other_model.model_id = "m2".into();
        assert_ne!(cache_key(&r), cache_key(&other_model));
    }

    #[test]
    fn stage_invariants_on_requests() {
        let cfg = fast_config();
        let p1 = build_stage1_prompt(2, ReportMode::Structured).unwrap();
        assert!(JudgeRequest::stage_two(p1.clone(), &cfg).is_err());
        let r = JudgeRequest::stage_one(p1, vec![0], &cfg).unwrap();
        assert!(r.image_digest.is_some());
    }

    #[test]
    fn retries_then_succeeds() {
        let backend = Scripted::new(vec![
            Err(TransportError("boom".into())),
            Ok("garbage".into()),
            Ok("{\"ok\":1}".into()),
        ]);
        let client = JudgeClient::new(backend.clone(), fast_config(), None).unwrap();
        let (v, resp) = client.invoke(&request(client.config()), accept_json).unwrap();
        assert_eq!(v, "{\"ok\":1}");
        assert_eq!(resp.attempts, 3);
        assert!(!resp.cache_hit);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_retries() {
        let backend = Scripted::new(vec![]);
        let cfg = BackendConfig {
            max_retries: 2,
            ..fast_config()
        };
        let client = JudgeClient::new(backend.clone(), cfg, None).unwrap();
        let err = client.invoke(&request(client.config()), accept_json).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert!(err.last_cause.contains("script exhausted"));
        assert_eq!(client.stats().failures, 1);
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Scripted::new(vec![Ok("{\"a\":1}".into())]);
        let cache = ResponseCache::new(dir.path()).unwrap();
        let client = JudgeClient::new(backend.clone(), fast_config(), Some(cache)).unwrap();
        let req = request(client.config());
        let (_, first) = client.invoke(&req, accept_json).unwrap();
        let (_, second) = client.invoke(&req, accept_json).unwrap();
        assert!(!first.cache_hit && second.cache_hit);
        assert_eq!(second.attempts, 0);
        assert_eq!(second.raw_text, first.raw_text);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(client.stats(), StatsSnapshot { backend_calls: 1, cache_hits: 1, failures: 0 });
    }

    #[test]
    fn backoff_windows_grow() {
        let cfg = BackendConfig::default();
        let mut prev = cfg.backoff_window(0);
        assert_eq!(prev.1, Duration::from_secs(1));
        for k in 1..10 {
            let w = cfg.backoff_window(k);
            assert!(w.0 >= prev.0 && w.1 >= prev.1);
            assert_eq!(w.1, prev.1 * 2);
            prev = w;
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        assert!(BackendConfig { temperature: 2.5, ..Default::default() }.validate().is_err());
        assert!(BackendConfig { max_in_flight: 0, ..Default::default() }.validate().is_err());
        assert!(BackendConfig { kind: BackendKind::Http, ..Default::default() }.validate().is_err());
        assert_eq!("ORACLE".parse::<BackendKind>().unwrap(), BackendKind::Oracle);
        assert!("gpt".parse::<BackendKind>().is_err());
    }

    #[test]
    fn map_bounded_preserves_order() {
        let items: Vec<u32> = (0..500).collect();
        let out = map_bounded(&items, 8, |i, x| (i as u32) * 2 + x);
        assert_eq!(out, (0..500).map(|x| x * 3).collect::<Vec<_>>());
        assert!(map_bounded(&Vec::<u8>::new(), 4, |_, x| *x).is_empty());
    }
}
