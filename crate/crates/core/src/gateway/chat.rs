use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CachedResponse, GatewayError, ModelConfig, ResponseCache};
use crate::digest::canonical_digest;
use crate::prompts::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

pub fn prompt_messages(prompt: &RenderedPrompt) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &prompt.system {
        messages.push(ChatMessage::system(system.clone()));
    }
    messages.push(ChatMessage::user(prompt.user.clone()));
    messages
}

/// Something that turns a conversation into model text. Implemented by the
/// HTTP client and by scripted stubs in tests.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, config: &ModelConfig, messages: &[ChatMessage]) -> Result<String, GatewayError>;
}

/// Observes outbound requests as they start and finish.
pub trait InFlightProbe: Send + Sync {
    fn on_start(&self);
    fn on_finish(&self);
}

/// Probe that records the peak number of concurrent requests.
#[derive(Debug, Default)]
pub struct MaxInFlight {
    current: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl MaxInFlight {
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }
}

impl InFlightProbe for MaxInFlight {
    fn on_start(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
    }
    fn on_finish(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }
}

/// Chat-completions client speaking `POST {model, messages, options}` and
/// reading `{message: {content}}`.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpChatBackend {
    pub fn new(retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::Usage(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client, retry })
    }
}

enum Attempt {
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl HttpChatBackend {
    fn once(&self, config: &ModelConfig, body: &serde_json::Value) -> Result<String, Attempt> {
        let endpoint = &config.endpoint;
        let response = self
            .client
            .post(endpoint)
            .timeout(config.request_timeout())
            .json(body)
            .send()
            .map_err(|e| {
                Attempt::Retry(GatewayError::Transport {
                    endpoint: endpoint.clone(),
                    message: e.to_string(),
                })
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| {
            Attempt::Retry(GatewayError::Transport {
                endpoint: endpoint.clone(),
                message: e.to_string(),
            })
        })?;
        if !status.is_success() {
            let err = GatewayError::Upstream {
                endpoint: endpoint.clone(),
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        parse_chat_body(&text).map_err(|message| {
            Attempt::Fatal(GatewayError::Protocol {
                endpoint: endpoint.clone(),
                message,
            })
        })
    }
}

fn parse_chat_body(text: &str) -> Result<String, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("response is not JSON: {e}"))?;
    value
        .pointer("/message/content")
        .or_else(|| value.pointer("/choices/0/message/content"))
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| "response lacks message.content".to_string())
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, config: &ModelConfig, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let mut options = json!({
            "temperature": config.temperature,
            "top_p": config.top_p,
            "num_predict": config.max_tokens,
        });
        if let Some(seed) = config.seed {
            options["seed"] = json!(seed);
        }
        let body = json!({
            "model": config.model_id,
            "messages": messages,
            "options": options,
            "stream": false,
        });
        let mut attempt = 0;
        loop {
            match self.once(config, &body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let wait = self.retry.delay(attempt);
                    log::warn!("{e}; retrying in {wait:?}");
                    thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }
}

struct Limiter {
    max: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// One unit of work for [`ChatGateway::chat_batch`].
#[derive(Debug, Clone)]
pub struct ChatJob {
    pub config: Arc<ModelConfig>,
    pub messages: Vec<ChatMessage>,
    pub attempt: u32,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model_id: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    seed: Option<i64>,
    attempt: u32,
}

pub fn cache_key(config: &ModelConfig, messages: &[ChatMessage], attempt: u32) -> String {
    canonical_digest(&KeyMaterial {
        model_id: &config.model_id,
        messages,
        temperature: config.temperature,
        top_p: config.top_p,
        max_tokens: config.max_tokens,
        seed: config.seed,
        attempt,
    })
}

/// Cached, concurrency-bounded front end over a [`ChatBackend`].
pub struct ChatGateway {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
    limiter: Limiter,
    probe: Option<Arc<dyn InFlightProbe>>,
    network_calls: AtomicUsize,
}

pub const DEFAULT_CONCURRENCY: usize = 4;

impl ChatGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>, concurrency: usize) -> Self {
        Self {
            backend,
            cache,
            limiter: Limiter {
                max: concurrency.max(1),
                in_use: Mutex::new(0),
                freed: Condvar::new(),
            },
            probe: None,
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_probe(mut self, probe: Arc<dyn InFlightProbe>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.limiter.max
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn chat(&self, prompt: &RenderedPrompt, config: &ModelConfig) -> Result<String, GatewayError> {
        let text = self.complete(config, &prompt_messages(prompt), 0)?;
        self.cache.flush()?;
        Ok(text)
    }

    /// Run a conversation through the cache and, on a miss, the backend.
    pub fn complete(
        &self,
        config: &ModelConfig,
        messages: &[ChatMessage],
        attempt: u32,
    ) -> Result<String, GatewayError> {
        let key = cache_key(config, messages, attempt);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.raw_text);
        }
        config.validate()?;
        let started = Instant::now();
        let result = {
            let _permit = self.limiter.acquire();
            if let Some(p) = &self.probe {
                p.on_start();
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let r = self.backend.complete(config, messages);
            if let Some(p) = &self.probe {
                p.on_finish();
            }
            r
        };
        let text = result?;
        self.cache.put(CachedResponse {
            cache_key: key,
            model_id: config.model_id.clone(),
            raw_text: text.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            created: Utc::now(),
        })?;
        Ok(text)
    }

    /// Run jobs on at most `concurrency` workers; results line up with `jobs`.
    pub fn chat_batch(&self, jobs: &[ChatJob]) -> Vec<Result<String, GatewayError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<String, GatewayError>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.limiter.max.min(jobs.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(i) else { break };
                    let r = self.complete(&job.config, &job.messages, job.attempt);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        if let Err(e) = self.cache.flush() {
            log::warn!("cache flush failed: {e}");
        }
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every job ran"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;
    impl ChatBackend for Echo {
        fn complete(&self, config: &ModelConfig, messages: &[ChatMessage]) -> Result<String, GatewayError> {
            thread::sleep(Duration::from_millis(5));
            Ok(format!("{}:{}", config.model_id, messages.last().unwrap().content))
        }
    }

    #[test]
    fn batch_is_index_aligned_and_bounded() {
        let probe = Arc::new(MaxInFlight::default());
        let gw = ChatGateway::new(Arc::new(Echo), Arc::new(ResponseCache::in_memory()), 3)
            .with_probe(probe.clone());
        let cfg = Arc::new(ModelConfig::new("m", "http://unused"));
        let jobs: Vec<ChatJob> = (0..20)
            .map(|i| ChatJob {
                config: cfg.clone(),
                messages: vec![ChatMessage::user(format!("q{i}"))],
                attempt: 0,
            })
            .collect();
        let out = gw.chat_batch(&jobs);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap(), &format!("m:q{i}"));
        }
        assert!(probe.peak() <= 3 && probe.peak() >= 1);
        assert_eq!(probe.total(), 20);
        // Warm cache: nothing goes out.
        let again = gw.chat_batch(&jobs);
        assert_eq!(gw.network_calls(), 20);
        assert_eq!(again.len(), 20);
    }

    #[test]
    fn attempt_index_changes_key() {
        let cfg = ModelConfig::new("m", "x");
        let msgs = [ChatMessage::user("hi")];
        assert_ne!(cache_key(&cfg, &msgs, 0), cache_key(&cfg, &msgs, 1));
        let mut other = cfg.clone();
        other.temperature = 0.0;
        assert_ne!(cache_key(&cfg, &msgs, 0), cache_key(&other, &msgs, 0));
        assert_eq!(cache_key(&cfg, &msgs, 0), cache_key(&cfg.clone(), &msgs, 0));
    }

    #[test]
    fn parses_both_body_shapes() {
        assert_eq!(parse_chat_body(r#"{"message":{"content":"x"}}"#).unwrap(), "x");
        assert_eq!(parse_chat_body(r#"{"choices":[{"message":{"content":"y"}}]}"#).unwrap(), "y");
        assert!(parse_chat_body(r#"{"nope":1}"#).is_err());
        assert!(parse_chat_body("<html>").is_err());
    }
}
