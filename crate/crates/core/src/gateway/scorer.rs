use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentimentLabel {
    Negative,
    Neutral,
    Positive,
}

impl SentimentLabel {
    pub fn sign(self) -> f64 {
        match self {
            SentimentLabel::Negative => -1.0,
            SentimentLabel::Neutral => 0.0,
            SentimentLabel::Positive => 1.0,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negative" => Some(SentimentLabel::Negative),
            "neutral" => Some(SentimentLabel::Neutral),
            "positive" => Some(SentimentLabel::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentResult {
    pub label: SentimentLabel,
    pub confidence: f64,
}

/// Embedding and sentiment backend.
pub trait Scorer: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
    fn sentiment(&self, texts: &[String]) -> Result<Vec<SentimentResult>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub dim: usize,
    #[serde(default)]
    pub model_tags: serde_json::Value,
}

#[derive(Deserialize)]
struct EmbedBody {
    dim: usize,
    model_tag: String,
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct SentimentRow {
    label: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct SentimentBody {
    results: Vec<SentimentRow>,
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

fn check_inputs(texts: &[String]) -> Result<(), GatewayError> {
    if texts.is_empty() {
        return Err(GatewayError::Usage("empty text list".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(GatewayError::Usage(format!("text #{i} is empty")));
    }
    Ok(())
}

/// Client for the scorer sidecar's `/embed`, `/sentiment` and `/health`.
pub struct HttpScorer {
    base_url: String,
    client: reqwest::blocking::Client,
    batch_size: usize,
    declared_dim: Option<usize>,
}

impl HttpScorer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Usage(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
            batch_size: 64,
            declared_dim: None,
        })
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    /// Query `/health` and remember the declared embedding dimension.
    pub fn connect(mut self) -> Result<Self, GatewayError> {
        let health = self.health()?;
        self.declared_dim = Some(health.dim);
        Ok(self)
    }

    pub fn health(&self) -> Result<HealthStatus, GatewayError> {
        let url = format!("{}/health", self.base_url);
        let text = self.send(self.client.get(&url), &url)?;
        let health: HealthStatus = serde_json::from_str(&text).map_err(|e| GatewayError::Protocol {
            endpoint: url.clone(),
            message: e.to_string(),
        })?;
        if health.status != "ok" {
            return Err(GatewayError::Protocol {
                endpoint: url,
                message: format!("sidecar status {:?}", health.status),
            });
        }
        Ok(health)
    }

    fn send(&self, request: reqwest::blocking::RequestBuilder, url: &str) -> Result<String, GatewayError> {
        let response = request.send().map_err(|e| GatewayError::Transport {
            endpoint: url.to_string(),
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Transport {
            endpoint: url.to_string(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Upstream {
                endpoint: url.to_string(),
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        Ok(text)
    }

    fn post(&self, path: &str, texts: &[String]) -> Result<(String, String), GatewayError> {
        let url = format!("{}{path}", self.base_url);
        let body = json!({ "texts": texts });
        let text = self.send(self.client.post(&url).json(&body), &url)?;
        Ok((url, text))
    }
}

impl Scorer for HttpScorer {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_inputs(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let (url, text) = self.post("/embed", chunk)?;
            let protocol = |message: String| GatewayError::Protocol {
                endpoint: url.clone(),
                message,
            };
            let body: EmbedBody = serde_json::from_str(&text).map_err(|e| protocol(e.to_string()))?;
            if body.vectors.len() != chunk.len() {
                return Err(protocol(format!(
                    "expected {} vectors, got {}",
                    chunk.len(),
                    body.vectors.len()
                )));
            }
            if let Some(declared) = self.declared_dim {
                if body.dim != declared {
                    return Err(protocol(format!(
                        "dimension {} differs from declared {declared}",
                        body.dim
                    )));
                }
            }
            for values in body.vectors {
                if values.len() != body.dim {
                    return Err(protocol(format!(
                        "vector of length {} in a dim-{} response",
                        values.len(),
                        body.dim
                    )));
                }
                let v = EmbeddingVector {
                    values,
                    model_tag: body.model_tag.clone(),
                };
                if (v.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(protocol(format!("vector norm {} is not 1", v.norm())));
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    fn sentiment(&self, texts: &[String]) -> Result<Vec<SentimentResult>, GatewayError> {
        check_inputs(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let (url, text) = self.post("/sentiment", chunk)?;
            let protocol = |message: String| GatewayError::Protocol {
                endpoint: url.clone(),
                message,
            };
            let body: SentimentBody =
                serde_json::from_str(&text).map_err(|e| protocol(e.to_string()))?;
            if body.results.len() != chunk.len() {
                return Err(protocol(format!(
                    "expected {} results, got {}",
                    chunk.len(),
                    body.results.len()
                )));
            }
            for row in body.results {
                let label = SentimentLabel::parse(&row.label)
                    .ok_or_else(|| protocol(format!("unknown sentiment label {:?}", row.label)))?;
                if !(0.0..=1.0).contains(&row.confidence) {
                    return Err(protocol(format!("confidence {} outside [0, 1]", row.confidence)));
                }
                out.push(SentimentResult {
                    label,
                    confidence: row.confidence,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_guards() {
        let s = HttpScorer::new("http://127.0.0.1:9", Duration::from_millis(200)).unwrap();
        assert!(matches!(s.embed(&[]), Err(GatewayError::Usage(_))));
        assert!(matches!(s.sentiment(&["ok".into(), "".into()]), Err(GatewayError::Usage(_))));
    }

    #[test]
    fn label_signs() {
        assert_eq!(SentimentLabel::parse("POSITIVE"), Some(SentimentLabel::Positive));
        assert_eq!(SentimentLabel::Negative.sign(), -1.0);
        assert_eq!(SentimentLabel::Neutral.sign(), 0.0);
        assert_eq!(SentimentLabel::parse("meh"), None);
    }
}
