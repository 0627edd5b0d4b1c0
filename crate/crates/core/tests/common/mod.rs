//! Scripted backends and fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use probe_core::gateway::{
    ChatBackend, ChatMessage, EmbeddingVector, GatewayError, ModelConfig, Scorer, SentimentLabel,
    SentimentResult,
};

pub const AUT_CLAUSE: &str = "an autistic person talking to other autistic people";
pub const THEMES: [&str; 7] = ["Focus", "Identity", "Impact", "Intent", "Stereotypes", "Tone", "Wording"];

fn last_user(messages: &[ChatMessage]) -> &str {
    messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

fn field<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

/// Deterministic chat stub. Rewrites echo the target with persona-specific
/// wording; qualitative phases answer with well-formed fenced blocks.
/// Targets listed in `overrides` get a fixed reply for the given persona.
#[derive(Default)]
pub struct ScriptedChat {
    pub calls: AtomicUsize,
    pub overrides: HashMap<(String, bool), String>,
    pub fail_models: Vec<String>,
    pub log: Mutex<Vec<String>>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn override_reply(mut self, target: &str, autistic: bool, reply: &str) -> Self {
        self.overrides.insert((target.to_string(), autistic), reply.to_string());
        self
    }

    pub fn failing(mut self, model: &str) -> Self {
        self.fail_models.push(model.to_string());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn scripted_reply(model: &str, messages: &[ChatMessage]) -> String {
    let user = last_user(messages);
    if let Some(target) = field(user, "Target sentence:") {
        if user.contains("Rewrite the following") {
            return if user.contains(AUT_CLAUSE) {
                format!("Rewritten Sentence: {target} That is the plain fact.\n\nReasoning: direct wording, sentence kept literal.")
            } else {
                format!("Rewritten Sentence: Honestly, {target} You know how it goes.\n\nReasoning: softer social framing.")
            };
        }
        return format!("Reasoning: {model} read \"{target}\" and weighed the context.\nLabel: 1");
    }
    if user.contains("```themes") {
        let doc = user
            .split("[DOCUMENT ID: ")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .unwrap_or("?");
        let mut rows = String::from("```themes\ntheme | status | quote | code label | confidence\n");
        for (i, t) in THEMES.iter().enumerate() {
            if (i + doc.len()) % 3 == 0 {
                rows.push_str(&format!("{t} | Present | \"{doc} excerpt\" | {} cue noted by {model} | Medium\n", t.to_lowercase()));
            } else {
                rows.push_str(&format!("{t} | Not Present | | |\n"));
            }
        }
        rows.push_str("```\n");
        return format!("Coding for {doc}.\n\n{rows}");
    }
    if user.contains("```codebook") {
        return format!(
            "Analysis from {model}.\n\n```codebook\nDeficit framing | DF | Casts traits as lacks | \"they lack empathy\"\nDirect phrasing | DP | Plain literal wording | \"That is the plain fact.\"\n```\n"
        );
    }
    format!("Statement from {model}: {} characters of instructions read.", user.len())
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, config: &ModelConfig, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_models.contains(&config.model_id) {
            return Err(GatewayError::Transport {
                endpoint: config.endpoint.clone(),
                message: format!("connection refused for {}", config.model_id),
            });
        }
        let user = last_user(messages);
        if let Some(target) = field(user, "Target sentence:") {
            let aut = user.contains(AUT_CLAUSE);
            if let Some(r) = self.overrides.get(&(target.to_string(), aut)) {
                return Ok(r.clone());
            }
        }
        self.log.lock().unwrap().push(config.model_id.clone());
        Ok(scripted_reply(&config.model_id, messages))
    }
}

pub const DIM: usize = 16;

/// Hashed bag-of-words embedding; identical texts give identical unit vectors.
pub fn stub_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[0] = 0.25;
    for tok in text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = tok.bytes().fold(2166136261u32, |h, b| (h ^ b as u32).wrapping_mul(16777619));
        v[(h as usize) % DIM] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn stub_sentiment(text: &str) -> (SentimentLabel, f64) {
    let lower = text.to_lowercase();
    let pos = ["love", "great", "good", "honestly"].iter().filter(|w| lower.contains(*w)).count();
    let neg = ["hate", "bad", "awful", "fact"].iter().filter(|w| lower.contains(*w)).count();
    let conf = 0.55 + 0.4 * ((text.len() % 10) as f64 / 10.0);
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => (SentimentLabel::Positive, conf),
        std::cmp::Ordering::Less => (SentimentLabel::Negative, conf),
        std::cmp::Ordering::Equal => (SentimentLabel::Neutral, conf),
    }
}

#[derive(Default)]
pub struct StubScorer {
    pub calls: AtomicUsize,
}

impl Scorer for StubScorer {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector {
                values: stub_embedding(t),
                model_tag: "stub-embed".into(),
            })
            .collect())
    }

    fn sentiment(&self, texts: &[String]) -> Result<Vec<SentimentResult>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| {
                let (label, confidence) = stub_sentiment(t);
                SentimentResult { label, confidence }
            })
            .collect())
    }
}

/// A tiny HTTP server answering each request through `handler`, which gets
/// (method, path, body) and returns (status, body).
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

pub fn serve<F>(handler: F) -> StubServer
where
    F: Fn(&str, &str, &str) -> (u16, String) + Send + Sync + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind stub server");
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handler = Arc::new(handler);
    thread::spawn(move || {
        for mut request in server.incoming_requests() {
            counter.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            let _ = request.as_reader().read_to_string(&mut body);
            let (status, reply) = handler(&request.method().to_string(), request.url(), &body);
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let response = tiny_http::Response::from_string(reply)
                .with_status_code(status)
                .with_header(header);
            let _ = request.respond(response);
        }
    });
    StubServer { url, hits }
}

/// Scorer sidecar stub speaking the `/health`, `/embed`, `/sentiment` protocol.
pub fn scorer_server() -> StubServer {
    serve(|method, path, body| match (method, path) {
        ("GET", "/health") => (200, format!(r#"{{"status":"ok","dim":{DIM},"model_tags":{{"embed":"stub"}}}}"#)),
        ("POST", "/embed") => {
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            let vectors: Vec<Vec<f64>> = req["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| stub_embedding(t.as_str().unwrap()))
                .collect();
            (200, serde_json::json!({"dim": DIM, "model_tag": "stub-embed", "vectors": vectors}).to_string())
        }
        ("POST", "/sentiment") => {
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            let results: Vec<serde_json::Value> = req["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    let (label, confidence) = stub_sentiment(t.as_str().unwrap());
                    serde_json::json!({"label": format!("{label:?}"), "confidence": confidence})
                })
                .collect();
            (200, serde_json::json!({"model_tag": "stub-sentiment", "results": results}).to_string())
        }
        _ => (404, r#"{"error":"not found"}"#.into()),
    })
}

/// Chat server stub answering with the scripted replies.
pub fn chat_server() -> StubServer {
    serve(|_, _, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        let messages: Vec<ChatMessage> = serde_json::from_value(req["messages"].clone()).unwrap();
        let model = req["model"].as_str().unwrap_or("?");
        let reply = scripted_reply(model, &messages);
        (200, serde_json::json!({"model": model, "message": {"role": "assistant", "content": reply}, "done": true}).to_string())
    })
}

pub const TARGETS: [&str; 20] = [
    "I skipped the party because the lights were too bright.",
    "My coworker keeps asking why I never make eye contact.",
    "Routines help me get through a busy day.",
    "People say I am blunt but I just say what I mean.",
    "The new office layout is noisy and hard to focus in.",
    "I love trains and can talk about them for hours.",
    "Small talk at lunch feels exhausting to me.",
    "My sister explained the joke after everyone laughed.",
    "I wrote a detailed list before calling the doctor.",
    "The meeting changed rooms without any warning.",
    "I hate when plans change at the last minute.",
    "He said autism is just an excuse for being rude.",
    "Wearing headphones on the bus keeps me calm.",
    "I asked my manager for written instructions.",
    "The cafe music was great but far too loud.",
    "She noticed the tiny change in the logo right away.",
    "I prefer texting over phone calls.",
    "Group projects are hard when nobody sets a plan.",
    "My friend understands when I need quiet time.",
    "The teacher thought I was not listening, but I was.",
];

/// Write a `n`-record CSV corpus with two annotators and return its path.
pub fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("corpus.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["id", "preceding", "target", "following", "a1", "a2", "a3"]).unwrap();
    for i in 0..n {
        let target = if i < TARGETS.len() {
            TARGETS[i].to_string()
        } else {
            format!("Sentence number {i} about a quiet afternoon.")
        };
        let prev = if i % 3 == 0 { String::new() } else { format!("Context line {i}.") };
        w.write_record([
            format!("r{i:03}"),
            prev,
            target,
            String::new(),
            ((i % 2) as u8).to_string(),
            ((i % 3 == 0) as u8).to_string(),
            ((i % 2) as u8).to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    path
}

/// Write a config file in `dir` and return its path.
pub fn write_config(dir: &Path, corpus: &Path, models: &[&str], extra: &str) -> PathBuf {
    let mut text = format!(
        "corpus = {:?}\nout_dir = {:?}\nseed = 7\nconcurrency = 4\n\n[stats]\nresamples = 2000\n\n",
        corpus.display().to_string(),
        dir.join("out").display().to_string()
    );
    text.push_str(extra);
    for m in models {
        text.push_str(&format!(
            "\n[[models]]\nmodel_id = \"{m}\"\nendpoint = \"http://127.0.0.1:9/api/chat\"\ntemperature = 0.8\ntop_p = 0.9\nmax_retries = 0\n"
        ));
    }
    let path = dir.join("probe.toml");
    std::fs::write(&path, text).unwrap();
    path
}
