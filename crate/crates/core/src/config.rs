//! Pipeline configuration loaded from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::RuleConfig;
use crate::corpus::Condition;
use crate::digest::canonical_digest;
use crate::gateway::{ModelConfig, DEFAULT_CONCURRENCY};
use crate::prompts::PromptOptions;
use crate::stats::{COLLAPSE_THRESHOLD, DEFAULT_LEVEL, DEFAULT_RESAMPLES};

pub const ENV_SCORER_URL: &str = "PROBE_SCORER_URL";
pub const ENV_CACHE_DIR: &str = "PROBE_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub url: String,
    pub timeout_secs: u64,
    pub batch_size: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8089".into(),
            timeout_secs: 120,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub resamples: usize,
    pub level: f64,
    pub collapse_threshold: f64,
    /// Rows in the token-frequency delta table.
    pub top_k_tokens: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            collapse_threshold: COLLAPSE_THRESHOLD,
            top_k_tokens: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthConfig {
    pub profiles: Option<PathBuf>,
    /// Defaults to the corpus file when unset.
    pub labels: Option<PathBuf>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualConfig {
    /// Model ids (from `models`) acting as coders.
    pub coders: Vec<String>,
    pub synthesizer: Option<String>,
    /// Deep-read sets per inductive analysis.
    pub deep_read_sets: usize,
    /// Records per deep-read set.
    pub set_size: usize,
    /// Append the fenced pipe-row formatting footer to coding prompts.
    pub structured_footer: bool,
    /// Reasoning documents (JSONL or CSV with id, model_id, text) for the
    /// reasoning analysis and deductive coding. Defaults to the run's
    /// annotation outputs.
    pub documents: Option<PathBuf>,
}

impl Default for QualConfig {
    fn default() -> Self {
        Self {
            coders: Vec::new(),
            synthesizer: None,
            deep_read_sets: 3,
            set_size: 5,
            structured_footer: true,
            documents: None,
        }
    }
}

fn default_conditions() -> Vec<Condition> {
    vec![Condition::RewriteAutistic, Condition::RewriteNt]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<Condition>,
    /// Run both persona rewrites for every record.
    #[serde(default = "default_true")]
    pub persona_pair: bool,
    /// Annotation-condition in-context examples (CSV with text,label).
    #[serde(default)]
    pub icl_examples: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub prompts: PromptOptions,
    #[serde(default)]
    pub rules: RuleConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub groundtruth: GroundTruthConfig,
    #[serde(default)]
    pub qual: QualConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}
fn default_true() -> bool {
    true
}

/// Command-line overrides applied after the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub models: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        // Relative paths resolve against the config file's directory.
        let base = origin.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.corpus);
        rebase(&mut cfg.out_dir);
        for p in [
            cfg.cache_dir.as_mut(),
            cfg.templates_dir.as_mut(),
            cfg.icl_examples.as_mut(),
            cfg.groundtruth.profiles.as_mut(),
            cfg.groundtruth.labels.as_mut(),
            cfg.qual.documents.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            rebase(p);
        }
        Ok(cfg)
    }

    /// Read the file, then apply environment and command-line overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(url) = get(ENV_SCORER_URL).filter(|v| !v.is_empty()) {
            self.scorer.url = url;
        }
        if let Some(dir) = get(ENV_CACHE_DIR).filter(|v| !v.is_empty()) {
            self.cache_dir = Some(PathBuf::from(dir));
        }
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if !o.models.is_empty() {
            for m in &o.models {
                if !self.models.iter().any(|c| &c.model_id == m) {
                    return Err(ConfigError::Invalid(format!("--model {m} is not configured")));
                }
            }
            self.models.retain(|c| o.models.contains(&c.model_id));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.corpus.exists() {
            return Err(ConfigError::Invalid(format!(
                "corpus {} does not exist",
                self.corpus.display()
            )));
        }
        if let Some(dir) = &self.templates_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("templates_dir {} is not a directory", dir.display())));
            }
        }
        for m in &self.models {
            m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid("duplicate model_id in models".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be positive".into()));
        }
        if !(self.stats.level > 0.0 && self.stats.level < 1.0) {
            return Err(ConfigError::Invalid("stats.level must lie in (0, 1)".into()));
        }
        if self.stats.resamples == 0 {
            return Err(ConfigError::Invalid("stats.resamples must be positive".into()));
        }
        self.rules.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Rewrite conditions to run, honouring the persona-pair toggle.
    pub fn rewrite_conditions(&self) -> Vec<Condition> {
        if self.persona_pair {
            return default_conditions();
        }
        self.conditions.iter().copied().filter(|c| c.is_rewrite()).collect()
    }

    pub fn annotation_conditions(&self) -> Vec<Condition> {
        self.conditions.iter().copied().filter(|c| !c.is_rewrite()).collect()
    }

    /// Digest of the settings that determine results. Output locations and
    /// the model filter are excluded so the run id is stable across them.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Material<'a> {
            seed: u64,
            conditions: &'a [Condition],
            persona_pair: bool,
            prompts: &'a PromptOptions,
            rules: &'a RuleConfig,
            stats: &'a StatsConfig,
            templates: Option<String>,
        }
        let templates = self.templates_dir.as_ref().map(|d| {
            let mut files: Vec<(String, String)> = std::fs::read_dir(d)
                .into_iter()
                .flatten()
                .filter_map(Result::ok)
                .filter_map(|e| {
                    let text = std::fs::read_to_string(e.path()).ok()?;
                    Some((e.file_name().to_string_lossy().into_owned(), text))
                })
                .collect();
            files.sort();
            canonical_digest(&files)
        });
        canonical_digest(&Material {
            seed: self.seed,
            conditions: &self.conditions,
            persona_pair: self.persona_pair,
            prompts: &self.prompts,
            rules: &self.rules,
            stats: &self.stats,
            templates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
corpus = "corpus.csv"
seed = 7

[[models]]
model_id = "llama3:8b"
endpoint = "http://127.0.0.1:11434/api/chat"

[[models]]
model_id = "mistral:7b"
endpoint = "http://127.0.0.1:11434/api/chat"
temperature = 0.2

[rules]
erasure_threshold = 4
"#;

    fn parse() -> PipelineConfig {
        PipelineConfig::from_toml_str(MINIMAL, Path::new("/cfg/probe.toml")).unwrap()
    }

    #[test]
    fn defaults_and_rebasing() {
        let c = parse();
        assert_eq!(c.corpus, Path::new("/cfg/corpus.csv"));
        assert_eq!(c.cache_dir(), Path::new("/cfg/out/cache"));
        assert_eq!(c.models[0].temperature, 0.8);
        assert_eq!(c.models[1].temperature, 0.2);
        assert_eq!(c.rules.erasure_threshold, 4);
        assert_eq!(c.rules.meta_jaccard_max, 0.15);
        assert_eq!(c.stats.resamples, 10_000);
        assert_eq!(c.rewrite_conditions(), [Condition::RewriteAutistic, Condition::RewriteNt]);
    }

    #[test]
    fn env_and_cli_overrides() {
        let mut c = parse();
        c.apply_env(|k| match k {
            ENV_SCORER_URL => Some("http://sidecar:9000".into()),
            ENV_CACHE_DIR => Some("/tmp/c".into()),
            _ => None,
        });
        assert_eq!(c.scorer.url, "http://sidecar:9000");
        assert_eq!(c.cache_dir(), Path::new("/tmp/c"));
        let hash = c.config_hash();
        c.apply_overrides(&Overrides {
            models: vec!["mistral:7b".into()],
            seed: None,
            out_dir: Some("/elsewhere".into()),
        })
        .unwrap();
        assert_eq!(c.models.len(), 1);
        assert_eq!(c.config_hash(), hash);
        c.apply_overrides(&Overrides { seed: Some(8), ..Default::default() }).unwrap();
        assert_ne!(c.config_hash(), hash);
        assert!(c.apply_overrides(&Overrides { models: vec!["gpt".into()], ..Default::default() }).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_toml_str("corpus='x'\nbogus=1\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }
}
