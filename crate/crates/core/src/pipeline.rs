//! Stage orchestration: rewrite, score, stats, report, ground truth,
//! qualitative coding and corpus ingest.
//!
//! Every stage reads and writes files under `<out>/runs/<run-id>/`, where
//! the run id is derived from the corpus and configuration hashes. Given a
//! warm response cache and a fixed seed each stage is idempotent.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::compliance::{
    classify, exclusion_filter, token_frequency_delta, ComplianceClass, ComplianceVerdict,
    RewriteOutput, RewritePair, TokenDelta,
};
use crate::config::PipelineConfig;
use crate::corpus::{
    append_manifest, corpus_hash, load_corpus, manifest_path, pairwise_kappa, run_id,
    save_corpus, stratify_by_agreement, write_atomic, Condition, CorpusFormat, ManifestFile,
    RunManifest, SamplingRecord, SentenceRecord,
};
use crate::gateway::{
    prompt_messages, ChatBackend, ChatGateway, ChatJob, HttpChatBackend, HttpScorer, ModelConfig,
    ResponseCache, RetryPolicy, Scorer,
};
use crate::ground_truth::{derive_weights, load_profiles, weighted_label, write_weighted_labels, DEFAULT_THRESHOLD};
use crate::metrics::{cosine, rouge1_f1, score_pairs, MetricRow, METRIC_COLUMNS};
use crate::prompts::{IclExample, Persona, TemplateSet};
use crate::qual::{persist_document, run_protocol, theme_codes_csv, DataItem, QualPlan, QualSession};
use crate::report::{
    bar_chart_svg, chart_title, collapse_table_md, failure_table_md, token_delta_table_md, FailureRow,
};
use crate::stats::{
    analyze_rows, collapse_report, per_model_deltas, read_stats_csv, table1_markdown,
    write_stats_csv, CollapseEntry, Metric, StatSettings,
};

pub const REWRITES_FILE: &str = "rewrites.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EXCLUSIONS_FILE: &str = "exclusions.json";
pub const FAILURES_FILE: &str = "failures.csv";
pub const TOKEN_DELTA_FILE: &str = "token_delta.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const TABLE1_FILE: &str = "table1.md";
pub const MODEL_DELTAS_FILE: &str = "per_model_deltas.csv";
pub const COLLAPSE_FILE: &str = "collapse.csv";

/// One model output for one record under one rewrite condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub record_id: String,
    pub model_id: String,
    pub condition: Condition,
    pub raw: String,
    pub verdict: ComplianceVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub model_id: String,
    pub condition: Condition,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub record_id: String,
    pub model_id: String,
    pub condition: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct StageSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    /// Files written by the stage, relative to the run directory.
    pub written: Vec<String>,
    pub errors: Vec<RecordError>,
    pub notes: Vec<String>,
}

impl StageSummary {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

type ScorerFactory = Box<dyn Fn(&PipelineConfig) -> Result<Arc<dyn Scorer>> + Send + Sync>;

/// Entry point for all stages. Backends default to HTTP and can be swapped
/// for stubs.
pub struct Pipeline {
    pub config: PipelineConfig,
    chat: Option<Arc<dyn ChatBackend>>,
    scorer: ScorerFactory,
}

fn http_scorer(cfg: &PipelineConfig) -> Result<Arc<dyn Scorer>> {
    let s = HttpScorer::new(&cfg.scorer.url, Duration::from_secs(cfg.scorer.timeout_secs))?
        .with_batch_size(cfg.scorer.batch_size)
        .connect()
        .with_context(|| format!("scorer sidecar at {} is not healthy", cfg.scorer.url))?;
    Ok(Arc::new(s))
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            chat: None,
            scorer: Box::new(http_scorer),
        }
    }

    pub fn with_chat_backend(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.chat = Some(backend);
        self
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn Scorer>) -> Self {
        self.scorer = Box::new(move |_| Ok(scorer.clone()));
        self
    }

    fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>> {
        match &self.chat {
            Some(b) => Ok(b.clone()),
            None => Ok(Arc::new(HttpChatBackend::new(RetryPolicy::default())?)),
        }
    }

    fn gateway(&self) -> Result<ChatGateway> {
        let dir = self.config.cache_dir();
        let cache = ResponseCache::open(&dir).with_context(|| format!("opening cache {}", dir.display()))?;
        Ok(ChatGateway::new(self.chat_backend()?, Arc::new(cache), self.config.concurrency))
    }

    fn templates(&self) -> Result<TemplateSet> {
        let mut t = match &self.config.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        };
        t.options = self.config.prompts;
        Ok(t)
    }

    fn corpus(&self) -> Result<Vec<SentenceRecord>> {
        let path = &self.config.corpus;
        let format = CorpusFormat::from_path(path)?;
        Ok(load_corpus(path, format).with_context(|| format!("loading corpus {}", path.display()))?)
    }

    /// Run id and directory for the configured corpus.
    pub fn run_location(&self) -> Result<(String, PathBuf, Vec<SentenceRecord>)> {
        let records = self.corpus()?;
        let id = run_id(&corpus_hash(&records), &self.config.config_hash());
        let dir = self.config.out_dir.join("runs").join(&id);
        Ok((id, dir, records))
    }

    pub fn cmd_rewrite(&self) -> Result<StageSummary> {
        let (id, dir, records) = self.run_location()?;
        if self.config.models.is_empty() {
            bail!("no models configured");
        }
        let conditions = self.config.rewrite_conditions();
        if conditions.is_empty() {
            bail!("no rewrite conditions selected");
        }
        let templates = self.templates()?;
        let gateway = self.gateway()?;

        let mut jobs = Vec::new();
        let mut keys = Vec::new();
        for model in &self.config.models {
            let cfg = Arc::new(model.clone());
            for record in &records {
                for &condition in &conditions {
                    let persona = if condition == Condition::RewriteAutistic {
                        Persona::Autistic
                    } else {
                        Persona::Neurotypical
                    };
                    let prompt = templates.render(record, condition, Some(persona), None, &model.model_id)?;
                    jobs.push(ChatJob {
                        config: cfg.clone(),
                        messages: prompt_messages(&prompt),
                        attempt: 0,
                    });
                    keys.push((record, model.model_id.clone(), condition));
                }
            }
        }
        let results = gateway.chat_batch(&jobs);

        let mut summary = StageSummary {
            run_id: id.clone(),
            run_dir: dir.clone(),
            ..Default::default()
        };
        let mut out = Vec::new();
        for ((record, model_id, condition), result) in keys.into_iter().zip(results) {
            match result {
                Ok(raw) => {
                    let verdict = classify(&raw, &record.target, &self.config.rules)?;
                    out.push(RewriteRecord {
                        record_id: record.id.clone(),
                        model_id,
                        condition,
                        raw,
                        verdict,
                    });
                }
                Err(e) => summary.errors.push(RecordError {
                    record_id: record.id.clone(),
                    model_id,
                    condition: condition.to_string(),
                    error: e.to_string(),
                }),
            }
        }
        write_jsonl(&dir.join(REWRITES_FILE), &out)?;
        write_atomic(&dir.join(VERDICTS_FILE), &verdicts_csv(&out)?)?;
        summary.written.extend([REWRITES_FILE.to_string(), VERDICTS_FILE.to_string()]);

        let annotation = self.config.annotation_conditions();
        if !annotation.is_empty() {
            let examples = self.icl_examples()?;
            let mut jobs = Vec::new();
            let mut keys = Vec::new();
            for model in &self.config.models {
                let cfg = Arc::new(model.clone());
                for record in &records {
                    for &condition in &annotation {
                        let prompt = templates.render(record, condition, None, Some(&examples), &model.model_id)?;
                        jobs.push(ChatJob {
                            config: cfg.clone(),
                            messages: prompt_messages(&prompt),
                            attempt: 0,
                        });
                        keys.push((record.id.clone(), model.model_id.clone(), condition));
                    }
                }
            }
            let mut rows = Vec::new();
            for ((record_id, model_id, condition), result) in keys.into_iter().zip(gateway.chat_batch(&jobs)) {
                match result {
                    Ok(raw) => rows.push(AnnotationRecord {
                        record_id,
                        model_id,
                        condition,
                        raw,
                    }),
                    Err(e) => summary.errors.push(RecordError {
                        record_id,
                        model_id,
                        condition: condition.to_string(),
                        error: e.to_string(),
                    }),
                }
            }
            write_jsonl(&dir.join(ANNOTATIONS_FILE), &rows)?;
            summary.written.push(ANNOTATIONS_FILE.to_string());
        }

        write_errors(&dir, &summary.errors)?;
        summary.written.push(ERRORS_FILE.to_string());
        self.record_manifest(&id, &records, conditions.iter().chain(&annotation).copied())?;
        summary.notes.push(format!(
            "{} outputs, {} errors, {} network calls",
            out.len(),
            summary.errors.len(),
            gateway.network_calls()
        ));
        Ok(summary)
    }

    fn icl_examples(&self) -> Result<Vec<IclExample>> {
        let Some(path) = &self.config.icl_examples else {
            return Ok(Vec::new());
        };
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let rows: Result<Vec<IclExample>, _> = reader.deserialize().collect();
        Ok(rows.with_context(|| format!("parsing {}", path.display()))?)
    }

    fn record_manifest(
        &self,
        id: &str,
        records: &[SentenceRecord],
        conditions: impl Iterator<Item = Condition> + Clone,
    ) -> Result<()> {
        let c_hash = corpus_hash(records);
        let k_hash = self.config.config_hash();
        let now = Utc::now();
        let (c_ref, k_ref) = (&c_hash, &k_hash);
        let runs = self
            .config
            .models
            .iter()
            .flat_map(|m| {
                conditions.clone().map(move |condition| RunManifest {
                    run_id: id.to_string(),
                    corpus_hash: c_ref.clone(),
                    config_hash: k_ref.clone(),
                    model_id: m.model_id.clone(),
                    condition,
                    timestamp: now,
                    sampling: SamplingRecord {
                        temperature: m.temperature,
                        top_p: m.top_p,
                        max_tokens: m.max_tokens,
                        seed: m.seed,
                    },
                })
            })
            .collect();
        append_manifest(
            &manifest_path(&self.config.out_dir, id),
            ManifestFile {
                run_id: id.to_string(),
                corpus_hash: corpus_hash(records),
                config_hash: self.config.config_hash(),
                seed: self.config.seed,
                runs,
            },
        )?;
        Ok(())
    }

    /// Pair rewrite outputs by (model, record) in stored order.
    fn load_pairs(&self, dir: &Path) -> Result<Vec<RewritePair>> {
        let path = dir.join(REWRITES_FILE);
        let outputs: Vec<RewriteRecord> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        if outputs.is_empty() {
            bail!("no rewrite outputs in {}; run `probe rewrite` first", dir.display());
        }
        let mut aut: HashMap<(&str, &str), &RewriteRecord> = HashMap::new();
        for o in &outputs {
            if o.condition == Condition::RewriteAutistic {
                aut.insert((&o.model_id, &o.record_id), o);
            }
        }
        Ok(outputs
            .iter()
            .filter(|o| o.condition == Condition::RewriteNt)
            .filter_map(|nt| {
                aut.get(&(nt.model_id.as_str(), nt.record_id.as_str())).map(|a| RewritePair {
                    record_id: nt.record_id.clone(),
                    model_id: nt.model_id.clone(),
                    autistic: RewriteOutput {
                        raw: a.raw.clone(),
                        verdict: a.verdict.clone(),
                    },
                    neurotypical: RewriteOutput {
                        raw: nt.raw.clone(),
                        verdict: nt.verdict.clone(),
                    },
                })
            })
            .collect())
    }

    pub fn cmd_score(&self) -> Result<StageSummary> {
        let (id, dir, records) = self.run_location()?;
        let pairs = self.load_pairs(&dir)?;
        if pairs.is_empty() {
            bail!("rewrite outputs contain no complete autistic/NT pairs; run `probe rewrite` with both personas");
        }
        let sources: HashMap<&str, &SentenceRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let scorer = (self.scorer)(&self.config)?;

        let aut_raw: Vec<String> = pairs.iter().map(|p| p.autistic.raw.clone()).collect();
        let nt_raw: Vec<String> = pairs.iter().map(|p| p.neurotypical.raw.clone()).collect();
        let report = exclusion_filter(pairs);
        let rows = score_pairs(&report.valid, &sources, scorer.as_ref())?;

        write_atomic(&dir.join(METRICS_FILE), &metrics_csv(&rows)?)?;

        let mut per_model: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for p in &report.valid {
            per_model.entry(&p.model_id).or_default().0 += 1;
        }
        for p in &report.excluded {
            per_model.entry(&p.model_id).or_default().1 += 1;
        }
        let exclusions = serde_json::json!({
            "total_pairs": report.valid.len() + report.excluded.len(),
            "valid_pairs": report.valid.len(),
            "excluded_pairs": report.excluded.len(),
            "class_counts": report.class_counts.iter().map(|(c, n)| (c.to_string(), *n)).collect::<BTreeMap<_, _>>(),
            "per_model": per_model.iter().map(|(m, (v, e))| (m.to_string(), serde_json::json!({"valid": v, "excluded": e}))).collect::<BTreeMap<_, _>>(),
        });
        let mut bytes = serde_json::to_vec_pretty(&exclusions)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(EXCLUSIONS_FILE), &bytes)?;
        for (class, n) in &report.class_counts {
            log::info!("excluded {n} {class} outputs");
        }

        let failures = failure_rows(&report.excluded, &sources, scorer.as_ref())?;
        write_atomic(&dir.join(FAILURES_FILE), &to_csv(&failures)?)?;

        let deltas = match token_frequency_delta(&aut_raw, &nt_raw, self.config.stats.top_k_tokens) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("token frequency delta skipped: {e}");
                Vec::new()
            }
        };
        write_atomic(&dir.join(TOKEN_DELTA_FILE), &to_csv(&deltas)?)?;

        Ok(StageSummary {
            run_id: id,
            run_dir: dir,
            written: [METRICS_FILE, EXCLUSIONS_FILE, FAILURES_FILE, TOKEN_DELTA_FILE]
                .map(String::from)
                .to_vec(),
            errors: Vec::new(),
            notes: vec![format!(
                "{} valid pairs, {} excluded",
                report.valid.len(),
                report.excluded.len()
            )],
        })
    }

    pub fn cmd_stats(&self) -> Result<StageSummary> {
        let (id, dir, _) = self.run_location()?;
        let path = dir.join(METRICS_FILE);
        if !path.exists() {
            bail!("{} not found; run `probe score` first", path.display());
        }
        let rows: Vec<MetricRow> = read_csv(&path)?;
        if rows.is_empty() {
            bail!("{} has no rows; nothing to test", path.display());
        }
        let settings = StatSettings {
            resamples: self.config.stats.resamples,
            level: self.config.stats.level,
            seed: self.config.seed,
        };
        let results = analyze_rows(&rows, &settings)?;
        let mut buf = Vec::new();
        write_stats_csv(&results, &mut buf)?;
        write_atomic(&dir.join(STATS_FILE), &buf)?;
        write_atomic(&dir.join(TABLE1_FILE), table1_markdown(&results).as_bytes())?;

        let mut model_rows = Vec::new();
        for m in Metric::ALL {
            for (model_id, mean_delta) in per_model_deltas(&rows, m.name())? {
                model_rows.push(ModelDelta {
                    model_id,
                    metric: m.name().to_string(),
                    mean_delta,
                });
            }
        }
        write_atomic(&dir.join(MODEL_DELTAS_FILE), &to_csv(&model_rows)?)?;
        let collapse = collapse_report(&rows, self.config.stats.collapse_threshold);
        write_atomic(&dir.join(COLLAPSE_FILE), &to_csv(&collapse)?)?;
        Ok(StageSummary {
            run_id: id,
            run_dir: dir,
            written: [STATS_FILE, TABLE1_FILE, MODEL_DELTAS_FILE, COLLAPSE_FILE]
                .map(String::from)
                .to_vec(),
            ..Default::default()
        })
    }

    pub fn cmd_report(&self) -> Result<StageSummary> {
        let (id, dir, _) = self.run_location()?;
        for f in [STATS_FILE, MODEL_DELTAS_FILE, COLLAPSE_FILE, FAILURES_FILE, TOKEN_DELTA_FILE] {
            if !dir.join(f).exists() {
                bail!("{} missing in {}; run `probe score` and `probe stats` first", f, dir.display());
            }
        }
        let mut written = Vec::new();
        let deltas: Vec<ModelDelta> = read_csv(&dir.join(MODEL_DELTAS_FILE))?;
        for m in Metric::ALL {
            let bars: Vec<(String, f64)> = deltas
                .iter()
                .filter(|d| d.metric == m.name())
                .map(|d| (d.model_id.clone(), d.mean_delta))
                .collect();
            let name = format!("charts/delta_{}.svg", m.name());
            let svg = bar_chart_svg(chart_title(m), &format!("Δ {} (NT − AUT)", m.label()), &bars);
            write_atomic(&dir.join(&name), svg.as_bytes())?;
            written.push(name);
        }
        let failures: Vec<FailureRow> = read_csv(&dir.join(FAILURES_FILE))?;
        let collapse: Vec<CollapseEntry> = read_csv(&dir.join(COLLAPSE_FILE))?;
        let tokens: Vec<TokenDelta> = read_csv(&dir.join(TOKEN_DELTA_FILE))?;
        let results = read_stats_csv(fs::File::open(dir.join(STATS_FILE))?)?;
        let threshold = self.config.stats.collapse_threshold;

        let tables = [
            ("failures.md", failure_table_md(&failures)),
            ("collapse.md", collapse_table_md(&collapse, threshold)),
            ("token_delta.md", token_delta_table_md(&tokens)),
        ];
        for (name, body) in &tables {
            write_atomic(&dir.join(name), body.as_bytes())?;
            written.push(name.to_string());
        }
        let mut report = format!("# Run {id}\n\n## Cross-condition evaluation\n\n{}\n", table1_markdown(&results));
        report.push_str("## Per-model deltas\n\n");
        for m in Metric::ALL {
            report.push_str(&format!("- [{}](charts/delta_{}.svg)\n", chart_title(m), m.name()));
        }
        report.push_str(&format!("\n## Failure modes\n\n{}\n", tables[0].1));
        report.push_str(&format!("## Persona collapse\n\n{}\n", tables[1].1));
        report.push_str(&format!("## Tokens over-represented in autistic-persona outputs\n\n{}", tables[2].1));
        write_atomic(&dir.join("report.md"), report.as_bytes())?;
        written.push("report.md".into());
        Ok(StageSummary {
            run_id: id,
            run_dir: dir,
            written,
            ..Default::default()
        })
    }

    /// Weighted labels for every corpus record. Records that cannot be
    /// weighted are reported as errors and skipped.
    pub fn cmd_groundtruth(&self) -> Result<StageSummary> {
        let gt = &self.config.groundtruth;
        let profiles = gt
            .profiles
            .as_ref()
            .context("groundtruth.profiles is not set")?;
        let labels_path = gt.labels.clone().unwrap_or_else(|| self.config.corpus.clone());
        let records = load_corpus(&labels_path, CorpusFormat::from_path(&labels_path)?)?;
        let weights = derive_weights(&load_profiles(profiles)?)?;
        let threshold = gt.threshold.unwrap_or(DEFAULT_THRESHOLD);
        let mut out = Vec::new();
        let mut errors = Vec::new();
        for r in &records {
            match weighted_label(&r.id, &r.labels, &weights.weight, threshold) {
                Ok(l) => out.push(l),
                Err(e) => errors.push(RecordError {
                    record_id: r.id.clone(),
                    model_id: String::new(),
                    condition: "groundtruth".into(),
                    error: e.to_string(),
                }),
            }
        }
        let dir = self.config.out_dir.join("groundtruth");
        fs::create_dir_all(&dir)?;
        write_weighted_labels(&dir.join("weighted_labels.csv"), &out)?;
        let mut w = serde_json::to_vec_pretty(&weights)?;
        w.push(b'\n');
        write_atomic(&dir.join("weights.json"), &w)?;
        write_errors(&dir, &errors)?;
        Ok(StageSummary {
            run_id: String::new(),
            run_dir: dir,
            written: vec!["weighted_labels.csv".into(), "weights.json".into(), ERRORS_FILE.into()],
            errors,
            notes: vec![format!("{} weighted labels", out.len())],
        })
    }

    pub fn cmd_qual(&self) -> Result<StageSummary> {
        let (id, dir, records) = self.run_location()?;
        let q = &self.config.qual;
        let model = |mid: &str| -> Result<Arc<ModelConfig>> {
            self.config
                .models
                .iter()
                .find(|m| m.model_id == mid)
                .map(|m| Arc::new(m.clone()))
                .with_context(|| format!("qual model {mid} is not in models"))
        };
        let coders = q
            .coders
            .iter()
            .map(|m| Ok((crate::gateway::file_stem(m), model(m)?)))
            .collect::<Result<Vec<_>>>()?;
        let synth_model = q.synthesizer.as_deref().context("qual.synthesizer is not set")?;
        let plan = QualPlan {
            coders,
            synthesizer: ("synthesizer".into(), model(synth_model)?),
            deep_read_sets: q.deep_read_sets,
            set_size: q.set_size,
        };

        let sources: HashMap<&str, &SentenceRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let rewrites: Vec<DataItem> = match self.load_pairs(&dir) {
            Ok(pairs) => pairs
                .iter()
                .filter(|p| p.is_valid())
                .filter_map(|p| {
                    sources.get(p.record_id.as_str()).map(|s| DataItem {
                        id: p.record_id.clone(),
                        model_id: p.model_id.clone(),
                        text: format!(
                            "Original: {}\nAutistic rewrite: {}\nNT rewrite: {}",
                            s.target, p.autistic.verdict.extracted_content, p.neurotypical.verdict.extracted_content
                        ),
                    })
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        let reasoning = self.reasoning_documents(&dir)?;
        if rewrites.is_empty() || reasoning.is_empty() {
            bail!(
                "qualitative coding needs rewrite pairs ({}) and reasoning documents ({}); run `probe rewrite` with annotation conditions or set qual.documents",
                rewrites.len(),
                reasoning.len()
            );
        }

        let gateway = self.gateway()?;
        let templates = self.templates()?;
        let mut session = QualSession::new(&gateway, &templates);
        session.structured_footer = q.structured_footer;
        let outcome = run_protocol(&mut session, &plan, &rewrites, &reasoning)?;

        let qdir = dir.join("qual");
        let mut written = Vec::new();
        for doc in &outcome.documents {
            persist_document(&qdir, doc)?;
            written.push(format!("qual/{}.md", doc.file_stem()));
        }
        write_atomic(&qdir.join("theme_codes.csv"), &theme_codes_csv(&outcome.theme_codes))?;
        written.push("qual/theme_codes.csv".into());
        let notes = outcome.warnings().map(|(a, w)| format!("{a}: {w}")).collect();
        Ok(StageSummary {
            run_id: id,
            run_dir: dir,
            written,
            errors: Vec::new(),
            notes,
        })
    }

    fn reasoning_documents(&self, dir: &Path) -> Result<Vec<DataItem>> {
        if let Some(path) = &self.config.qual.documents {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let is_csv = path.extension().is_some_and(|e| e == "csv");
            if is_csv {
                return read_csv(path);
            }
            return text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
                .collect();
        }
        let path = dir.join(ANNOTATIONS_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let rows: Vec<AnnotationRecord> = read_jsonl(&path)?;
        Ok(rows
            .into_iter()
            .map(|r| DataItem {
                id: format!("{}/{}/{}", r.model_id, r.condition, r.record_id),
                model_id: r.model_id,
                text: r.raw,
            })
            .collect())
    }

    /// Validate the corpus and write a normalised copy plus a summary with
    /// pairwise annotator kappas and agreement bands.
    pub fn cmd_ingest(&self, band_size: usize) -> Result<StageSummary> {
        let records = self.corpus()?;
        let hash = corpus_hash(&records);
        let dir = self.config.out_dir.join("ingest");
        fs::create_dir_all(&dir)?;
        save_corpus(&records, &dir.join("corpus.jsonl"), CorpusFormat::Jsonl)?;

        let annotators: Vec<String> = records
            .iter()
            .flat_map(|r| r.labels.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut kappas = BTreeMap::new();
        for (i, a) in annotators.iter().enumerate() {
            for b in &annotators[i + 1..] {
                let (la, lb): (Vec<u8>, Vec<u8>) = records
                    .iter()
                    .filter_map(|r| Some((*r.labels.get(a)?, *r.labels.get(b)?)))
                    .unzip();
                let value = pairwise_kappa(&la, &lb).map_or_else(|e| serde_json::json!(e.to_string()), |k| serde_json::json!(k));
                kappas.insert(format!("{a}|{b}"), value);
            }
        }
        let scores: HashMap<String, f64> = records
            .iter()
            .filter_map(|r| r.agreement.map(|a| (r.id.clone(), a)))
            .collect();
        let bands = if scores.len() == records.len() && !records.is_empty() {
            match stratify_by_agreement(&records, &scores, band_size) {
                Ok(b) => {
                    let ids = |v: &[SentenceRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
                    serde_json::json!({
                        "band_size": band_size,
                        "highest": ids(&b.highest),
                        "median": ids(&b.median),
                        "lowest": ids(&b.lowest),
                    })
                }
                Err(e) => serde_json::json!(e.to_string()),
            }
        } else {
            serde_json::Value::Null
        };
        let summary = serde_json::json!({
            "records": records.len(),
            "corpus_hash": hash,
            "annotators": annotators,
            "pairwise_kappa": kappas,
            "agreement_bands": bands,
        });
        let mut bytes = serde_json::to_vec_pretty(&summary)?;
        bytes.push(b'\n');
        write_atomic(&dir.join("summary.json"), &bytes)?;
        Ok(StageSummary {
            run_id: String::new(),
            run_dir: dir,
            written: vec!["corpus.jsonl".into(), "summary.json".into()],
            errors: Vec::new(),
            notes: vec![format!("{} records, corpus hash {hash}", records.len())],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta {
    pub model_id: String,
    pub metric: String,
    pub mean_delta: f64,
}

fn failure_rows(
    excluded: &[RewritePair],
    sources: &HashMap<&str, &SentenceRecord>,
    scorer: &dyn Scorer,
) -> Result<Vec<FailureRow>> {
    #[derive(Default)]
    struct Acc {
        outputs: usize,
        pairs: Vec<usize>,
    }
    let mut acc: BTreeMap<(ComplianceClass, &str), Acc> = BTreeMap::new();
    for (i, p) in excluded.iter().enumerate() {
        let classes = [p.autistic.verdict.class, p.neurotypical.verdict.class];
        for c in classes.iter().filter(|c| **c != ComplianceClass::Compliant) {
            let e = acc.entry((*c, p.model_id.as_str())).or_default();
            e.outputs += 1;
            if e.pairs.last() != Some(&i) {
                e.pairs.push(i);
            }
        }
    }
    // Cross-persona similarity where both sides kept some text.
    let embeddable: Vec<usize> = (0..excluded.len())
        .filter(|&i| {
            let p = &excluded[i];
            !p.autistic.verdict.extracted_content.trim().is_empty()
                && !p.neurotypical.verdict.extracted_content.trim().is_empty()
        })
        .collect();
    let mut cross: HashMap<usize, f64> = HashMap::new();
    if !embeddable.is_empty() {
        let texts: Vec<String> = embeddable
            .iter()
            .flat_map(|&i| {
                [
                    excluded[i].autistic.verdict.extracted_content.clone(),
                    excluded[i].neurotypical.verdict.extracted_content.clone(),
                ]
            })
            .collect();
        let emb = scorer.embed(&texts)?;
        for (k, &i) in embeddable.iter().enumerate() {
            cross.insert(i, cosine(&emb[2 * k], &emb[2 * k + 1])?);
        }
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(acc
        .into_iter()
        .map(|((class, model), a)| {
            let rouge: Vec<f64> = a
                .pairs
                .iter()
                .filter_map(|&i| {
                    let p = &excluded[i];
                    sources
                        .get(p.record_id.as_str())
                        .map(|s| rouge1_f1(&s.target, &p.autistic.verdict.extracted_content))
                })
                .collect();
            let sims: Vec<f64> = a.pairs.iter().filter_map(|i| cross.get(i).copied()).collect();
            FailureRow {
                class,
                model_id: model.to_string(),
                outputs: a.outputs,
                pairs: a.pairs.len(),
                rouge1_aut: mean(rouge),
                cross_sim: mean(sims),
            }
        })
        .collect())
}

fn verdicts_csv(rows: &[RewriteRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "model_id", "condition", "class", "matched_rules", "extracted_content"])?;
    for r in rows {
        w.write_record([
            r.record_id.as_str(),
            &r.model_id,
            r.condition.as_str(),
            r.verdict.class.as_str(),
            &r.verdict.matched_rules.join(";"),
            &r.verdict.extracted_content,
        ])?;
    }
    Ok(w.into_inner()?)
}

fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Result<Vec<T>, _> = reader.deserialize().collect();
    rows.with_context(|| format!("parsing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_errors(dir: &Path, errors: &[RecordError]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["record_id", "model_id", "condition", "error"])?;
    for e in errors {
        w.serialize(e)?;
    }
    write_atomic(&dir.join(ERRORS_FILE), &w.into_inner()?)?;
    Ok(())
}
