mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use common::*;
use probe_core::config::{Overrides, PipelineConfig};
use probe_core::pipeline::Pipeline;

fn pipeline(config: &Path, chat: Arc<ScriptedChat>) -> Pipeline {
    let cfg = PipelineConfig::load(config, &Overrides::default()).unwrap();
    Pipeline::new(cfg)
        .with_chat_backend(chat)
        .with_scorer(Arc::new(StubScorer::default()))
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn rewrite_counts_and_warm_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 10);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let chat = Arc::new(ScriptedChat::new());
    let summary = pipeline(&config, chat.clone()).cmd_rewrite().unwrap();
    assert!(summary.ok());
    assert_eq!(chat.calls(), 20);
    let rewrites = read(&summary.run_dir, "rewrites.jsonl");
    assert_eq!(rewrites.lines().count(), 20);
    let verdicts = read(&summary.run_dir, "verdicts.csv");
    assert_eq!(verdicts.lines().count(), 21);

    let warm = Arc::new(ScriptedChat::new());
    let again = pipeline(&config, warm.clone()).cmd_rewrite().unwrap();
    assert_eq!(warm.calls(), 0, "warm cache must make no backend calls");
    assert_eq!(read(&again.run_dir, "rewrites.jsonl"), rewrites);
    assert!(again.notes[0].contains("0 network calls"));
}

#[test]
fn unreachable_model_is_reported_and_run_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 3);
    let config = write_config(tmp.path(), &corpus, &["good", "down"], "");
    let chat = Arc::new(ScriptedChat::new().failing("down"));
    let summary = pipeline(&config, chat).cmd_rewrite().unwrap();
    assert_eq!(summary.errors.len(), 6);
    assert!(summary.errors.iter().all(|e| e.model_id == "down" && e.error.contains("down")));
    assert_eq!(read(&summary.run_dir, "rewrites.jsonl").lines().count(), 6);
    assert_eq!(read(&summary.run_dir, "errors.csv").lines().count(), 7);
}

#[test]
fn score_excludes_erasure_pair_and_logs_class() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let chat = Arc::new(ScriptedChat::new().override_reply(TARGETS[2], true, "Rewritten Sentence:"));
    let p = pipeline(&config, chat);
    p.cmd_rewrite().unwrap();
    let s = p.cmd_score().unwrap();
    let metrics = read(&s.run_dir, "metrics.csv");
    assert_eq!(metrics.lines().count(), 1 + 5);
    assert!(!metrics.contains("r002"));
    let ex: serde_json::Value = serde_json::from_str(&read(&s.run_dir, "exclusions.json")).unwrap();
    assert_eq!(ex["excluded_pairs"], 1);
    assert_eq!(ex["class_counts"]["Erasure"], 1);
    let failures = read(&s.run_dir, "failures.csv");
    assert!(failures.contains("Erasure,stub-a,1,1"), "{failures}");
}

#[test]
fn score_without_rewrites_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 3);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let err = pipeline(&config, Arc::new(ScriptedChat::new())).cmd_score().unwrap_err();
    assert!(err.to_string().contains("probe rewrite"), "{err}");
    let err = pipeline(&config, Arc::new(ScriptedChat::new())).cmd_stats().unwrap_err();
    assert!(err.to_string().contains("probe score"), "{err}");
}

#[test]
fn stats_small_sample_uses_exact_method() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 5);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let p = pipeline(&config, Arc::new(ScriptedChat::new()));
    p.cmd_rewrite().unwrap();
    p.cmd_score().unwrap();
    let s = p.cmd_stats().unwrap();
    let stats = read(&s.run_dir, "stats.csv");
    let header: Vec<&str> = stats.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "method").unwrap();
    for line in stats.lines().skip(1) {
        assert_eq!(line.split(',').nth(col), Some("Exact"), "{line}");
    }
    assert_eq!(stats.lines().count(), 5);
}

#[test]
fn identical_rewrites_are_degenerate() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 4);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let mut chat = ScriptedChat::new();
    for t in &TARGETS[..4] {
        chat = chat
            .override_reply(t, true, &format!("Rewritten Sentence: {t} Said plainly."))
            .override_reply(t, false, &format!("Rewritten Sentence: {t} Said plainly."));
    }
    let p = pipeline(&config, Arc::new(chat));
    p.cmd_rewrite().unwrap();
    p.cmd_score().unwrap();
    let s = p.cmd_stats().unwrap();
    let mut r = csv::Reader::from_path(s.run_dir.join("stats.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let deg = headers.iter().position(|h| h == "degenerate").unwrap();
    let mean = headers.iter().position(|h| h == "mean_delta").unwrap();
    let p_col = headers.iter().position(|h| h == "p_value").unwrap();
    for row in r.records() {
        let row = row.unwrap();
        assert_eq!(&row[deg], "true");
        assert_eq!(row[mean].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[p_col].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn report_has_two_bars_per_chart_for_two_models() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6);
    let config = write_config(tmp.path(), &corpus, &["alpha", "beta"], "");
    let p = pipeline(&config, Arc::new(ScriptedChat::new()));
    p.cmd_rewrite().unwrap();
    let err = p.cmd_report().unwrap_err();
    assert!(err.to_string().contains("missing"));
    p.cmd_score().unwrap();
    p.cmd_stats().unwrap();
    let s = p.cmd_report().unwrap();
    for m in ["rouge1", "rougeL", "cosine", "polarity"] {
        let svg = read(&s.run_dir, &format!("charts/delta_{m}.svg"));
        assert_eq!(svg.matches("<rect x=").count(), 2, "{m}");
        assert!(svg.contains(">alpha<") && svg.contains(">beta<"));
    }
    let report = read(&s.run_dir, "report.md");
    assert!(report.contains("| Metric | Δ (NT−AUT) | p-value | 95% CI | r |"));
    let tokens = read(&s.run_dir, "token_delta.md");
    assert!(tokens.lines().nth(2).unwrap().contains("| rewritten |") || tokens.contains("| plain |"));
}

#[test]
fn report_reads_only_run_directory_files() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6);
    let config = write_config(tmp.path(), &corpus, &["alpha"], "");
    let p = pipeline(&config, Arc::new(ScriptedChat::new()));
    p.cmd_rewrite().unwrap();
    p.cmd_score().unwrap();
    let s = p.cmd_stats().unwrap();
    // Editing a stats file must show up in the report verbatim.
    let path = s.run_dir.join("per_model_deltas.csv");
    let edited = read(&s.run_dir, "per_model_deltas.csv").replace("alpha", "edited-model");
    fs::write(&path, edited).unwrap();
    let s = p.cmd_report().unwrap();
    assert!(read(&s.run_dir, "charts/delta_rouge1.svg").contains("edited-model"));
}

#[test]
fn groundtruth_single_member_teams_give_plain_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6);
    let profiles = tmp.path().join("profiles.csv");
    fs::write(
        &profiles,
        "annotator_id,team_id,aq,sata,iat\na1,t1,20,50,0.1\na2,t2,35,40,0.4\na3,t3,10,70,0.2\n",
    )
    .unwrap();
    let extra = format!("[groundtruth]\nprofiles = {:?}\n", profiles.display().to_string());
    let config = write_config(tmp.path(), &corpus, &["stub-a"], &extra);
    let s = pipeline(&config, Arc::new(ScriptedChat::new())).cmd_groundtruth().unwrap();
    assert!(s.ok());
    let records = probe_core::corpus::load_corpus(&corpus, probe_core::corpus::CorpusFormat::Csv).unwrap();
    let mut r = csv::Reader::from_path(s.run_dir.join("weighted_labels.csv")).unwrap();
    for (row, rec) in r.records().zip(&records) {
        let row = row.unwrap();
        let mean = rec.labels.values().map(|&l| l as f64).sum::<f64>() / rec.labels.len() as f64;
        assert_eq!(&row[0], rec.id);
        assert!((row[1].parse::<f64>().unwrap() - mean).abs() < 1e-6);
    }
}

#[test]
fn groundtruth_missing_weight_is_row_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 4);
    let profiles = tmp.path().join("profiles.csv");
    fs::write(&profiles, "annotator_id,team_id,aq,sata,iat\na1,t1,20,50,0.1\na2,t1,30,40,0.3\n").unwrap();
    let extra = format!("[groundtruth]\nprofiles = {:?}\n", profiles.display().to_string());
    let config = write_config(tmp.path(), &corpus, &["stub-a"], &extra);
    let s = pipeline(&config, Arc::new(ScriptedChat::new())).cmd_groundtruth().unwrap();
    assert_eq!(s.errors.len(), 4);
    assert!(s.errors[0].error.contains("a3"), "{}", s.errors[0].error);
}

#[test]
fn ingest_summarises_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 15);
    let config = write_config(tmp.path(), &corpus, &["stub-a"], "");
    let s = pipeline(&config, Arc::new(ScriptedChat::new())).cmd_ingest(5).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&read(&s.run_dir, "summary.json")).unwrap();
    assert_eq!(summary["records"], 15);
    assert_eq!(summary["annotators"], serde_json::json!(["a1", "a2", "a3"]));
    assert_eq!(summary["pairwise_kappa"]["a1|a3"], 1.0);
    let normalised = read(&s.run_dir, "corpus.jsonl");
    assert_eq!(normalised.lines().count(), 15);
}

fn qual_config(tmp: &Path) -> std::path::PathBuf {
    let corpus = write_corpus(tmp, 15);
    let extra = "conditions = [\"rewrite-autistic\", \"rewrite-nt\", \"cot\"]\n\n[qual]\ncoders = [\"coder-a\", \"coder-b\", \"coder-c\"]\nsynthesizer = \"synth\"\n\n";
    // top-level keys must precede tables
    let config = write_config(tmp, &corpus, &["coder-a", "coder-b", "coder-c", "synth"], "");
    let text = fs::read_to_string(&config).unwrap();
    let (head, tail) = text.split_once("[stats]").unwrap();
    let (cond, qual) = extra.split_once("\n\n").unwrap();
    fs::write(&config, format!("{head}{cond}\n\n[stats]{tail}\n{qual}")).unwrap();
    config
}

#[test]
fn qual_protocol_document_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = qual_config(tmp.path());
    let p = pipeline(&config, Arc::new(ScriptedChat::new()));
    p.cmd_rewrite().unwrap();
    let s = p.cmd_qual().unwrap();
    let qdir = s.run_dir.join("qual");
    let count = |suffix: &str| {
        fs::read_dir(&qdir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
            .count()
    };
    assert_eq!(count("_reflexivity.md"), 3);
    assert_eq!(count("_rewrite_analysis.md") + count("_reasoning_analysis.md"), 6);
    assert_eq!(count("_inductive_synthesis.md"), 1);
    // 4 models x 15 records of reasoning, each coded by 3 coders over 7 themes.
    let codes = read(&qdir, "theme_codes.csv");
    assert!(codes.lines().count() - 1 >= 15 * 7 * 3);
}
