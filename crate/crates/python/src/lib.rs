//! Python bindings for the rewrite-evaluation harness.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use probe_core::compliance::{self, RuleConfig};
use probe_core::config::{Overrides, PipelineConfig};
use probe_core::corpus::SentenceRecord;
use probe_core::pipeline::Pipeline;
use probe_core::prompts::{Persona, TemplateSet};
use probe_core::{ground_truth, metrics, stats};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "persona_probe")]
#[derive(Clone)]
pub struct Verdict {
    /// One of Compliant, Refusal, Erasure, MetaCommentary, HallucinationSuspect.
    pub class_name: String,
    pub extracted_content: String,
    pub matched_rules: Vec<String>,
}

#[pymethods]
impl Verdict {
    fn __repr__(&self) -> String {
        format!("Verdict({}, {:?})", self.class_name, self.extracted_content)
    }
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "persona_probe")]
#[derive(Clone)]
pub struct Wilcoxon {
    pub w_plus: f64,
    pub w_minus: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// "Exact" or "NormalApprox".
    pub method: String,
    pub n_nonzero: usize,
    pub n_zero: usize,
    pub degenerate: bool,
}

#[pymethods]
impl Wilcoxon {
    fn __repr__(&self) -> String {
        format!("Wilcoxon(p={:.6}, method={}, n={})", self.p_value, self.method, self.n_nonzero)
    }
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "persona_probe")]
#[derive(Clone)]
pub struct StageResult {
    pub run_id: String,
    pub run_dir: String,
    pub written: Vec<String>,
    /// (record_id, model_id, condition, error) per failed record.
    pub errors: Vec<(String, String, String, String)>,
    pub notes: Vec<String>,
}

#[pymethods]
impl StageResult {
    #[getter]
    fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[pyfunction]
fn rouge1_f1(reference: &str, candidate: &str) -> f64 {
    metrics::rouge1_f1(reference, candidate)
}

#[pyfunction]
fn rouge_l_f1(reference: &str, candidate: &str) -> f64 {
    metrics::rouge_l_f1(reference, candidate)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    metrics::tokenize(text)
}

/// Classify a raw rewrite against its source sentence with the default rules.
#[pyfunction]
fn classify(raw: &str, source: &str) -> PyResult<Verdict> {
    let v = compliance::classify(raw, source, &RuleConfig::default()).map_err(value_err)?;
    Ok(Verdict {
        class_name: v.class.to_string(),
        extracted_content: v.extracted_content,
        matched_rules: v.matched_rules,
    })
}

#[pyfunction]
fn extract_content(raw: &str) -> String {
    compliance::extract_content(raw, &RuleConfig::default())
}

#[pyfunction]
fn wilcoxon(deltas: Vec<f64>) -> PyResult<Wilcoxon> {
    let r = stats::wilcoxon_signed_rank(&deltas).map_err(value_err)?;
    Ok(Wilcoxon {
        w_plus: r.w_plus,
        w_minus: r.w_minus,
        statistic: r.statistic,
        p_value: r.p_value,
        method: r.method.to_string(),
        n_nonzero: r.n_nonzero,
        n_zero: r.n_zero,
        degenerate: r.degenerate,
    })
}

#[pyfunction]
fn rank_biserial(deltas: Vec<f64>) -> PyResult<f64> {
    stats::rank_biserial(&deltas).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (deltas, resamples = stats::DEFAULT_RESAMPLES, level = stats::DEFAULT_LEVEL, seed = 0))]
fn bootstrap_ci(deltas: Vec<f64>, resamples: usize, level: f64, seed: u64) -> PyResult<(f64, f64)> {
    stats::bootstrap_ci(&deltas, resamples, level, seed).map_err(value_err)
}

#[pyfunction]
fn pairwise_kappa(a: Vec<u8>, b: Vec<u8>) -> PyResult<f64> {
    probe_core::corpus::pairwise_kappa(&a, &b).map_err(value_err)
}

/// Weighted label for one record: returns (y_hat, hard_label).
#[pyfunction]
#[pyo3(signature = (labels, weights, threshold = ground_truth::DEFAULT_THRESHOLD))]
fn weighted_label(
    labels: BTreeMap<String, u8>,
    weights: BTreeMap<String, f64>,
    threshold: f64,
) -> PyResult<(f64, u8)> {
    let l = ground_truth::weighted_label("record", &labels, &weights, threshold).map_err(value_err)?;
    Ok((l.y_hat, l.hard_label))
}

/// Render the autistic and NT rewrite prompts for one sentence and return
/// their user messages.
#[pyfunction]
#[pyo3(signature = (target, preceding = None, following = None, model = "model"))]
fn rewrite_prompts(
    target: &str,
    preceding: Option<&str>,
    following: Option<&str>,
    model: &str,
) -> PyResult<(String, String)> {
    let record = SentenceRecord::new("r", target).with_context(preceding, following);
    let t = TemplateSet::builtin();
    let render = |p: Persona| {
        t.render(&record, p.condition(), Some(p), None, model)
            .map(|r| r.user)
            .map_err(value_err)
    };
    Ok((render(Persona::Autistic)?, render(Persona::Neurotypical)?))
}

/// Run one pipeline stage ("rewrite", "score", "stats", "report", "groundtruth",
/// "qual" or "ingest") from a config file.
#[pyfunction]
#[pyo3(signature = (stage, config, models = Vec::new(), seed = None, out = None))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    config: PathBuf,
    models: Vec<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<StageResult> {
    let overrides = Overrides {
        models,
        seed,
        out_dir: out,
    };
    let cfg = PipelineConfig::load(&config, &overrides).map_err(value_err)?;
    let pipeline = Pipeline::new(cfg);
    let run: fn(&Pipeline) -> _ = match stage {
        "rewrite" => Pipeline::cmd_rewrite,
        "score" => Pipeline::cmd_score,
        "stats" => Pipeline::cmd_stats,
        "report" => Pipeline::cmd_report,
        "groundtruth" => Pipeline::cmd_groundtruth,
        "qual" => Pipeline::cmd_qual,
        "ingest" => |p| p.cmd_ingest(5),
        other => return Err(value_err(format!("unknown stage {other:?}"))),
    };
    let summary = py
        .detach(move || run(&pipeline))
        .map_err(|e| PyRuntimeError::new_err(format!("{e:#}")))?;
    Ok(StageResult {
        run_id: summary.run_id,
        run_dir: summary.run_dir.display().to_string(),
        written: summary.written,
        errors: summary
            .errors
            .into_iter()
            .map(|e| (e.record_id, e.model_id, e.condition, e.error))
            .collect(),
        notes: summary.notes,
    })
}

#[pymodule]
fn persona_probe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Verdict>()?;
    m.add_class::<Wilcoxon>()?;
    m.add_class::<StageResult>()?;
    m.add_function(wrap_pyfunction!(rouge1_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l_f1, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(extract_content, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(rank_biserial, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_label, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
