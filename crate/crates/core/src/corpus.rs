//! Sentence corpus loading, persistence, agreement statistics and run manifests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{canonical_digest, sha256_hex};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error at row {row}: {reason}")]
    Schema { row: usize, reason: String },
    #[error("validation error at row {row} (id {id:?}): {reason}")]
    Validation { row: usize, id: String, reason: String },
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { row: usize, id: String },
    #[error("unsupported corpus format {0:?}")]
    UnknownFormat(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum KappaError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two items are required, got {0}")]
    TooShort(usize),
    #[error("label {0} is not binary")]
    NonBinary(u8),
    #[error("kappa is undefined: chance agreement is 1")]
    Undefined,
}

#[derive(Debug, Error, PartialEq)]
pub enum StratifyError {
    #[error("need at least {needed} records for three bands, got {available}")]
    Insufficient { needed: usize, available: usize },
    #[error("band size must be positive")]
    ZeroBand,
    #[error("record {0:?} has no agreement score")]
    MissingScore(String),
}

/// Prompting / rewrite condition a model was run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "cot")]
    CoT,
    #[serde(rename = "icl-a")]
    IclA,
    #[serde(rename = "icl-b")]
    IclB,
    #[serde(rename = "persona-ifl")]
    PersonaIfl,
    #[serde(rename = "persona-pfl")]
    PersonaPfl,
    #[serde(rename = "rewrite-autistic")]
    RewriteAutistic,
    #[serde(rename = "rewrite-nt")]
    RewriteNt,
}

impl Condition {
    pub const ALL: [Condition; 8] = [
        Condition::ZeroShot,
        Condition::CoT,
        Condition::IclA,
        Condition::IclB,
        Condition::PersonaIfl,
        Condition::PersonaPfl,
        Condition::RewriteAutistic,
        Condition::RewriteNt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::ZeroShot => "zero-shot",
            Condition::CoT => "cot",
            Condition::IclA => "icl-a",
            Condition::IclB => "icl-b",
            Condition::PersonaIfl => "persona-ifl",
            Condition::PersonaPfl => "persona-pfl",
            Condition::RewriteAutistic => "rewrite-autistic",
            Condition::RewriteNt => "rewrite-nt",
        }
    }

    pub fn is_rewrite(self) -> bool {
        matches!(self, Condition::RewriteAutistic | Condition::RewriteNt)
    }

    pub fn is_icl(self) -> bool {
        matches!(self, Condition::IclA | Condition::IclB)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    #[serde(default)]
    pub preceding: Option<String>,
    pub target: String,
    #[serde(default)]
    pub following: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub justifications: BTreeMap<String, String>,
    /// Per-sentence agreement score used for stratification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
}

impl SentenceRecord {
    pub fn new(id: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            preceding: None,
            target: target.into(),
            following: None,
            labels: BTreeMap::new(),
            justifications: BTreeMap::new(),
            agreement: None,
        }
    }

    pub fn with_context(mut self, preceding: Option<&str>, following: Option<&str>) -> Self {
        self.preceding = normalize_optional(preceding);
        self.following = normalize_optional(following);
        self
    }

    fn validate(&self, row: usize) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::Validation {
            row,
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(CorpusError::Schema {
                row,
                reason: "missing required field `id`".into(),
            });
        }
        if self.target.trim().is_empty() {
            return Err(invalid("target is empty".into()));
        }
        if let Some((annotator, value)) = self.labels.iter().find(|(_, v)| **v > 1) {
            return Err(invalid(format!(
                "label {value} from annotator {annotator:?} is not 0 or 1"
            )));
        }
        Ok(())
    }
}

fn normalize_optional(value: Option<&str>) -> Option<String> {
    value
        .filter(|v| !v.trim().is_empty())
        .map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Ok(CorpusFormat::Csv),
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(
                other.unwrap_or_default().to_string(),
            )),
        }
    }
}

const CORE_COLUMNS: [&str; 4] = ["id", "preceding", "target", "following"];
const AGREEMENT_COLUMN: &str = "agreement";
const JUSTIFICATION_PREFIX: &str = "justification_";

enum Column {
    Id,
    Preceding,
    Target,
    Following,
    Agreement,
    Label(String),
    Justification(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load a corpus, enforcing record invariants and id uniqueness.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<SentenceRecord>, CorpusError> {
    let records = match format {
        CorpusFormat::Csv => read_csv(path)?,
        CorpusFormat::Jsonl => read_jsonl(path)?,
    };
    let mut seen = HashSet::new();
    for (idx, record) in records.iter().enumerate() {
        let row = idx + 1;
        record.validate(row)?;
        if !seen.insert(record.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                row,
                id: record.id.clone(),
            });
        }
    }
    log::info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

fn read_csv(path: &Path) -> Result<Vec<SentenceRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    let columns: Vec<Column> = headers
        .iter()
        .map(|h| match h.trim() {
            "id" => Column::Id,
            "preceding" => Column::Preceding,
            "target" => Column::Target,
            "following" => Column::Following,
            AGREEMENT_COLUMN => Column::Agreement,
            other => match other.strip_prefix(JUSTIFICATION_PREFIX) {
                Some(annotator) => Column::Justification(annotator.to_string()),
                None => Column::Label(other.to_string()),
            },
        })
        .collect();
    for required in ["id", "target"] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(CorpusError::Schema {
                row: 0,
                reason: format!("missing required column `{required}`"),
            });
        }
    }

    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row?;
        let mut record = SentenceRecord::new("", "");
        for (column, cell) in columns.iter().zip(row.iter()) {
            match column {
                Column::Id => record.id = cell.trim().to_string(),
                Column::Preceding => record.preceding = normalize_optional(Some(cell)),
                Column::Target => record.target = cell.to_string(),
                Column::Following => record.following = normalize_optional(Some(cell)),
                Column::Agreement => {
                    if !cell.trim().is_empty() {
                        let score = cell.trim().parse::<f64>().map_err(|_| CorpusError::Schema {
                            row: row_no,
                            reason: format!("field `agreement` is not a number: {cell:?}"),
                        })?;
                        record.agreement = Some(score);
                    }
                }
                Column::Label(annotator) => {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        continue;
                    }
                    let label = match cell {
                        "0" => 0,
                        "1" => 1,
                        _ => {
                            return Err(CorpusError::Validation {
                                row: row_no,
                                id: record.id.clone(),
                                reason: format!(
                                    "label {cell:?} from annotator {annotator:?} is not 0 or 1"
                                ),
                            })
                        }
                    };
                    record.labels.insert(annotator.clone(), label);
                }
                Column::Justification(annotator) => {
                    if !cell.trim().is_empty() {
                        record
                            .justifications
                            .insert(annotator.clone(), cell.to_string());
                    }
                }
            }
        }
        if record.id.is_empty() {
            return Err(CorpusError::Schema {
                row: row_no,
                reason: "missing required field `id`".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

fn read_jsonl(path: &Path) -> Result<Vec<SentenceRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
                row,
                reason: e.to_string(),
            })?;
        for required in ["id", "target"] {
            if value.get(required).is_none() {
                return Err(CorpusError::Schema {
                    row,
                    reason: format!("missing required field `{required}`"),
                });
            }
        }
        let mut record: SentenceRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::Schema {
                row,
                reason: e.to_string(),
            })?;
        record.preceding = normalize_optional(record.preceding.as_deref());
        record.following = normalize_optional(record.following.as_deref());
        out.push(record);
    }
    Ok(out)
}

/// Persist a corpus in the given format. Label columns are the sorted union
/// of annotators across all records.
pub fn save_corpus(
    records: &[SentenceRecord],
    path: &Path,
    format: CorpusFormat,
) -> Result<(), CorpusError> {
    match format {
        CorpusFormat::Jsonl => {
            let mut buf = Vec::new();
            for record in records {
                serde_json::to_writer(&mut buf, record).expect("record serializes");
                buf.push(b'\n');
            }
            fs::write(path, buf).map_err(io_err(path))
        }
        CorpusFormat::Csv => {
            let annotators: Vec<&String> = records
                .iter()
                .flat_map(|r| r.labels.keys())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let justifiers: Vec<&String> = records
                .iter()
                .flat_map(|r| r.justifications.keys())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let has_agreement = records.iter().any(|r| r.agreement.is_some());

            let mut writer = csv::Writer::from_path(path)?;
            let mut header: Vec<String> = CORE_COLUMNS.iter().map(|s| s.to_string()).collect();
            if has_agreement {
                header.push(AGREEMENT_COLUMN.into());
            }
            header.extend(annotators.iter().map(|a| a.to_string()));
            header.extend(justifiers.iter().map(|a| format!("{JUSTIFICATION_PREFIX}{a}")));
            writer.write_record(&header)?;
            for r in records {
                let mut row = vec![
                    r.id.clone(),
                    r.preceding.clone().unwrap_or_default(),
                    r.target.clone(),
                    r.following.clone().unwrap_or_default(),
                ];
                if has_agreement {
                    row.push(r.agreement.map(|a| a.to_string()).unwrap_or_default());
                }
                for a in &annotators {
                    row.push(r.labels.get(*a).map(|l| l.to_string()).unwrap_or_default());
                }
                for a in &justifiers {
                    row.push(r.justifications.get(*a).cloned().unwrap_or_default());
                }
                writer.write_record(&row)?;
            }
            writer.flush().map_err(io_err(path))?;
            Ok(())
        }
    }
}

/// Digest of the canonical JSON form of the records. Any field change moves it.
pub fn corpus_hash(records: &[SentenceRecord]) -> String {
    canonical_digest(records)
}

/// Cohen's kappa for two binary raters.
pub fn pairwise_kappa(a: &[u8], b: &[u8]) -> Result<f64, KappaError> {
    if a.len() != b.len() {
        return Err(KappaError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(KappaError::TooShort(a.len()));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&l| l > 1) {
        return Err(KappaError::NonBinary(bad));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let a_pos = a.iter().filter(|&&l| l == 1).count() as f64 / n;
    let b_pos = b.iter().filter(|&&l| l == 1).count() as f64 / n;
    let p_o = agree / n;
    let p_e = a_pos * b_pos + (1.0 - a_pos) * (1.0 - b_pos);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(KappaError::Undefined);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Three equally sized agreement bands.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementBands {
    pub highest: Vec<SentenceRecord>,
    pub median: Vec<SentenceRecord>,
    pub lowest: Vec<SentenceRecord>,
}

/// Pick `band_size` records at the top, middle and bottom of the agreement ranking.
///
/// Records are ordered by score descending, ties broken by id ascending. The
/// median band is the window of `band_size` records centred on the middle of
/// that ordering; with `3 * band_size <= n` it never overlaps the outer bands.
pub fn stratify_by_agreement(
    records: &[SentenceRecord],
    scores: &HashMap<String, f64>,
    band_size: usize,
) -> Result<AgreementBands, StratifyError> {
    if band_size == 0 {
        return Err(StratifyError::ZeroBand);
    }
    let needed = 3 * band_size;
    if records.len() < needed {
        return Err(StratifyError::Insufficient {
            needed,
            available: records.len(),
        });
    }
    let mut ranked: Vec<(f64, &SentenceRecord)> = records
        .iter()
        .map(|r| {
            scores
                .get(&r.id)
                .map(|s| (*s, r))
                .ok_or_else(|| StratifyError::MissingScore(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    ranked.sort_by(|(sa, ra), (sb, rb)| sb.total_cmp(sa).then_with(|| ra.id.cmp(&rb.id)));

    let n = ranked.len();
    let mid_start = (n - band_size) / 2;
    let take = |range: std::ops::Range<usize>| -> Vec<SentenceRecord> {
        ranked[range].iter().map(|(_, r)| (*r).clone()).collect()
    };
    Ok(AgreementBands {
        highest: take(0..band_size),
        median: take(mid_start..mid_start + band_size),
        lowest: take(n - band_size..n),
    })
}

/// Effective sampling settings recorded alongside each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_hash: String,
    pub config_hash: String,
    pub model_id: String,
    pub condition: Condition,
    pub timestamp: DateTime<Utc>,
    pub sampling: SamplingRecord,
}

/// Contents of `runs/<run-id>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub run_id: String,
    pub corpus_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub runs: Vec<RunManifest>,
}

/// Deterministic run id for a (corpus, configuration) combination.
pub fn run_id(corpus_hash: &str, config_hash: &str) -> String {
    sha256_hex(format!("{corpus_hash}:{config_hash}").as_bytes())[..16].to_string()
}

pub fn manifest_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("runs").join(run_id).join("manifest.json")
}

/// Append run entries to the manifest. Entries already present for the same
/// (model, condition) are kept as they are.
pub fn append_manifest(path: &Path, mut file: ManifestFile) -> Result<ManifestFile, CorpusError> {
    if path.exists() {
        let existing: ManifestFile = serde_json::from_slice(&fs::read(path).map_err(io_err(path))?)
            .map_err(|e| CorpusError::Schema {
                row: 0,
                reason: format!("corrupt manifest {}: {e}", path.display()),
            })?;
        let mut merged = existing.runs;
        for entry in file.runs.drain(..) {
            if !merged
                .iter()
                .any(|m| m.model_id == entry.model_id && m.condition == entry.condition)
            {
                merged.push(entry);
            }
        }
        file.runs = merged;
    }
    let bytes = serde_json::to_vec_pretty(&file).expect("manifest serializes");
    write_atomic(path, &bytes).map_err(io_err(path))?;
    Ok(file)
}

/// Write a file through a temporary sibling and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
