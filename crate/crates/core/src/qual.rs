//! Multi-agent qualitative coding protocol.
//!
//! Each coder keeps two conversations: an inductive one (reflexivity, then
//! the rewrite and reasoning analyses) and a deductive one (framework
//! review, then per-document coding). Ordering is enforced by
//! [`QualSession`], which refuses any call whose prerequisite has not run.
//!
//! Machine-readable results come from fenced blocks of pipe-delimited rows
//! that agents are asked to append. Raw text is always persisted, and
//! anything that fails to parse is kept with a warning instead of dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::write_atomic;
use crate::gateway::{ChatGateway, ChatJob, ChatMessage, GatewayError, ModelConfig};
use crate::prompts::{AgentPhase, PromptError, TemplateSet};

#[derive(Debug, Error)]
pub enum QualError {
    #[error("protocol order violated by {agent}: {attempted} requires {requires}")]
    Protocol {
        agent: String,
        attempted: &'static str,
        requires: &'static str,
    },
    #[error("agent {agent} has role {actual:?}, expected {expected:?}")]
    Role {
        agent: String,
        expected: AgentRole,
        actual: AgentRole,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("agent {agent}: {source}")]
    Gateway {
        agent: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid theme code: {0}")]
    InvalidCode(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentRole {
    InductiveCoder,
    DeductiveCoder,
    Synthesizer,
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub agent_id: String,
    pub model: Arc<ModelConfig>,
    pub role: AgentRole,
}

impl AgentSpec {
    pub fn new(agent_id: impl Into<String>, model: Arc<ModelConfig>, role: AgentRole) -> Self {
        Self {
            agent_id: agent_id.into(),
            model,
            role,
        }
    }

    fn expect_role(&self, expected: AgentRole) -> Result<(), QualError> {
        if self.role == expected {
            Ok(())
        } else {
            Err(QualError::Role {
                agent: self.agent_id.clone(),
                expected,
                actual: self.role,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DocKind {
    Reflexivity,
    RewriteAnalysis,
    ReasoningAnalysis,
    InductiveSynthesis,
    /// The agent's confirmation of the deductive framework.
    FrameworkReview,
    /// Concatenated per-document coding tables.
    DeductiveCoding,
    DeductiveSynthesis,
    CrossSynthesis,
}

impl DocKind {
    pub fn file_suffix(self) -> &'static str {
        match self {
            DocKind::Reflexivity => "reflexivity",
            DocKind::RewriteAnalysis => "rewrite_analysis",
            DocKind::ReasoningAnalysis => "reasoning_analysis",
            DocKind::InductiveSynthesis => "inductive_synthesis",
            DocKind::FrameworkReview => "framework_review",
            DocKind::DeductiveCoding => "deductive_coding",
            DocKind::DeductiveSynthesis => "deductive_synthesis",
            DocKind::CrossSynthesis => "cross_synthesis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub category: String,
    pub abbrev: String,
    pub definition: String,
    pub example: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Theme {
    Focus,
    Identity,
    Impact,
    Intent,
    Stereotypes,
    Tone,
    Wording,
    Emergent,
}

impl Theme {
    /// The seven framework themes, excluding Emergent.
    pub const FRAMEWORK: [Theme; 7] = [
        Theme::Focus,
        Theme::Identity,
        Theme::Impact,
        Theme::Intent,
        Theme::Stereotypes,
        Theme::Tone,
        Theme::Wording,
    ];
}

impl fmt::Display for Theme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Theme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_lowercase();
        if lower.starts_with("emergent") {
            return Ok(Theme::Emergent);
        }
        Theme::FRAMEWORK
            .into_iter()
            .find(|t| t.to_string().to_lowercase() == lower)
            .ok_or_else(|| format!("unknown theme {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThemeStatus {
    Present,
    NotPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl FromStr for Confidence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "high" => Ok(Confidence::High),
            "medium" => Ok(Confidence::Medium),
            "low" => Ok(Confidence::Low),
            _ => Err(format!("unknown confidence {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeCode {
    pub document_id: String,
    pub theme: Theme,
    pub status: ThemeStatus,
    pub quote: Option<String>,
    pub code_label: Option<String>,
    pub confidence: Option<Confidence>,
}

impl ThemeCode {
    pub fn present(
        document_id: &str,
        theme: Theme,
        quote: &str,
        code_label: &str,
        confidence: Confidence,
    ) -> Result<Self, QualError> {
        if quote.trim().is_empty() || code_label.trim().is_empty() {
            return Err(QualError::InvalidCode(format!(
                "{theme} on {document_id}: Present needs a quote and a code label"
            )));
        }
        Ok(Self {
            document_id: document_id.into(),
            theme,
            status: ThemeStatus::Present,
            quote: Some(quote.trim().into()),
            code_label: Some(code_label.trim().into()),
            confidence: Some(confidence),
        })
    }

    pub fn not_present(document_id: &str, theme: Theme) -> Self {
        Self {
            document_id: document_id.into(),
            theme,
            status: ThemeStatus::NotPresent,
            quote: None,
            code_label: None,
            confidence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "rows", rename_all = "snake_case")]
pub enum ParsedPayload {
    Codebook(Vec<CodebookEntry>),
    ThemeCodes(Vec<ThemeCode>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDocument {
    pub agent_id: String,
    pub doc_kind: DocKind,
    pub raw_text: String,
    pub parsed: Option<ParsedPayload>,
    pub warnings: Vec<String>,
}

impl AnalysisDocument {
    fn raw(agent: &str, kind: DocKind, raw_text: String) -> Self {
        Self {
            agent_id: agent.into(),
            doc_kind: kind,
            raw_text,
            parsed: None,
            warnings: Vec::new(),
        }
    }

    pub fn codebook(&self) -> Option<&[CodebookEntry]> {
        match &self.parsed {
            Some(ParsedPayload::Codebook(c)) => Some(c),
            _ => None,
        }
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.agent_id, self.doc_kind.file_suffix())
    }
}

/// One unit of source material handed to coders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub id: String,
    pub model_id: String,
    pub text: String,
}

pub const CODEBOOK_TAG: &str = "codebook";
pub const THEMES_TAG: &str = "themes";

pub const CODEBOOK_FOOTER: &str = "\n\nFormatting requirement: after your analysis, repeat the final codebook inside a fenced block opened with ```codebook and closed with ```. Write one category per line as: category | abbreviation | definition | verbatim example";

pub const THEMES_FOOTER: &str = "\n\nFormatting requirement: put the table inside a fenced block opened with ```themes and closed with ```. Write one row per theme as: theme | Present or Not Present | verbatim quote | code label | High, Medium or Low. Leave the last three cells empty for Not Present rows. Use EMERGENT as the theme name for emergent patterns.";

/// Rows of the last fenced block opened with ```` ```tag ````.
pub fn fenced_block<'a>(text: &'a str, tag: &str) -> Option<Vec<&'a str>> {
    let mut found = None;
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let t = line.trim();
        match &mut current {
            Some(rows) => {
                if t.starts_with("```") {
                    found = current.take();
                } else {
                    rows.push(line);
                }
            }
            None => {
                if let Some(rest) = t.strip_prefix("```") {
                    if rest.trim().eq_ignore_ascii_case(tag) {
                        current = Some(Vec::new());
                    }
                }
            }
        }
    }
    found
}

fn split_row(line: &str) -> Option<Vec<String>> {
    let t = line.trim();
    if t.is_empty() || t.chars().all(|c| "-:| ".contains(c)) {
        return None;
    }
    let t = t.strip_prefix('|').unwrap_or(t);
    let t = t.strip_suffix('|').unwrap_or(t);
    Some(t.split('|').map(|c| c.trim().to_string()).collect())
}

fn is_blank_cell(c: &str) -> bool {
    matches!(c.trim().to_lowercase().as_str(), "" | "-" | "—" | "n/a" | "na" | "none")
}

/// Parse a codebook block. Duplicate abbreviations are kept with a numeric
/// suffix (`DF`, `DF-2`, ...) and reported as warnings.
pub fn parse_codebook(text: &str) -> (Option<Vec<CodebookEntry>>, Vec<String>) {
    let mut warnings = Vec::new();
    let Some(rows) = fenced_block(text, CODEBOOK_TAG) else {
        warnings.push("no ```codebook block found; raw text retained".to_string());
        return (None, warnings);
    };
    let mut entries: Vec<CodebookEntry> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, line) in rows.iter().enumerate() {
        let Some(cells) = split_row(line) else { continue };
        if cells[0].eq_ignore_ascii_case("category") {
            continue;
        }
        if cells.len() != 4 || cells.iter().any(|c| c.is_empty()) {
            warnings.push(format!("codebook row {} rejected: expected 4 non-empty cells", i + 1));
            continue;
        }
        let mut abbrev = cells[1].clone();
        if seen.contains(&abbrev) {
            let base = abbrev.clone();
            let mut k = 2;
            while seen.contains(&format!("{base}-{k}")) {
                k += 1;
            }
            abbrev = format!("{base}-{k}");
            warnings.push(format!("duplicate abbreviation {base} renamed to {abbrev}"));
        }
        seen.insert(abbrev.clone());
        entries.push(CodebookEntry {
            category: cells[0].clone(),
            abbrev,
            definition: cells[2].clone(),
            example: cells[3].clone(),
        });
    }
    if entries.is_empty() {
        warnings.push("codebook block contained no valid rows".to_string());
        return (None, warnings);
    }
    (Some(entries), warnings)
}

fn parse_status(cell: &str) -> Option<ThemeStatus> {
    let squashed: String = cell
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    match squashed.as_str() {
        "present" | "yes" => Some(ThemeStatus::Present),
        "notpresent" | "absent" | "no" => Some(ThemeStatus::NotPresent),
        _ => None,
    }
}

/// Parse a theme-coding block for one document. Rows that break the
/// Present/NotPresent invariant are rejected with a warning.
pub fn parse_theme_codes(document_id: &str, text: &str) -> (Option<Vec<ThemeCode>>, Vec<String>) {
    let mut warnings = Vec::new();
    let Some(rows) = fenced_block(text, THEMES_TAG) else {
        warnings.push(format!("{document_id}: no ```themes block found; raw text retained"));
        return (None, warnings);
    };
    let mut codes: Vec<ThemeCode> = Vec::new();
    for (i, line) in rows.iter().enumerate() {
        let Some(mut cells) = split_row(line) else { continue };
        if cells[0].eq_ignore_ascii_case("theme") {
            continue;
        }
        let reject = |why: String| format!("{document_id} row {}: rejected, {why}", i + 1);
        cells.resize(5.max(cells.len()), String::new());
        if cells.len() > 5 {
            warnings.push(reject(format!("expected 5 cells, got {}", cells.len())));
            continue;
        }
        let theme = match cells[0].parse::<Theme>() {
            Ok(t) => t,
            Err(e) => {
                warnings.push(reject(e));
                continue;
            }
        };
        let Some(status) = parse_status(&cells[1]) else {
            warnings.push(reject(format!("unknown status {:?}", cells[1])));
            continue;
        };
        let code = match status {
            ThemeStatus::Present => {
                if is_blank_cell(&cells[2]) {
                    warnings.push(reject(format!("{theme} marked Present without a quote")));
                    continue;
                }
                if is_blank_cell(&cells[3]) {
                    warnings.push(reject(format!("{theme} marked Present without a code label")));
                    continue;
                }
                let confidence = match cells[4].parse::<Confidence>() {
                    Ok(c) => c,
                    Err(e) => {
                        warnings.push(reject(e));
                        continue;
                    }
                };
                ThemeCode::present(document_id, theme, &cells[2], &cells[3], confidence)
                    .expect("cells checked above")
            }
            ThemeStatus::NotPresent => {
                if !cells[2..].iter().all(|c| is_blank_cell(c)) {
                    warnings.push(reject(format!("{theme} marked Not Present but carries evidence")));
                    continue;
                }
                ThemeCode::not_present(document_id, theme)
            }
        };
        if theme != Theme::Emergent && codes.iter().any(|c| c.theme == theme) {
            warnings.push(reject(format!("{theme} coded twice")));
            continue;
        }
        codes.push(code);
    }
    for theme in Theme::FRAMEWORK {
        if !codes.iter().any(|c| c.theme == theme) {
            warnings.push(format!("{document_id}: theme {theme} missing from coding table"));
        }
    }
    (Some(codes), warnings)
}

/// Group items into `sets` deep-read sets of `set_size`, cycling across
/// models so consecutive sets come from different LLMs where possible.
pub fn deep_read_slice(items: &[DataItem], sets: usize, set_size: usize) -> Vec<Vec<DataItem>> {
    let mut by_model: BTreeMap<&str, Vec<&DataItem>> = BTreeMap::new();
    for item in items {
        by_model.entry(&item.model_id).or_default().push(item);
    }
    let models: Vec<&str> = by_model.keys().copied().collect();
    let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    let mut idle_rounds = 0;
    let mut m = 0;
    while out.len() < sets && !models.is_empty() && idle_rounds < models.len() {
        let model = models[m % models.len()];
        m += 1;
        let pos = cursor.entry(model).or_default();
        let pool = &by_model[model];
        if *pos >= pool.len() {
            idle_rounds += 1;
            continue;
        }
        idle_rounds = 0;
        let end = (*pos + set_size).min(pool.len());
        out.push(pool[*pos..end].iter().map(|d| (*d).clone()).collect());
        *pos = end;
    }
    out
}

pub fn format_sets(sets: &[Vec<DataItem>]) -> String {
    let mut s = String::new();
    for (i, set) in sets.iter().enumerate() {
        let model = set.first().map(|d| d.model_id.as_str()).unwrap_or("");
        s.push_str(&format!("Set {} (LLM: {model})\n", i + 1));
        for item in set {
            s.push_str(&format!("[{}]\n{}\n", item.id, item.text.trim_end()));
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

/// The `=== name ===` blocks handed to a synthesizer, one per agent in
/// first-appearance order.
pub fn agent_blocks(documents: &[AnalysisDocument]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut by_agent: BTreeMap<&str, Vec<&AnalysisDocument>> = BTreeMap::new();
    for d in documents {
        if !by_agent.contains_key(d.agent_id.as_str()) {
            order.push(&d.agent_id);
        }
        by_agent.entry(&d.agent_id).or_default().push(d);
    }
    order
        .iter()
        .map(|agent| {
            let docs: Vec<String> = by_agent[agent]
                .iter()
                .map(|d| format!("[{}]\n{}", d.file_stem(), d.raw_text.trim_end()))
                .collect();
            format!("=== {agent} ===\n{}", docs.join("\n\n"))
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisPhase {
    Inductive,
    Deductive,
}

#[derive(Debug, Default, Clone)]
struct AgentState {
    reflexivity: bool,
    rewrite: bool,
    reasoning: bool,
    reviewed: bool,
    coded: bool,
    within: bool,
}

/// Drives one qualitative run and enforces protocol order.
pub struct QualSession<'a> {
    gateway: &'a ChatGateway,
    templates: &'a TemplateSet,
    pub structured_footer: bool,
    state: BTreeMap<String, AgentState>,
    inductive: BTreeMap<String, Vec<ChatMessage>>,
    deductive: BTreeMap<String, Vec<ChatMessage>>,
    coding_turns: BTreeMap<String, Vec<ChatMessage>>,
}

impl<'a> QualSession<'a> {
    pub fn new(gateway: &'a ChatGateway, templates: &'a TemplateSet) -> Self {
        Self {
            gateway,
            templates,
            structured_footer: true,
            state: BTreeMap::new(),
            inductive: BTreeMap::new(),
            deductive: BTreeMap::new(),
            coding_turns: BTreeMap::new(),
        }
    }

    fn call(&self, agent: &AgentSpec, messages: &[ChatMessage]) -> Result<String, QualError> {
        self.gateway
            .complete(&agent.model, messages, 0)
            .map_err(|source| QualError::Gateway {
                agent: agent.agent_id.clone(),
                source,
            })
    }

    fn render(
        &self,
        phase: AgentPhase,
        agent: &AgentSpec,
        extra: &[(&'static str, String)],
    ) -> Result<(String, String), QualError> {
        let mut vars: BTreeMap<&str, String> = BTreeMap::new();
        vars.insert("agent_name", agent.agent_id.clone());
        for (k, v) in extra {
            vars.insert(k, v.clone());
        }
        Ok(self.templates.render_phase(phase, &vars)?)
    }

    fn footer(&self, footer: &'static str) -> &'static str {
        if self.structured_footer {
            footer
        } else {
            ""
        }
    }

    fn st(&mut self, agent: &str) -> &mut AgentState {
        self.state.entry(agent.to_string()).or_default()
    }

    pub fn run_reflexivity(&mut self, agent: &AgentSpec) -> Result<AnalysisDocument, QualError> {
        agent.expect_role(AgentRole::InductiveCoder)?;
        let (system, user) = self.render(AgentPhase::Reflexivity, agent, &[])?;
        let mut history = vec![ChatMessage::system(system), ChatMessage::user(user)];
        let text = self.call(agent, &history)?;
        history.push(ChatMessage::assistant(text.clone()));
        self.inductive.insert(agent.agent_id.clone(), history);
        self.st(&agent.agent_id).reflexivity = true;
        Ok(AnalysisDocument::raw(&agent.agent_id, DocKind::Reflexivity, text))
    }

    pub fn run_inductive(
        &mut self,
        agent: &AgentSpec,
        sets: &[Vec<DataItem>],
        kind: DocKind,
    ) -> Result<AnalysisDocument, QualError> {
        agent.expect_role(AgentRole::InductiveCoder)?;
        let phase = match kind {
            DocKind::RewriteAnalysis => AgentPhase::InductiveRewrite,
            DocKind::ReasoningAnalysis => AgentPhase::InductiveReasoning,
            other => {
                return Err(QualError::Usage(format!("{other:?} is not an inductive analysis")))
            }
        };
        if !self.st(&agent.agent_id).reflexivity {
            return Err(QualError::Protocol {
                agent: agent.agent_id.clone(),
                attempted: kind.file_suffix(),
                requires: "reflexivity",
            });
        }
        let (_, user) = self.render(phase, agent, &[("data", format_sets(sets))])?;
        let mut history = self.inductive[&agent.agent_id].clone();
        history.push(ChatMessage::user(format!("{user}{}", self.footer(CODEBOOK_FOOTER))));
        let text = self.call(agent, &history)?;
        history.push(ChatMessage::assistant(text.clone()));
        self.inductive.insert(agent.agent_id.clone(), history);
        let st = self.st(&agent.agent_id);
        match kind {
            DocKind::RewriteAnalysis => st.rewrite = true,
            _ => st.reasoning = true,
        }
        let mut doc = AnalysisDocument::raw(&agent.agent_id, kind, text);
        let (codebook, warnings) = parse_codebook(&doc.raw_text);
        doc.parsed = codebook.map(ParsedPayload::Codebook);
        doc.warnings = warnings;
        Ok(doc)
    }

    pub fn review_framework(&mut self, agent: &AgentSpec) -> Result<AnalysisDocument, QualError> {
        agent.expect_role(AgentRole::DeductiveCoder)?;
        let (system, user) = self.render(AgentPhase::DeductiveReview, agent, &[])?;
        let mut history = vec![ChatMessage::system(system), ChatMessage::user(user)];
        let text = self.call(agent, &history)?;
        history.push(ChatMessage::assistant(text.clone()));
        self.deductive.insert(agent.agent_id.clone(), history);
        self.st(&agent.agent_id).reviewed = true;
        Ok(AnalysisDocument::raw(&agent.agent_id, DocKind::FrameworkReview, text))
    }

    /// Code every document against the framework. Calls fan out through
    /// the gateway; each one sees only the review conversation.
    pub fn run_deductive(
        &mut self,
        agent: &AgentSpec,
        documents: &[DataItem],
    ) -> Result<(AnalysisDocument, Vec<ThemeCode>), QualError> {
        agent.expect_role(AgentRole::DeductiveCoder)?;
        if !self.st(&agent.agent_id).reviewed {
            return Err(QualError::Protocol {
                agent: agent.agent_id.clone(),
                attempted: "deductive coding",
                requires: "framework review",
            });
        }
        if documents.is_empty() {
            return Err(QualError::Usage("no documents to code".into()));
        }
        let base = self.deductive[&agent.agent_id].clone();
        let mut prompts = Vec::with_capacity(documents.len());
        for d in documents {
            let (_, user) = self.render(
                AgentPhase::DeductiveCode,
                agent,
                &[("document_id", d.id.clone()), ("document_text", d.text.clone())],
            )?;
            prompts.push(format!("{user}{}", self.footer(THEMES_FOOTER)));
        }
        let jobs: Vec<ChatJob> = prompts
            .iter()
            .map(|p| {
                let mut messages = base.clone();
                messages.push(ChatMessage::user(p.clone()));
                ChatJob {
                    config: agent.model.clone(),
                    messages,
                    attempt: 0,
                }
            })
            .collect();
        let results = self.gateway.chat_batch(&jobs);

        let mut raw = String::new();
        let mut turns = Vec::new();
        let mut codes = Vec::new();
        let mut warnings = Vec::new();
        for ((doc, prompt), result) in documents.iter().zip(prompts).zip(results) {
            let text = result.map_err(|source| QualError::Gateway {
                agent: agent.agent_id.clone(),
                source,
            })?;
            raw.push_str(&format!("## [DOCUMENT ID: {}]\n\n{}\n\n", doc.id, text.trim_end()));
            let (parsed, w) = parse_theme_codes(&doc.id, &text);
            codes.extend(parsed.unwrap_or_default());
            warnings.extend(w);
            turns.push(ChatMessage::user(prompt));
            turns.push(ChatMessage::assistant(text));
        }
        for w in &warnings {
            log::warn!("{}: {w}", agent.agent_id);
        }
        self.coding_turns.insert(agent.agent_id.clone(), turns);
        self.st(&agent.agent_id).coded = true;
        let mut doc = AnalysisDocument::raw(&agent.agent_id, DocKind::DeductiveCoding, raw);
        doc.parsed = Some(ParsedPayload::ThemeCodes(codes.clone()));
        doc.warnings = warnings;
        Ok((doc, codes))
    }

    pub fn run_within_synthesis(&mut self, agent: &AgentSpec) -> Result<AnalysisDocument, QualError> {
        agent.expect_role(AgentRole::DeductiveCoder)?;
        if !self.st(&agent.agent_id).coded {
            return Err(QualError::Protocol {
                agent: agent.agent_id.clone(),
                attempted: "within-model synthesis",
                requires: "deductive coding",
            });
        }
        let turns = &self.coding_turns[&agent.agent_id];
        let n = turns.len() / 2;
        let (_, user) = self.render(AgentPhase::DeductiveWithinSynthesis, agent, &[("n_documents", n.to_string())])?;
        let mut history = self.deductive[&agent.agent_id].clone();
        history.extend(turns.iter().cloned());
        history.push(ChatMessage::user(user));
        let text = self.call(agent, &history)?;
        self.st(&agent.agent_id).within = true;
        Ok(AnalysisDocument::raw(&agent.agent_id, DocKind::DeductiveSynthesis, text))
    }

    /// Merge coder documents into one synthesis. Inductive synthesis needs
    /// every contributing agent to have finished both analyses; deductive
    /// synthesis needs their within-model syntheses.
    pub fn synthesize(
        &mut self,
        documents: &[AnalysisDocument],
        synthesizer: &AgentSpec,
        phase: SynthesisPhase,
    ) -> Result<AnalysisDocument, QualError> {
        synthesizer.expect_role(AgentRole::Synthesizer)?;
        let agents: BTreeSet<&str> = documents.iter().map(|d| d.agent_id.as_str()).collect();
        if documents.len() < 2 {
            return Err(QualError::Usage(format!(
                "synthesis needs at least 2 coder documents, got {}",
                documents.len()
            )));
        }
        for agent in &agents {
            let st = self.state.get(*agent).cloned().unwrap_or_default();
            let (ok, attempted, requires) = match phase {
                SynthesisPhase::Inductive => (
                    st.reflexivity && st.rewrite && st.reasoning,
                    "inductive synthesis",
                    "reflexivity and both inductive analyses",
                ),
                SynthesisPhase::Deductive => (st.within, "cross-model synthesis", "within-model synthesis"),
            };
            if !ok {
                return Err(QualError::Protocol {
                    agent: agent.to_string(),
                    attempted,
                    requires,
                });
            }
        }
        let (system_phase, kind) = match phase {
            SynthesisPhase::Inductive => (AgentPhase::InductiveSynthesis, DocKind::InductiveSynthesis),
            SynthesisPhase::Deductive => (AgentPhase::DeductiveCrossSynthesis, DocKind::CrossSynthesis),
        };
        let (system, user) = self.render(system_phase, synthesizer, &[("agent_blocks", agent_blocks(documents))])?;
        let messages = vec![
            ChatMessage::system(system),
            ChatMessage::user(format!("{user}{}", self.footer(CODEBOOK_FOOTER))),
        ];
        let text = self.call(synthesizer, &messages)?;
        let mut doc = AnalysisDocument::raw(&synthesizer.agent_id, kind, text);
        let (codebook, warnings) = parse_codebook(&doc.raw_text);
        doc.parsed = codebook.map(ParsedPayload::Codebook);
        doc.warnings = warnings;
        Ok(doc)
    }
}

#[derive(Debug, Clone)]
pub struct QualPlan {
    pub coders: Vec<(String, Arc<ModelConfig>)>,
    pub synthesizer: (String, Arc<ModelConfig>),
    pub deep_read_sets: usize,
    pub set_size: usize,
}

#[derive(Debug, Clone, Default)]
pub struct QualOutcome {
    /// Every document, in the order the calls were made.
    pub documents: Vec<AnalysisDocument>,
    pub theme_codes: Vec<(String, ThemeCode)>,
}

impl QualOutcome {
    pub fn warnings(&self) -> impl Iterator<Item = (&str, &String)> {
        self.documents
            .iter()
            .flat_map(|d| d.warnings.iter().map(move |w| (d.agent_id.as_str(), w)))
    }
}

/// Run the complete protocol: reflexivity, inductive analyses, inductive
/// synthesis, framework review, deductive coding, within-model and
/// cross-model synthesis.
pub fn run_protocol(
    session: &mut QualSession<'_>,
    plan: &QualPlan,
    rewrites: &[DataItem],
    reasoning: &[DataItem],
) -> Result<QualOutcome, QualError> {
    if plan.coders.len() < 2 {
        return Err(QualError::Usage("the protocol needs at least 2 coders".into()));
    }
    if plan.coders.iter().any(|(id, _)| *id == plan.synthesizer.0) {
        return Err(QualError::Usage(format!(
            "synthesizer id {} collides with a coder id",
            plan.synthesizer.0
        )));
    }
    let inductive: Vec<AgentSpec> = plan
        .coders
        .iter()
        .map(|(id, m)| AgentSpec::new(id, m.clone(), AgentRole::InductiveCoder))
        .collect();
    let deductive: Vec<AgentSpec> = plan
        .coders
        .iter()
        .map(|(id, m)| AgentSpec::new(id, m.clone(), AgentRole::DeductiveCoder))
        .collect();
    let synth = AgentSpec::new(&plan.synthesizer.0, plan.synthesizer.1.clone(), AgentRole::Synthesizer);

    let rewrite_sets = deep_read_slice(rewrites, plan.deep_read_sets, plan.set_size);
    let reasoning_sets = deep_read_slice(reasoning, plan.deep_read_sets, plan.set_size);

    let mut out = QualOutcome::default();
    let mut coder_docs = Vec::new();
    for a in &inductive {
        coder_docs.push(session.run_reflexivity(a)?);
    }
    for a in &inductive {
        coder_docs.push(session.run_inductive(a, &rewrite_sets, DocKind::RewriteAnalysis)?);
        coder_docs.push(session.run_inductive(a, &reasoning_sets, DocKind::ReasoningAnalysis)?);
    }
    let synthesis = session.synthesize(&coder_docs, &synth, SynthesisPhase::Inductive)?;
    out.documents.extend(coder_docs);
    out.documents.push(synthesis);

    let mut within_docs = Vec::new();
    for a in &deductive {
        out.documents.push(session.review_framework(a)?);
        let (doc, codes) = session.run_deductive(a, reasoning)?;
        out.documents.push(doc);
        out.theme_codes.extend(codes.into_iter().map(|c| (a.agent_id.clone(), c)));
        let within = session.run_within_synthesis(a)?;
        within_docs.push(within.clone());
        out.documents.push(within);
    }
    out.documents.push(session.synthesize(&within_docs, &synth, SynthesisPhase::Deductive)?);
    Ok(out)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    agent_id: &'a str,
    doc_kind: DocKind,
    parsed: &'a Option<ParsedPayload>,
    warnings: &'a [String],
}

/// Write `<agent-id>_<doc-kind>.md` with the raw text and a `.json` sidecar
/// with the parsed payload.
pub fn persist_document(dir: &Path, doc: &AnalysisDocument) -> Result<(), QualError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| QualError::Io { path, source }
    };
    let stem = doc.file_stem();
    let md = dir.join(format!("{stem}.md"));
    write_atomic(&md, doc.raw_text.as_bytes()).map_err(io(&md))?;
    let sidecar = Sidecar {
        agent_id: &doc.agent_id,
        doc_kind: doc.doc_kind,
        parsed: &doc.parsed,
        warnings: &doc.warnings,
    };
    let mut bytes = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    bytes.push(b'\n');
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&json, &bytes).map_err(io(&json))
}

pub fn theme_codes_csv(codes: &[(String, ThemeCode)]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agent_id", "document_id", "theme", "status", "quote", "code_label", "confidence"])
        .expect("in-memory write");
    for (agent, c) in codes {
        w.write_record([
            agent.as_str(),
            &c.document_id,
            &c.theme.to_string(),
            match c.status {
                ThemeStatus::Present => "Present",
                ThemeStatus::NotPresent => "NotPresent",
            },
            c.quote.as_deref().unwrap_or(""),
            c.code_label.as_deref().unwrap_or(""),
            &c.confidence.map(|c| format!("{c:?}")).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
