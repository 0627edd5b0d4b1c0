//! Prompt templates for every annotation, rewrite and qualitative-coding condition.
//!
//! Templates are plain-text files with a small front-matter block:
//!
//! ```text
//! ---
//! template: rewrite
//! system: optional single-line system prompt
//! ---
//! body with {placeholders}
//! ```
//!
//! The built-in set is compiled in; a directory of files with the same
//! front matter overrides individual templates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Condition, SentenceRecord};

pub const MISSING_CONTEXT: &str = "N/A";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template} has unbound placeholder {{{placeholder}}}")]
    Unbound { template: String, placeholder: String },
    #[error("template {template} has an unterminated brace")]
    Malformed { template: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("template file {path}: {reason}")]
    BadFile { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Persona {
    Autistic,
    Neurotypical,
}

impl Persona {
    /// The only text that differs between the paired rewrite prompts.
    pub fn clause(self) -> &'static str {
        match self {
            Persona::Autistic => "an autistic person talking to other autistic people",
            Persona::Neurotypical => "a neurotypical person talking to other neurotypical people",
        }
    }

    pub fn condition(self) -> Condition {
        match self {
            Persona::Autistic => Condition::RewriteAutistic,
            Persona::Neurotypical => Condition::RewriteNt,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Persona::Autistic => "aut",
            Persona::Neurotypical => "nt",
        }
    }
}

/// Phases of the multi-agent qualitative protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentPhase {
    Reflexivity,
    InductiveRewrite,
    InductiveReasoning,
    InductiveSynthesis,
    DeductiveReview,
    DeductiveCode,
    DeductiveWithinSynthesis,
    DeductiveCrossSynthesis,
}

impl AgentPhase {
    pub fn is_inductive(self) -> bool {
        matches!(
            self,
            AgentPhase::Reflexivity
                | AgentPhase::InductiveRewrite
                | AgentPhase::InductiveReasoning
                | AgentPhase::InductiveSynthesis
        )
    }
}

/// Identifies one template file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKey {
    Condition(Condition),
    /// Shared by both persona rewrite conditions.
    Rewrite,
    Phase(AgentPhase),
    InductiveSystem,
    DeductiveSystem,
}

impl TemplateKey {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKey::Condition(c) => c.as_str(),
            TemplateKey::Rewrite => "rewrite",
            TemplateKey::InductiveSystem => "inductive-system",
            TemplateKey::DeductiveSystem => "deductive-system",
            TemplateKey::Phase(p) => match p {
                AgentPhase::Reflexivity => "reflexivity",
                AgentPhase::InductiveRewrite => "inductive-rewrite",
                AgentPhase::InductiveReasoning => "inductive-reasoning",
                AgentPhase::InductiveSynthesis => "inductive-synthesis",
                AgentPhase::DeductiveReview => "deductive-review",
                AgentPhase::DeductiveCode => "deductive-code",
                AgentPhase::DeductiveWithinSynthesis => "deductive-within-synthesis",
                AgentPhase::DeductiveCrossSynthesis => "deductive-cross-synthesis",
            },
        }
    }

    fn for_condition(condition: Condition) -> Self {
        if condition.is_rewrite() {
            TemplateKey::Rewrite
        } else {
            TemplateKey::Condition(condition)
        }
    }
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BUILTIN
            .iter()
            .map(|(k, _)| *k)
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown template key {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub key: TemplateKey,
    pub system: Option<String>,
    pub user: String,
}

const BUILTIN: [(TemplateKey, &str); 17] = [
    (TemplateKey::Condition(Condition::ZeroShot), include_str!("../templates/zero-shot.txt")),
    (TemplateKey::Condition(Condition::CoT), include_str!("../templates/cot.txt")),
    (TemplateKey::Condition(Condition::IclA), include_str!("../templates/icl-a.txt")),
    (TemplateKey::Condition(Condition::IclB), include_str!("../templates/icl-b.txt")),
    (TemplateKey::Condition(Condition::PersonaIfl), include_str!("../templates/persona-ifl.txt")),
    (TemplateKey::Condition(Condition::PersonaPfl), include_str!("../templates/persona-pfl.txt")),
    (TemplateKey::Rewrite, include_str!("../templates/rewrite.txt")),
    (TemplateKey::InductiveSystem, include_str!("../templates/inductive-system.txt")),
    (TemplateKey::Phase(AgentPhase::Reflexivity), include_str!("../templates/reflexivity.txt")),
    (TemplateKey::Phase(AgentPhase::InductiveRewrite), include_str!("../templates/inductive-rewrite.txt")),
    (TemplateKey::Phase(AgentPhase::InductiveReasoning), include_str!("../templates/inductive-reasoning.txt")),
    (TemplateKey::Phase(AgentPhase::InductiveSynthesis), include_str!("../templates/inductive-synthesis.txt")),
    (TemplateKey::DeductiveSystem, include_str!("../templates/deductive-system.txt")),
    (TemplateKey::Phase(AgentPhase::DeductiveReview), include_str!("../templates/deductive-review.txt")),
    (TemplateKey::Phase(AgentPhase::DeductiveCode), include_str!("../templates/deductive-code.txt")),
    (TemplateKey::Phase(AgentPhase::DeductiveWithinSynthesis), include_str!("../templates/deductive-within-synthesis.txt")),
    (TemplateKey::Phase(AgentPhase::DeductiveCrossSynthesis), include_str!("../templates/deductive-cross-synthesis.txt")),
];

fn parse_template(source: &str, origin: &str) -> Result<PromptTemplate, PromptError> {
    let bad = |reason: &str| PromptError::BadFile {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    let rest = source
        .strip_prefix("---\n")
        .ok_or_else(|| bad("missing front matter"))?;
    let end = rest.find("\n---\n").ok_or_else(|| bad("unterminated front matter"))?;
    let (front, body) = (&rest[..end], &rest[end + 5..]);
    let mut key = None;
    let mut system = None;
    for line in front.lines() {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| bad("front matter lines must be `key: value`"))?;
        match k.trim() {
            "template" | "condition" => {
                key = Some(TemplateKey::from_str(v.trim()).map_err(|e| bad(&e))?)
            }
            "system" => system = Some(v.trim().to_string()),
            other => return Err(bad(&format!("unknown front matter key {other:?}"))),
        }
    }
    Ok(PromptTemplate {
        key: key.ok_or_else(|| bad("front matter must name the template"))?,
        system,
        user: body.trim_end_matches('\n').to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Drop the "Save ... .xlsx" instruction from annotation and rewrite prompts.
    #[serde(default)]
    pub strip_save_instruction: bool,
}

/// A labelled in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
    pub condition: Condition,
    pub persona: Option<Persona>,
    pub record_id: String,
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKey, PromptTemplate>,
    pub options: PromptOptions,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(key, src)| {
                let t = parse_template(src, key.as_str()).expect("built-in template parses");
                debug_assert_eq!(t.key, *key);
                (*key, t)
            })
            .collect();
        Self {
            templates,
            options: PromptOptions::default(),
        }
    }

    /// Built-in templates overridden by every `*.txt` file in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let entries = fs::read_dir(dir).map_err(|e| PromptError::BadFile {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let origin = path.display().to_string();
            let src = fs::read_to_string(&path).map_err(|e| PromptError::BadFile {
                path: origin.clone(),
                reason: e.to_string(),
            })?;
            let t = parse_template(&src, &origin)?;
            set.templates.insert(t.key, t);
        }
        Ok(set)
    }

    pub fn get(&self, key: TemplateKey) -> &PromptTemplate {
        &self.templates[&key]
    }

    /// Render an annotation or rewrite prompt for one record.
    pub fn render(
        &self,
        record: &SentenceRecord,
        condition: Condition,
        persona: Option<Persona>,
        examples: Option<&[IclExample]>,
        model_id: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        match (condition.is_rewrite(), persona) {
            (true, None) => {
                return Err(PromptError::Usage(format!(
                    "condition {condition} requires a persona"
                )))
            }
            (false, Some(p)) => {
                return Err(PromptError::Usage(format!(
                    "persona {p:?} supplied for non-rewrite condition {condition}"
                )))
            }
            (true, Some(p)) if p.condition() != condition => {
                return Err(PromptError::Usage(format!(
                    "persona {p:?} does not match condition {condition}"
                )))
            }
            _ => {}
        }
        let mut vars: BTreeMap<&str, String> = BTreeMap::new();
        let ctx = |v: &Option<String>| v.clone().unwrap_or_else(|| MISSING_CONTEXT.to_string());
        vars.insert("preceding_sentence", ctx(&record.preceding));
        vars.insert("target_sentence", record.target.clone());
        vars.insert("following_sentence", ctx(&record.following));
        vars.insert("model", model_id.to_string());
        if let Some(p) = persona {
            vars.insert("persona-clause", p.clause().to_string());
        }
        if condition.is_icl() {
            let examples = examples.filter(|e| !e.is_empty()).ok_or_else(|| {
                PromptError::Usage(format!("condition {condition} requires a non-empty example list"))
            })?;
            vars.insert("examples", format_examples(examples));
        }

        let template = self.get(TemplateKey::for_condition(condition));
        let mut body = template.user.clone();
        if self.options.strip_save_instruction {
            body = strip_save_instruction(&body);
        }
        let user = substitute(&body, template.key, &vars)?;
        Ok(RenderedPrompt {
            system: template.system.clone(),
            user,
            condition,
            persona,
            record_id: record.id.clone(),
        })
    }

    /// Render a qualitative-protocol prompt. Returns (system, user).
    pub fn render_phase(
        &self,
        phase: AgentPhase,
        vars: &BTreeMap<&str, String>,
    ) -> Result<(String, String), PromptError> {
        let system_key = if phase.is_inductive() {
            TemplateKey::InductiveSystem
        } else {
            TemplateKey::DeductiveSystem
        };
        let system = self.get(system_key).user.clone();
        let template = self.get(TemplateKey::Phase(phase));
        let user = substitute(&template.user, template.key, vars)?;
        Ok((system, user))
    }
}

/// One example per line: `Sentence: <text> → Label: <0|1>`.
pub fn format_examples(examples: &[IclExample]) -> String {
    examples
        .iter()
        .map(|e| format!("Sentence: {} → Label: {}", e.text, e.label))
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_save_instruction(body: &str) -> String {
    let mut lines = Vec::new();
    for line in body.lines() {
        match line.find("Save ") {
            Some(pos) if line[pos..].contains(".xlsx") => {
                let kept = line[..pos].trim_end();
                if !kept.is_empty() {
                    lines.push(kept.to_string());
                } else if lines.last().is_some_and(|l: &String| l.is_empty()) {
                    // Drop the paragraph and its separating blank line.
                    lines.pop();
                }
            }
            _ => lines.push(line.to_string()),
        }
    }
    lines.join("\n")
}

/// Single-pass placeholder substitution. Bound values are never rescanned,
/// so braces inside record text are inert.
fn substitute(
    template: &str,
    key: TemplateKey,
    vars: &BTreeMap<&str, String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(PromptError::Malformed {
                template: key.to_string(),
            });
        }
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| PromptError::Malformed {
            template: key.to_string(),
        })?;
        let name = &after[..close];
        let value = vars.get(name).ok_or_else(|| PromptError::Unbound {
            template: key.to_string(),
            placeholder: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// A region where two rendered prompts differ, in whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffSpan {
    /// Zero-based line index in the left prompt where the span starts.
    pub line: usize,
    pub left: String,
    pub right: String,
}

/// Differing spans between two persona-paired prompts.
///
/// Lines are aligned with an LCS; each differing line pair is reduced to the
/// token range between its common prefix and common suffix.
pub fn persona_diff(a: &RenderedPrompt, b: &RenderedPrompt) -> Result<Vec<DiffSpan>, PromptError> {
    if a.record_id != b.record_id {
        return Err(PromptError::Usage(format!(
            "cannot diff prompts for different records ({} vs {})",
            a.record_id, b.record_id
        )));
    }
    if !a.condition.is_rewrite() || !b.condition.is_rewrite() {
        return Err(PromptError::Usage("persona_diff needs two rewrite prompts".into()));
    }
    let mut spans = Vec::new();
    if a.system != b.system {
        spans.push(DiffSpan {
            line: 0,
            left: a.system.clone().unwrap_or_default(),
            right: b.system.clone().unwrap_or_default(),
        });
    }
    spans.extend(diff_text(&a.user, &b.user));
    Ok(spans)
}

fn diff_text(a: &str, b: &str) -> Vec<DiffSpan> {
    let la: Vec<&str> = a.split('\n').collect();
    let lb: Vec<&str> = b.split('\n').collect();
    let (n, m) = (la.len(), lb.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if la[i] == lb[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    // Walk the alignment, collecting runs of unmatched lines as hunks.
    let mut spans = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut hunk: Option<(usize, Vec<&str>, Vec<&str>)> = None;
    let flush = |hunk: &mut Option<(usize, Vec<&str>, Vec<&str>)>, spans: &mut Vec<DiffSpan>| {
        if let Some((line, left, right)) = hunk.take() {
            spans.push(token_span(line, &left.join("\n"), &right.join("\n")));
        }
    };
    while i < n || j < m {
        if i < n && j < m && la[i] == lb[j] {
            flush(&mut hunk, &mut spans);
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            hunk.get_or_insert((i, vec![], vec![])).2.push(lb[j]);
            j += 1;
        } else {
            hunk.get_or_insert((i, vec![], vec![])).1.push(la[i]);
            i += 1;
        }
    }
    flush(&mut hunk, &mut spans);
    spans
}

fn token_span(line: usize, left: &str, right: &str) -> DiffSpan {
    let ta: Vec<&str> = left.split_whitespace().collect();
    let tb: Vec<&str> = right.split_whitespace().collect();
    let prefix = ta.iter().zip(&tb).take_while(|(x, y)| x == y).count();
    let max_suffix = ta.len().min(tb.len()) - prefix;
    let suffix = ta
        .iter()
        .rev()
        .zip(tb.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    DiffSpan {
        line,
        left: ta[prefix..ta.len() - suffix].join(" "),
        right: tb[prefix..tb.len() - suffix].join(" "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record() -> SentenceRecord {
        SentenceRecord::new("s1", "Target {with} braces.").with_context(Some("Before."), Some("After."))
    }

    #[test]
    fn zero_shot_contains_instructions_verbatim() {
        let set = TemplateSet::builtin();
        let p = set.render(&record(), Condition::ZeroShot, None, None, "m").unwrap();
        assert!(p.user.contains("1. View autism as a valid difference in neurotype."));
        assert!(p.user.contains("2. Avoid viewing autism as a tragedy, disease, or deficit to be cured."));
        assert!(p.user.contains("3. Be aware of biases from within the disabled community"));
        assert!(p.user.ends_with(
            "Preceding sentence: Before.\nTarget sentence: Target {with} braces.\nFollowing sentence: After."
        ));
        assert!(p.user.contains("no_eg.xlsx"));
        assert_eq!(p.persona, None);
    }

    #[test]
    fn missing_context_is_na() {
        let set = TemplateSet::builtin();
        let r = SentenceRecord::new("s2", "Only target.");
        let p = set.render(&r, Condition::CoT, None, None, "llama").unwrap();
        assert!(p.user.contains("Preceding sentence: N/A\n"));
        assert!(p.user.contains("Following sentence: N/A"));
        assert!(p.user.contains("llama-cot.xlsx"));
    }

    #[test]
    fn rewrite_matches_template_text() {
        let set = TemplateSet::builtin();
        let p = set
            .render(&record(), Condition::RewriteAutistic, Some(Persona::Autistic), None, "gemma3")
            .unwrap();
        assert!(p.user.starts_with(
            "Rewrite the following target sentence as if it were written by an autistic person talking to other autistic people. Maintain the meaning but adapt the voice. Briefly explain your reasoning."
        ));
        assert!(p.user.contains("Save your sentences and reasoning in an Excel file called gemma3-rewrites.xlsx."));
    }

    #[test]
    fn icl_examples_and_guards() {
        let set = TemplateSet::builtin();
        let ex = [
            IclExample { text: "one".into(), label: 0 },
            IclExample { text: "two".into(), label: 1 },
        ];
        let p = set.render(&record(), Condition::IclB, None, Some(&ex), "m").unwrap();
        assert!(p.user.contains("Sentence: one → Label: 0\nSentence: two → Label: 1"));
        assert!(p.user.contains("m-B.xlsx"));
        assert!(matches!(
            set.render(&record(), Condition::IclA, None, Some(&[]), "m"),
            Err(PromptError::Usage(_))
        ));
        assert!(matches!(
            set.render(&record(), Condition::ZeroShot, Some(Persona::Autistic), None, "m"),
            Err(PromptError::Usage(_))
        ));
        assert!(matches!(
            set.render(&record(), Condition::RewriteNt, None, None, "m"),
            Err(PromptError::Usage(_))
        ));
        assert!(matches!(
            set.render(&record(), Condition::RewriteNt, Some(Persona::Autistic), None, "m"),
            Err(PromptError::Usage(_))
        ));
    }

    #[test]
    fn unbound_placeholder_is_named() {
        let vars = BTreeMap::new();
        assert_eq!(
            substitute("hi {who}", TemplateKey::Rewrite, &vars),
            Err(PromptError::Unbound { template: "rewrite".into(), placeholder: "who".into() })
        );
        assert!(matches!(substitute("hi {who", TemplateKey::Rewrite, &vars), Err(PromptError::Malformed { .. })));
    }

    #[test]
    fn strip_flag_removes_save_line() {
        let mut set = TemplateSet::builtin();
        set.options.strip_save_instruction = true;
        for c in Condition::ALL {
            let persona = match c {
                Condition::RewriteAutistic => Some(Persona::Autistic),
                Condition::RewriteNt => Some(Persona::Neurotypical),
                _ => None,
            };
            let ex = [IclExample { text: "x".into(), label: 1 }];
            let p = set.render(&record(), c, persona, Some(&ex), "m").unwrap();
            assert!(!p.user.contains("xlsx"), "{c}: {}", p.user);
            assert!(!p.user.contains("\n\n\n"), "{c}");
        }
    }

    #[test]
    fn persona_diff_single_clause_span() {
        let set = TemplateSet::builtin();
        let a = set.render(&record(), Condition::RewriteAutistic, Some(Persona::Autistic), None, "m").unwrap();
        let b = set.render(&record(), Condition::RewriteNt, Some(Persona::Neurotypical), None, "m").unwrap();
        let spans = persona_diff(&a, &b).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].left, "an autistic person talking to other autistic");
        assert_eq!(spans[0].right, "a neurotypical person talking to other neurotypical");
        assert!(persona_diff(&a, &a).unwrap().is_empty());

        let other = SentenceRecord::new("zz", "x");
        let c = set.render(&other, Condition::RewriteNt, Some(Persona::Neurotypical), None, "m").unwrap();
        assert!(matches!(persona_diff(&a, &c), Err(PromptError::Usage(_))));
    }

    #[test]
    fn overrides_replace_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("zs.txt"),
            "---\ntemplate: zero-shot\nsystem: be brief\n---\nLabel: {target_sentence}\n",
        )
        .unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        let p = set.render(&record(), Condition::ZeroShot, None, None, "m").unwrap();
        assert_eq!(p.user, "Label: Target {with} braces.");
        assert_eq!(p.system.as_deref(), Some("be brief"));
        fs::write(dir.path().join("bad.txt"), "no front matter").unwrap();
        assert!(TemplateSet::with_overrides(dir.path()).is_err());
    }

    #[test]
    fn phase_templates_render() {
        let set = TemplateSet::builtin();
        let mut vars = BTreeMap::new();
        vars.insert("agent_name", "phi4".to_string());
        let (sys, user) = set.render_phase(AgentPhase::Reflexivity, &vars).unwrap();
        assert!(sys.starts_with("You are a qualitative researcher trained in inductive thematic analysis."));
        assert!(user.contains("phi4_reflexivity"));
        let (sys, _) = set.render_phase(AgentPhase::DeductiveReview, &vars).unwrap();
        assert!(sys.contains("deductive approach"));
        assert!(matches!(
            set.render_phase(AgentPhase::DeductiveCode, &vars),
            Err(PromptError::Unbound { .. })
        ));
    }

    proptest! {
        #[test]
        fn paired_prompts_differ_in_one_clause(
            target in "[A-Za-z{}.,' ]{1,60}",
            pre in proptest::option::of("[A-Za-z.,' ]{1,40}"),
            fol in proptest::option::of("[A-Za-z.,' ]{1,40}"),
        ) {
            prop_assume!(!target.trim().is_empty());
            let r = SentenceRecord::new("p", target.clone()).with_context(pre.as_deref(), fol.as_deref());
            let set = TemplateSet::builtin();
            let a = set.render(&r, Condition::RewriteAutistic, Some(Persona::Autistic), None, "m").unwrap();
            let b = set.render(&r, Condition::RewriteNt, Some(Persona::Neurotypical), None, "m").unwrap();
            let again = set.render(&r, Condition::RewriteAutistic, Some(Persona::Autistic), None, "m").unwrap();
            prop_assert_eq!(&a, &again);
            let spans = persona_diff(&a, &b).unwrap();
            prop_assert_eq!(spans.len(), 1);
            prop_assert!(Persona::Autistic.clause().contains(&spans[0].left));
            prop_assert!(Persona::Neurotypical.clause().contains(&spans[0].right));
        }
    }
}
