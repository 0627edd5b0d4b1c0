//! Rewrite extraction and failure-mode classification.
//!
//! Classification is an ordered rule list: Refusal, Erasure,
//! MetaCommentary, HallucinationSuspect, then Compliant. Every rule that
//! fires is recorded so verdicts stay auditable, but only the first decides
//! the class.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum ComplianceError {
    #[error("source text is empty")]
    EmptySource,
    #[error("token frequency comparison needs two non-empty corpora")]
    EmptyCorpus,
    #[error("invalid rule config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComplianceClass {
    Compliant,
    Erasure,
    MetaCommentary,
    HallucinationSuspect,
    Refusal,
}

impl ComplianceClass {
    pub const ALL: [ComplianceClass; 5] = [
        ComplianceClass::Compliant,
        ComplianceClass::Erasure,
        ComplianceClass::MetaCommentary,
        ComplianceClass::HallucinationSuspect,
        ComplianceClass::Refusal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComplianceClass::Compliant => "Compliant",
            ComplianceClass::Erasure => "Erasure",
            ComplianceClass::MetaCommentary => "MetaCommentary",
            ComplianceClass::HallucinationSuspect => "HallucinationSuspect",
            ComplianceClass::Refusal => "Refusal",
        }
    }
}

impl fmt::Display for ComplianceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const RULE_REFUSAL: &str = "refusal-lexicon";
pub const RULE_ERASURE: &str = "erasure-threshold";
pub const RULE_META: &str = "meta-commentary";
pub const RULE_HALLUCINATION: &str = "hallucination-suspect";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceVerdict {
    pub class: ComplianceClass,
    pub extracted_content: String,
    pub matched_rules: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub header_lexicon: Vec<String>,
    pub refusal_lexicon: Vec<String>,
    /// Markers that open a trailing explanation section after the rewrite.
    pub trailer_lexicon: Vec<String>,
    /// Words that make a short `Label:` prefix strippable.
    pub label_words: Vec<String>,
    pub erasure_threshold: usize,
    pub meta_min_header_hits: usize,
    pub meta_jaccard_max: f64,
    pub hallucination_jaccard_max: f64,
    pub hallucination_min_length_ratio: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            header_lexicon: strings(&["rewritten sentence", "here's", "here is", "reasoning", "step", "okay,"]),
            refusal_lexicon: strings(&["i cannot", "i can't", "i'm sorry", "unable to assist"]),
            trailer_lexicon: strings(&["reasoning", "explanation", "note"]),
            label_words: strings(&["rewritten", "rewrite", "sentence", "version", "output", "answer"]),
            erasure_threshold: 3,
            meta_min_header_hits: 2,
            meta_jaccard_max: 0.15,
            hallucination_jaccard_max: 0.05,
            hallucination_min_length_ratio: 0.5,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), ComplianceError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ComplianceError::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("meta_jaccard_max", self.meta_jaccard_max)?;
        unit("hallucination_jaccard_max", self.hallucination_jaccard_max)?;
        if !(self.hallucination_min_length_ratio >= 0.0) {
            return Err(ComplianceError::Config(
                "hallucination_min_length_ratio must be >= 0".into(),
            ));
        }
        if self.erasure_threshold == 0 {
            return Err(ComplianceError::Config("erasure_threshold must be positive".into()));
        }
        Ok(())
    }
}

fn normalize_quotes(s: &str) -> String {
    s.replace(['\u{2019}', '\u{2018}'], "'")
}

fn strip_markup(line: &str) -> &str {
    line.trim()
        .trim_start_matches(|c: char| "#*>-_ \t".contains(c))
        .trim_end_matches(|c: char| "*_ \t".contains(c))
}

fn is_fence(line: &str) -> bool {
    let t = line.trim();
    t.starts_with("```") || t == "\"\"\"" || t == "'''"
}

fn starts_with_any(text: &str, patterns: &[String]) -> bool {
    patterns.iter().any(|p| text.starts_with(p.as_str()))
}

enum Header {
    /// Line is entirely framing and can be dropped.
    Drop,
    /// Line is `Label: content`; keep the content.
    Content(String),
    NotHeader,
}

fn classify_header(line: &str, rules: &RuleConfig, more_follows: bool) -> Header {
    let plain = strip_markup(line);
    let lower = normalize_quotes(&plain.to_lowercase());
    if let Some(colon) = plain.find(':') {
        let label = normalize_quotes(&plain[..colon].to_lowercase());
        let label = label.as_str();
        let label_tokens = tokenize(label);
        let is_label = label_tokens.len() <= 6
            && (starts_with_any(label.trim(), &rules.header_lexicon)
                || label_tokens.iter().any(|t| rules.label_words.contains(t)));
        if is_label {
            let rest = plain[colon + 1..].trim_matches(|c: char| "*_ \t".contains(c));
            return if rest.is_empty() {
                Header::Drop
            } else {
                Header::Content(rest.to_string())
            };
        }
        return Header::NotHeader;
    }
    if more_follows && starts_with_any(&lower, &rules.header_lexicon) {
        Header::Drop
    } else {
        Header::NotHeader
    }
}

fn is_trailer(line: &str, rules: &RuleConfig) -> bool {
    let lower = normalize_quotes(&strip_markup(line).to_lowercase());
    rules.trailer_lexicon.iter().any(|m| {
        lower
            .strip_prefix(m.as_str())
            .is_some_and(|rest| rest.trim_start().starts_with(':') || rest.trim().is_empty())
    })
}

fn strip_quotes(s: &str) -> &str {
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            if !inner.contains(close) && !inner.contains(open) {
                return inner.trim();
            }
        }
    }
    s
}

fn extract_once(raw: &str, rules: &RuleConfig) -> String {
    let mut lines: Vec<String> = raw.lines().map(str::to_string).collect();

    // Leading framing.
    let mut start = 0;
    while start < lines.len() {
        let line = &lines[start];
        if line.trim().is_empty() || is_fence(line) {
            start += 1;
            continue;
        }
        let more = lines[start + 1..].iter().any(|l| !l.trim().is_empty() && !is_fence(l));
        match classify_header(line, rules, more) {
            Header::Drop => start += 1,
            Header::Content(rest) => {
                lines[start] = rest;
                break;
            }
            Header::NotHeader => break,
        }
    }
    let mut body: Vec<String> = lines.split_off(start);

    // Trailing explanation sections start at the first trailer line after content.
    if let Some(cut) = body
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, l)| is_trailer(l, rules))
        .map(|(i, _)| i)
    {
        body.truncate(cut);
    }
    while body
        .last()
        .is_some_and(|l| l.trim().is_empty() || is_fence(l) || matches!(classify_header(l, rules, false), Header::Drop))
    {
        body.pop();
    }
    let joined = body.join("\n");
    strip_quotes(joined.trim()).to_string()
}

/// Strip framing around the rewrite body. Idempotent.
pub fn extract_content(raw: &str, rules: &RuleConfig) -> String {
    let mut current = extract_once(raw, rules);
    loop {
        let next = extract_once(&current, rules);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn count_hits(text: &str, lexicon: &[String]) -> usize {
    let lower = normalize_quotes(&text.to_lowercase());
    lexicon
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| lower.matches(p.as_str()).count())
        .sum()
}

/// Token-set Jaccard similarity; 0 when both sides are empty.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = tokenize(a).into_iter().collect();
    let sb: HashSet<String> = tokenize(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

pub fn classify(raw: &str, source: &str, rules: &RuleConfig) -> Result<ComplianceVerdict, ComplianceError> {
    if source.trim().is_empty() {
        return Err(ComplianceError::EmptySource);
    }
    let content = extract_content(raw, rules);
    let content_tokens = tokenize(&content).len();
    let source_tokens = tokenize(source).len();
    let jaccard = token_jaccard(&content, source);

    let mut matched = Vec::new();
    if count_hits(raw, &rules.refusal_lexicon) > 0 {
        matched.push((ComplianceClass::Refusal, RULE_REFUSAL));
    }
    if content_tokens < rules.erasure_threshold {
        matched.push((ComplianceClass::Erasure, RULE_ERASURE));
    }
    if count_hits(raw, &rules.header_lexicon) >= rules.meta_min_header_hits && jaccard < rules.meta_jaccard_max {
        matched.push((ComplianceClass::MetaCommentary, RULE_META));
    }
    if jaccard < rules.hallucination_jaccard_max
        && content_tokens as f64 >= rules.hallucination_min_length_ratio * source_tokens as f64
    {
        matched.push((ComplianceClass::HallucinationSuspect, RULE_HALLUCINATION));
    }
    // Precedence follows push order.
    let class = matched.first().map_or(ComplianceClass::Compliant, |(c, _)| *c);
    Ok(ComplianceVerdict {
        class,
        extracted_content: content,
        matched_rules: matched.into_iter().map(|(_, r)| r.to_string()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutput {
    pub raw: String,
    pub verdict: ComplianceVerdict,
}

/// The two persona-conditioned outputs for one record and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewritePair {
    pub record_id: String,
    pub model_id: String,
    pub autistic: RewriteOutput,
    pub neurotypical: RewriteOutput,
}

impl RewritePair {
    pub fn is_valid(&self) -> bool {
        self.autistic.verdict.class == ComplianceClass::Compliant
            && self.neurotypical.verdict.class == ComplianceClass::Compliant
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub valid: Vec<RewritePair>,
    pub excluded: Vec<RewritePair>,
    /// Non-compliant outputs by class, counted per side.
    pub class_counts: BTreeMap<ComplianceClass, usize>,
}

/// Keep pairs whose two outputs are both compliant.
pub fn exclusion_filter(pairs: Vec<RewritePair>) -> ExclusionReport {
    let mut report = ExclusionReport::default();
    for pair in pairs {
        for side in [&pair.autistic, &pair.neurotypical] {
            if side.verdict.class != ComplianceClass::Compliant {
                *report.class_counts.entry(side.verdict.class).or_default() += 1;
            }
        }
        if pair.is_valid() {
            report.valid.push(pair);
        } else {
            report.excluded.push(pair);
        }
    }
    report
}

/// Lowercase whitespace tokens with punctuation removed inside the token,
/// so `here's` becomes `heres` and `rewrites.xlsx` becomes `rewritesxlsx`.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDelta {
    pub token: String,
    pub count_a: usize,
    pub count_b: usize,
    pub per10k_a: f64,
    pub per10k_b: f64,
    pub delta: f64,
}

/// Tokens most over-represented in `a` relative to `b`, by frequency per
/// 10,000 tokens. Ties break alphabetically.
pub fn token_frequency_delta(
    a: &[String],
    b: &[String],
    top_k: usize,
) -> Result<Vec<TokenDelta>, ComplianceError> {
    let count = |corpus: &[String]| {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for text in corpus {
            for t in word_tokens(text) {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        (counts, total)
    };
    let (ca, ta) = count(a);
    let (cb, tb) = count(b);
    if ta == 0 || tb == 0 {
        return Err(ComplianceError::EmptyCorpus);
    }
    let vocab: HashSet<&String> = ca.keys().chain(cb.keys()).collect();
    let mut rows: Vec<TokenDelta> = vocab
        .into_iter()
        .map(|t| {
            let count_a = ca.get(t).copied().unwrap_or(0);
            let count_b = cb.get(t).copied().unwrap_or(0);
            let per10k_a = count_a as f64 * 10_000.0 / ta as f64;
            let per10k_b = count_b as f64 * 10_000.0 / tb as f64;
            TokenDelta {
                token: t.clone(),
                count_a,
                count_b,
                per10k_a,
                per10k_b,
                delta: per10k_a - per10k_b,
            }
        })
        .collect();
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta).then_with(|| x.token.cmp(&y.token)));
    rows.truncate(top_k);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SRC: &str = "The meeting today completely drained all of my energy.";

    fn verdict(raw: &str) -> ComplianceVerdict {
        classify(raw, SRC, &RuleConfig::default()).unwrap()
    }

    #[test]
    fn extraction_examples() {
        let r = RuleConfig::default();
        assert_eq!(extract_content("Rewritten Sentence: The meeting drained me.", &r), "The meeting drained me.");
        assert_eq!(extract_content("Rewritten Sentence:", &r), "");
        assert_eq!(extract_content("The meeting drained me.", &r), "The meeting drained me.");
        assert_eq!(
            extract_content("**Rewritten Sentence:**\n\"That meeting wiped me out.\"\n\n**Reasoning:** I kept it short.", &r),
            "That meeting wiped me out."
        );
        assert_eq!(
            extract_content("Here's the rewrite:\n```\nMeetings drain me.\n```", &r),
            "Meetings drain me."
        );
        // Colon inside ordinary prose is not a label.
        assert_eq!(extract_content("My rule: never lie.", &r), "My rule: never lie.");
    }

    #[test]
    fn classification_examples() {
        assert_eq!(verdict("Rewritten Sentence:").class, ComplianceClass::Erasure);
        assert_eq!(verdict("I'm sorry, I cannot help with that.").class, ComplianceClass::Refusal);
        let ok = verdict("Rewritten Sentence: Today's meeting completely drained my energy.\n\nReasoning: kept it direct.");
        assert_eq!(ok.class, ComplianceClass::Compliant, "{ok:?}");
        assert!(ok.matched_rules.is_empty());

        let meta = verdict(
            "Okay, here is how I would approach this.\nStep 1: identify the voice.\nStep 2: adjust wording to sound autistic.",
        );
        assert_eq!(meta.class, ComplianceClass::MetaCommentary, "{meta:?}");

        let halluc = verdict("Neurotypicals always gather at parties to gossip about strangers loudly.");
        assert_eq!(halluc.class, ComplianceClass::HallucinationSuspect);

        let both = verdict("Rewritten Sentence: I cannot.");
        assert_eq!(both.class, ComplianceClass::Refusal);
        assert_eq!(both.matched_rules, [RULE_REFUSAL, RULE_ERASURE]);
        assert_eq!(classify("x", "  ", &RuleConfig::default()), Err(ComplianceError::EmptySource));
    }

    fn pair(aut: ComplianceClass, nt: ComplianceClass) -> RewritePair {
        let out = |class| RewriteOutput {
            raw: String::new(),
            verdict: ComplianceVerdict { class, extracted_content: String::new(), matched_rules: vec![] },
        };
        RewritePair { record_id: "r".into(), model_id: "m".into(), autistic: out(aut), neurotypical: out(nt) }
    }

    #[test]
    fn exclusion_counts() {
        use ComplianceClass::*;
        let all_ok = exclusion_filter(vec![pair(Compliant, Compliant); 4]);
        assert_eq!((all_ok.valid.len(), all_ok.excluded.len()), (4, 0));
        let all_bad = exclusion_filter(vec![pair(Erasure, Erasure); 3]);
        assert_eq!((all_bad.valid.len(), all_bad.excluded.len()), (0, 3));
        assert_eq!(all_bad.class_counts[&Erasure], 6);
        let mixed = exclusion_filter(vec![pair(Compliant, Refusal), pair(MetaCommentary, Compliant), pair(Compliant, Compliant)]);
        assert_eq!(mixed.valid.len(), 1);
        assert_eq!(mixed.class_counts[&Refusal], 1);
        assert_eq!(mixed.class_counts[&MetaCommentary], 1);
    }

    #[test]
    fn token_delta_examples() {
        let a = vec!["Here's the rewritten sentence: hello world".to_string()];
        let same = token_frequency_delta(&a, &a, 10).unwrap();
        assert!(same.iter().all(|d| d.delta == 0.0));

        // 100 of 10,000 tokens are "rewritten" in a, none in b.
        let mut text = "rewritten ".repeat(100);
        text.push_str(&"filler ".repeat(9_900));
        let b = vec!["filler ".repeat(10_000)];
        let d = token_frequency_delta(&[text], &b, 3).unwrap();
        assert_eq!(d[0].token, "rewritten");
        assert!((d[0].delta - 100.0).abs() < 1e-9);

        assert_eq!(word_tokens("Here's rewrites.xlsx!"), ["heres", "rewritesxlsx"]);
        assert_eq!(token_frequency_delta(&[], &a, 1), Err(ComplianceError::EmptyCorpus));
    }

    proptest! {
        #[test]
        fn extraction_idempotent(raw in "(\\*\\*Rewritten Sentence:\\*\\*|Here's|Reasoning:|Step 1:|\"|```|[a-z ]{0,12}|\n){0,10}") {
            let r = RuleConfig::default();
            let once = extract_content(&raw, &r);
            prop_assert_eq!(extract_content(&once, &r), once);
        }

        #[test]
        fn refusal_is_sticky(raw in "[A-Za-z:,.' \n]{0,80}", phrase in 0usize..4) {
            let r = RuleConfig::default();
            let appended = format!("{raw} {}", r.refusal_lexicon[phrase]);
            prop_assert_eq!(classify(&appended, SRC, &r).unwrap().class, ComplianceClass::Refusal);
        }

        #[test]
        fn classification_total(raw in "\\PC{0,120}") {
            let v = classify(&raw, SRC, &RuleConfig::default()).unwrap();
            let again = classify(&raw, SRC, &RuleConfig::default()).unwrap();
            prop_assert_eq!(&v, &again);
            if v.class == ComplianceClass::Erasure {
                prop_assert!(tokenize(&v.extracted_content).len() < 3);
            }
        }
    }
}
