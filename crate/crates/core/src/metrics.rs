//! Lexical, semantic and affective scores for rewrite pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{ComplianceClass, RewritePair};
use crate::corpus::SentenceRecord;
use crate::gateway::{EmbeddingVector, GatewayError, Scorer, SentimentResult};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    DegenerateVector,
    #[error("pair {record}/{model} is not compliant on both sides")]
    NonCompliant { record: String, model: String },
    #[error("no source record {0:?}")]
    MissingSource(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Lowercase, split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn f1_from_counts(hits: usize, reference_len: usize, candidate_len: usize) -> f64 {
    if reference_len == 0 || candidate_len == 0 {
        return 0.0;
    }
    let p = hits as f64 / candidate_len as f64;
    let r = hits as f64 / reference_len as f64;
    f1(p, r)
}

pub fn rouge1_f1(reference: &str, candidate: &str) -> f64 {
    rouge1_tokens(&tokenize(reference), &tokenize(candidate))
}

pub fn rouge1_tokens(reference: &[String], candidate: &[String]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut hits = 0;
    for t in candidate {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    f1_from_counts(hits, reference.len(), candidate.len())
}

pub fn rouge_l_f1(reference: &str, candidate: &str) -> f64 {
    rouge_l_tokens(&tokenize(reference), &tokenize(candidate))
}

pub fn rouge_l_tokens(reference: &[String], candidate: &[String]) -> f64 {
    f1_from_counts(lcs_len(reference, candidate), reference.len(), candidate.len())
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, MetricError> {
    cosine_values(&u.values, &v.values)
}

pub fn cosine_values(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::DegenerateVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Sentiment sign times classifier confidence.
pub fn signed_polarity(result: &SentimentResult) -> f64 {
    result.label.sign() * result.confidence
}

pub fn polarity_change(p_target: f64, p_rewrite: f64) -> f64 {
    p_rewrite - p_target
}

/// Per-pair scores. Column names match `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "record-id")]
    pub record_id: String,
    #[serde(rename = "model-id")]
    pub model_id: String,
    #[serde(rename = "rouge1-aut")]
    pub rouge1_aut: f64,
    #[serde(rename = "rouge1-nt")]
    pub rouge1_nt: f64,
    #[serde(rename = "rougeL-aut")]
    pub rouge_l_aut: f64,
    #[serde(rename = "rougeL-nt")]
    pub rouge_l_nt: f64,
    #[serde(rename = "cos-aut")]
    pub cos_aut: f64,
    #[serde(rename = "cos-nt")]
    pub cos_nt: f64,
    #[serde(rename = "cos-cross")]
    pub cos_cross: f64,
    #[serde(rename = "p-target")]
    pub p_target: f64,
    #[serde(rename = "p-aut")]
    pub p_aut: f64,
    #[serde(rename = "p-nt")]
    pub p_nt: f64,
    #[serde(rename = "dpol-aut")]
    pub dpol_aut: f64,
    #[serde(rename = "dpol-nt")]
    pub dpol_nt: f64,
}

pub const METRIC_COLUMNS: [&str; 14] = [
    "record-id", "model-id", "rouge1-aut", "rouge1-nt", "rougeL-aut", "rougeL-nt", "cos-aut",
    "cos-nt", "cos-cross", "p-target", "p-aut", "p-nt", "dpol-aut", "dpol-nt",
];

struct Scored<'a> {
    target: &'a str,
    aut: &'a str,
    nt: &'a str,
}

fn assemble(
    pair: &RewritePair,
    texts: &Scored<'_>,
    emb: &[EmbeddingVector],
    sent: &[SentimentResult],
) -> Result<MetricRow, MetricError> {
    let (p_target, p_aut, p_nt) = (
        signed_polarity(&sent[0]),
        signed_polarity(&sent[1]),
        signed_polarity(&sent[2]),
    );
    Ok(MetricRow {
        record_id: pair.record_id.clone(),
        model_id: pair.model_id.clone(),
        rouge1_aut: rouge1_f1(texts.target, texts.aut),
        rouge1_nt: rouge1_f1(texts.target, texts.nt),
        rouge_l_aut: rouge_l_f1(texts.target, texts.aut),
        rouge_l_nt: rouge_l_f1(texts.target, texts.nt),
        cos_aut: cosine(&emb[0], &emb[1])?,
        cos_nt: cosine(&emb[0], &emb[2])?,
        cos_cross: cosine(&emb[1], &emb[2])?,
        p_target,
        p_aut,
        p_nt,
        dpol_aut: polarity_change(p_target, p_aut),
        dpol_nt: polarity_change(p_target, p_nt),
    })
}

fn texts_for<'a>(pair: &'a RewritePair, source: &'a SentenceRecord) -> Result<Scored<'a>, MetricError> {
    if pair.autistic.verdict.class != ComplianceClass::Compliant
        || pair.neurotypical.verdict.class != ComplianceClass::Compliant
    {
        return Err(MetricError::NonCompliant {
            record: pair.record_id.clone(),
            model: pair.model_id.clone(),
        });
    }
    Ok(Scored {
        target: &source.target,
        aut: &pair.autistic.verdict.extracted_content,
        nt: &pair.neurotypical.verdict.extracted_content,
    })
}

/// Score one compliant pair against its source record.
pub fn score_pair(
    pair: &RewritePair,
    source: &SentenceRecord,
    scorer: &dyn Scorer,
) -> Result<MetricRow, MetricError> {
    let texts = texts_for(pair, source)?;
    let batch = vec![texts.target.to_string(), texts.aut.to_string(), texts.nt.to_string()];
    let emb = scorer.embed(&batch)?;
    let sent = scorer.sentiment(&batch)?;
    assemble(pair, &texts, &emb, &sent)
}

/// Score many compliant pairs with two batched scorer calls. Rows keep the
/// order of `pairs`.
pub fn score_pairs(
    pairs: &[RewritePair],
    sources: &HashMap<&str, &SentenceRecord>,
    scorer: &dyn Scorer,
) -> Result<Vec<MetricRow>, MetricError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(pairs.len());
    let mut batch = Vec::with_capacity(pairs.len() * 3);
    for pair in pairs {
        let source = sources
            .get(pair.record_id.as_str())
            .ok_or_else(|| MetricError::MissingSource(pair.record_id.clone()))?;
        let t = texts_for(pair, source)?;
        batch.extend([t.target.to_string(), t.aut.to_string(), t.nt.to_string()]);
        scored.push(t);
    }
    let emb = scorer.embed(&batch)?;
    let sent = scorer.sentiment(&batch)?;
    pairs
        .iter()
        .zip(&scored)
        .enumerate()
        .map(|(i, (pair, t))| assemble(pair, t, &emb[3 * i..3 * i + 3], &sent[3 * i..3 * i + 3]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::SentimentLabel;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Here's the  CAT, sat!"), ["here", "s", "the", "cat", "sat"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1_f1("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge1_f1("alpha beta", "gamma delta"), 0.0);
        assert!((rouge1_f1("the cat sat on the mat", "the cat lay on a mat") - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(rouge_l_f1("same words here", "same words here"), 1.0);
        assert!((rouge_l_f1("a b c d", "a c b d") - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l_f1("a b c", ""), 0.0);
        assert_eq!(rouge1_f1("", ""), 0.0);
    }

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector { values: values.to_vec(), model_tag: "t".into() }
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.6, 0.8]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine(&a, &v(&[-0.6, -0.8])).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(cosine(&a, &v(&[0.0, 0.0])), Err(MetricError::DegenerateVector)));
        assert!(matches!(cosine(&a, &v(&[1.0])), Err(MetricError::DimensionMismatch(2, 1))));
    }

    #[test]
    fn polarity_examples() {
        let s = |label, confidence| SentimentResult { label, confidence };
        assert_eq!(signed_polarity(&s(SentimentLabel::Positive, 0.9)), 0.9);
        assert_eq!(signed_polarity(&s(SentimentLabel::Neutral, 0.73)), 0.0);
        assert_eq!(signed_polarity(&s(SentimentLabel::Negative, 0.4)), -0.4);
        assert!((polarity_change(0.2, 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(polarity_change(0.37, 0.37), 0.0);
        assert_eq!(polarity_change(-1.0, 1.0), 2.0);
    }

    proptest! {
        #[test]
        fn cosine_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 4), b in proptest::collection::vec(-1.0f64..1.0, 4)) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let x = cosine_values(&a, &b).unwrap();
            let y = cosine_values(&b, &a).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((-1.0..=1.0).contains(&x));
        }

        #[test]
        fn rouge_in_unit_range(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            for f in [rouge1_f1(&a, &b), rouge_l_f1(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&f));
            }
            prop_assert!(rouge_l_f1(&a, &b) <= rouge1_f1(&a, &b) + 1e-12);
        }
    }
}
