//! Psychometrically weighted ground truth.
//!
//! Raw AQ, SATA and IAT totals are min-max scaled over the whole annotator
//! pool (IAT inverted so that higher always means more reliable), averaged
//! into a raw trust score, normalised to a mean of one within each team, and
//! finally used as weights in a per-item weighted mean of binary labels.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instrument {
    Aq,
    Sata,
    Iat,
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instrument::Aq => "AQ",
            Instrument::Sata => "SATA",
            Instrument::Iat => "IAT",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GroundTruthError {
    #[error("at least two annotator profiles are required, got {0}")]
    TooFewProfiles(usize),
    #[error("instrument {0} has a constant score column; min-max scaling is undefined")]
    DegenerateScale(Instrument),
    #[error("raw score for {instrument} of annotator {annotator:?} is not finite")]
    NonFinite { annotator: String, instrument: Instrument },
    #[error("duplicate annotator id {0:?}")]
    DuplicateAnnotator(String),
    #[error("annotator {0:?} has an empty team id")]
    EmptyTeam(String),
    #[error("annotator {0:?} has no team assignment")]
    Unassigned(String),
    #[error("team {0:?} has mean raw trust of zero")]
    DegenerateTeam(String),
    #[error("standardized component {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("no labels supplied for record {0:?}")]
    NoLabels(String),
    #[error("record {record:?}: annotator {annotator:?} has no weight")]
    MissingWeight { record: String, annotator: String },
    #[error("record {0:?}: labeler weights sum to zero")]
    ZeroWeight(String),
    #[error("record {record:?}: label {label} is not binary")]
    NonBinary { record: String, label: u8 },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    pub team_id: String,
    pub aq: f64,
    pub sata: f64,
    pub iat: f64,
}

/// Standardized instrument scores, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub aq: f64,
    pub sata: f64,
    pub iat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustWeights {
    pub standardized: BTreeMap<String, Standardized>,
    pub raw_trust: BTreeMap<String, f64>,
    pub weight: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLabel {
    pub record_id: String,
    pub y_hat: f64,
    pub hard_label: u8,
    pub threshold: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn min_max(values: &[f64], instrument: Instrument) -> Result<(f64, f64), GroundTruthError> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(GroundTruthError::DegenerateScale(instrument));
    }
    Ok((min, max))
}

/// Min-max scale each instrument over the full profile set.
pub fn standardize(
    profiles: &[AnnotatorProfile],
) -> Result<BTreeMap<String, Standardized>, GroundTruthError> {
    if profiles.len() < 2 {
        return Err(GroundTruthError::TooFewProfiles(profiles.len()));
    }
    let mut seen = HashSet::new();
    for p in profiles {
        if !seen.insert(p.annotator_id.as_str()) {
            return Err(GroundTruthError::DuplicateAnnotator(p.annotator_id.clone()));
        }
        for (instrument, v) in [
            (Instrument::Aq, p.aq),
            (Instrument::Sata, p.sata),
            (Instrument::Iat, p.iat),
        ] {
            if !v.is_finite() {
                return Err(GroundTruthError::NonFinite {
                    annotator: p.annotator_id.clone(),
                    instrument,
                });
            }
        }
    }
    let column = |f: fn(&AnnotatorProfile) -> f64| profiles.iter().map(f).collect::<Vec<_>>();
    let (aq_lo, aq_hi) = min_max(&column(|p| p.aq), Instrument::Aq)?;
    let (sata_lo, sata_hi) = min_max(&column(|p| p.sata), Instrument::Sata)?;
    let (iat_lo, iat_hi) = min_max(&column(|p| p.iat), Instrument::Iat)?;

    Ok(profiles
        .iter()
        .map(|p| {
            let s = Standardized {
                aq: (p.aq - aq_lo) / (aq_hi - aq_lo),
                sata: (p.sata - sata_lo) / (sata_hi - sata_lo),
                iat: 1.0 - (p.iat - iat_lo) / (iat_hi - iat_lo),
            };
            (p.annotator_id.clone(), s)
        })
        .collect())
}

/// Arithmetic mean of the three standardized components.
pub fn raw_trust(s: &Standardized) -> Result<f64, GroundTruthError> {
    for v in [s.aq, s.sata, s.iat] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GroundTruthError::OutOfRange(v));
        }
    }
    Ok((s.aq + s.sata + s.iat) / 3.0)
}

/// Divide each raw trust score by its team's mean raw trust.
pub fn team_weights(
    raw_trust: &BTreeMap<String, f64>,
    teams: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, f64>, GroundTruthError> {
    let mut members: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for (annotator, &r) in raw_trust {
        let team = teams
            .get(annotator)
            .ok_or_else(|| GroundTruthError::Unassigned(annotator.clone()))?;
        if team.trim().is_empty() {
            return Err(GroundTruthError::EmptyTeam(annotator.clone()));
        }
        members.entry(team.as_str()).or_default().push((annotator, r));
    }
    let mut weights = BTreeMap::new();
    for (team, group) in members {
        let mean = group.iter().map(|(_, r)| r).sum::<f64>() / group.len() as f64;
        if mean <= 0.0 {
            return Err(GroundTruthError::DegenerateTeam(team.to_string()));
        }
        for (annotator, r) in group {
            weights.insert(annotator.to_string(), r / mean);
        }
    }
    Ok(weights)
}

/// Full weight derivation from raw profiles.
pub fn derive_weights(profiles: &[AnnotatorProfile]) -> Result<TrustWeights, GroundTruthError> {
    for p in profiles {
        if p.team_id.trim().is_empty() {
            return Err(GroundTruthError::EmptyTeam(p.annotator_id.clone()));
        }
    }
    let standardized = standardize(profiles)?;
    let raw: BTreeMap<String, f64> = standardized
        .iter()
        .map(|(id, s)| raw_trust(s).map(|r| (id.clone(), r)))
        .collect::<Result<_, _>>()?;
    let teams: BTreeMap<String, String> = profiles
        .iter()
        .map(|p| (p.annotator_id.clone(), p.team_id.clone()))
        .collect();
    let weight = team_weights(&raw, &teams)?;
    Ok(TrustWeights {
        standardized,
        raw_trust: raw,
        weight,
    })
}

/// Weighted mean of binary labels, binarised at `threshold` (ties go to 1).
pub fn weighted_label(
    record_id: &str,
    labels: &BTreeMap<String, u8>,
    weights: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<WeightedLabel, GroundTruthError> {
    if labels.is_empty() {
        return Err(GroundTruthError::NoLabels(record_id.to_string()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (annotator, &y) in labels {
        if y > 1 {
            return Err(GroundTruthError::NonBinary {
                record: record_id.to_string(),
                label: y,
            });
        }
        let w = *weights
            .get(annotator)
            .ok_or_else(|| GroundTruthError::MissingWeight {
                record: record_id.to_string(),
                annotator: annotator.clone(),
            })?;
        num += w * f64::from(y);
        den += w;
    }
    if den <= 0.0 {
        return Err(GroundTruthError::ZeroWeight(record_id.to_string()));
    }
    let y_hat = num / den;
    Ok(WeightedLabel {
        record_id: record_id.to_string(),
        y_hat,
        hard_label: u8::from(y_hat >= threshold),
        threshold,
    })
}

#[derive(Deserialize)]
struct ProfileRow {
    annotator_id: String,
    team_id: String,
    aq: f64,
    sata: f64,
    iat: f64,
}

/// Read `annotator_id, team_id, aq, sata, iat` rows.
pub fn load_profiles(path: &Path) -> Result<Vec<AnnotatorProfile>, GroundTruthError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| GroundTruthError::Input(format!("{}: {e}", path.display())))?;
    reader
        .deserialize::<ProfileRow>()
        .enumerate()
        .map(|(i, row)| {
            row.map(|r| AnnotatorProfile {
                annotator_id: r.annotator_id,
                team_id: r.team_id,
                aq: r.aq,
                sata: r.sata,
                iat: r.iat,
            })
            .map_err(|e| GroundTruthError::Input(format!("{} row {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_weighted_labels(path: &Path, labels: &[WeightedLabel]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record_id", "y_hat", "hard_label"])?;
    for l in labels {
        w.write_record([
            l.record_id.clone(),
            format!("{:.6}", l.y_hat),
            l.hard_label.to_string(),
        ])?;
    }
    w.flush()
}
