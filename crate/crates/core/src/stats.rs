//! Paired nonparametric statistics over NT-minus-autistic deltas.
//!
//! Zero differences follow the Pratt procedure: they take part in ranking
//! and are then dropped, so they shift the ranks of the non-zero deltas
//! without contributing to either signed sum.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::metrics::MetricRow;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    Empty,
    #[error("bootstrap needs at least 2 deltas, got {0}")]
    TooFewForBootstrap(usize),
    #[error("effect size is undefined when every delta is zero")]
    UndefinedEffect,
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("non-finite delta at index {0}")]
    NonFinite(usize),
    #[error("unknown metric {0:?}; expected one of rouge1, rougeL, cosine, polarity")]
    UnknownMetric(String),
}

/// Non-zero sample sizes up to this use the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const COLLAPSE_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMethod::Exact => "Exact",
            TestMethod::NormalApprox => "NormalApprox",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(W+, W-).
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_nonzero: usize,
    pub n_zero: usize,
    /// Every delta was zero; p is reported as 1.
    pub degenerate: bool,
}

fn check_finite(deltas: &[f64]) -> Result<(), StatsError> {
    if deltas.is_empty() {
        return Err(StatsError::Empty);
    }
    match deltas.iter().position(|d| !d.is_finite()) {
        Some(i) => Err(StatsError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Signed Pratt ranks of the non-zero deltas, plus whether any |d| tie.
fn pratt_ranks(deltas: &[f64]) -> (Vec<(f64, bool)>, bool) {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].abs().total_cmp(&deltas[b].abs()));
    let mut ranks = vec![0.0; deltas.len()];
    let mut ties = false;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && deltas[order[j + 1]].abs() == deltas[order[i]].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        if j > i && deltas[order[i]] != 0.0 {
            ties = true;
        }
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let signed = deltas
        .iter()
        .zip(ranks)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, r)| (r, *d > 0.0))
        .collect();
    (signed, ties)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Exact two-sided p over all 2^n sign assignments of the given ranks.
///
/// Ranks are doubled so midranks become integers, then the null
/// distribution of doubled W+ is built by subset-sum counting.
pub fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let t = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=t].iter().sum::<f64>() / all;
    let upper: f64 = counts[t..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<WilcoxonResult, StatsError> {
    check_finite(deltas)?;
    let n_zero = deltas.iter().filter(|d| **d == 0.0).count();
    let (signed, _ties) = pratt_ranks(deltas);
    let n = signed.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            method: TestMethod::NormalApprox,
            n_nonzero: 0,
            n_zero,
            degenerate: true,
        });
    }
    let w_plus: f64 = signed.iter().filter(|(_, pos)| *pos).map(|(r, _)| r).sum();
    let w_minus: f64 = signed.iter().filter(|(_, pos)| !*pos).map(|(r, _)| r).sum();
    let ranks: Vec<f64> = signed.iter().map(|(r, _)| *r).collect();

    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p_value(&ranks, w_plus), TestMethod::Exact)
    } else {
        // Conditional moments given the realised ranks absorb both the tie
        // correction and the Pratt rank shift.
        let mean = ranks.iter().sum::<f64>() / 2.0;
        let var = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let p = (2.0 * normal_sf(dev / var.sqrt())).min(1.0);
        (p, TestMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value,
        method,
        n_nonzero: n,
        n_zero,
        degenerate: false,
    })
}

/// (T+ - T-) / (T+ + T-) over Pratt signed ranks.
pub fn rank_biserial(deltas: &[f64]) -> Result<f64, StatsError> {
    check_finite(deltas)?;
    let (signed, _) = pratt_ranks(deltas);
    if signed.is_empty() {
        return Err(StatsError::UndefinedEffect);
    }
    let (mut tp, mut tm) = (0.0, 0.0);
    for (r, pos) in signed {
        if pos {
            tp += r;
        } else {
            tm += r;
        }
    }
    Ok((tp - tm) / (tp + tm))
}

/// Resampled means, sorted. Resample `i` draws from its own ChaCha stream
/// keyed by (seed, i), so the result does not depend on evaluation order.
pub fn bootstrap_means(deltas: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let n = deltas.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sum: f64 = (0..n).map(|_| deltas[rng.random_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    means
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_interval(sorted_means: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    if sorted_means.is_empty() {
        return Err(StatsError::Empty);
    }
    let alpha = 1.0 - level;
    Ok((quantile(sorted_means, alpha / 2.0), quantile(sorted_means, 1.0 - alpha / 2.0)))
}

/// Percentile bootstrap interval for the mean delta.
pub fn bootstrap_ci(deltas: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), StatsError> {
    check_finite(deltas)?;
    if deltas.len() < 2 {
        return Err(StatsError::TooFewForBootstrap(deltas.len()));
    }
    if resamples == 0 {
        return Err(StatsError::Empty);
    }
    percentile_interval(&bootstrap_means(deltas, resamples, seed), level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Rouge1,
    RougeL,
    Cosine,
    Polarity,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rouge1, Metric::RougeL, Metric::Cosine, Metric::Polarity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::RougeL => "rougeL",
            Metric::Cosine => "cosine",
            Metric::Polarity => "polarity",
        }
    }

    /// Row label used in the Markdown table.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Rouge1 => "ROUGE-1",
            Metric::RougeL => "ROUGE-L",
            Metric::Cosine => "Cosine similarity",
            Metric::Polarity => "Δ_pol",
        }
    }

    pub fn parse(name: &str) -> Result<Self, StatsError> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| StatsError::UnknownMetric(name.to_string()))
    }

    /// NT minus autistic for one row.
    pub fn delta(self, row: &MetricRow) -> f64 {
        match self {
            Metric::Rouge1 => row.rouge1_nt - row.rouge1_aut,
            Metric::RougeL => row.rouge_l_nt - row.rouge_l_aut,
            Metric::Cosine => row.cos_nt - row.cos_aut,
            Metric::Polarity => row.dpol_nt - row.dpol_aut,
        }
    }
}

pub fn deltas(rows: &[MetricRow], metric: Metric) -> Vec<f64> {
    rows.iter().map(|r| metric.delta(r)).collect()
}

/// Mean NT-minus-autistic delta per model.
pub fn per_model_deltas(rows: &[MetricRow], metric: &str) -> Result<BTreeMap<String, f64>, StatsError> {
    let metric = Metric::parse(metric)?;
    if rows.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in rows {
        let e = acc.entry(row.model_id.clone()).or_default();
        e.0 += metric.delta(row);
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub model_id: String,
    pub mean_cos_cross: f64,
    pub n: usize,
    pub collapsed: bool,
}

/// Per-model mean cross-persona cosine; flagged when above `threshold`.
pub fn collapse_report(rows: &[MetricRow], threshold: f64) -> Vec<CollapseEntry> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for row in rows {
        let e = acc.entry(&row.model_id).or_default();
        e.0 += row.cos_cross;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(m, (s, n))| {
            let mean = s / n as f64;
            CollapseEntry {
                model_id: m.to_string(),
                mean_cos_cross: mean,
                n,
                collapsed: mean > threshold,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub metric: String,
    pub mean_delta: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub effect_r: f64,
    pub n: usize,
    pub n_zero: usize,
    pub method: TestMethod,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSettings {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for StatSettings {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

/// Full cross-condition result for one metric's deltas.
pub fn analyze(metric: &str, deltas: &[f64], settings: &StatSettings) -> Result<StatResult, StatsError> {
    let w = wilcoxon_signed_rank(deltas)?;
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let (ci_low, ci_high) = if deltas.len() >= 2 {
        bootstrap_ci(deltas, settings.resamples, settings.level, settings.seed)?
    } else {
        (mean_delta, mean_delta)
    };
    let effect_r = if w.degenerate { 0.0 } else { rank_biserial(deltas)? };
    Ok(StatResult {
        metric: metric.to_string(),
        mean_delta,
        p_value: w.p_value,
        ci_low,
        ci_high,
        effect_r,
        n: deltas.len(),
        n_zero: w.n_zero,
        method: w.method,
        degenerate: w.degenerate,
    })
}

/// One StatResult per metric, in table order.
pub fn analyze_rows(rows: &[MetricRow], settings: &StatSettings) -> Result<Vec<StatResult>, StatsError> {
    if rows.is_empty() {
        return Err(StatsError::Empty);
    }
    Metric::ALL
        .iter()
        .map(|m| analyze(m.name(), &deltas(rows, *m), settings))
        .collect()
}

pub fn write_stats_csv<W: Write>(results: &[StatResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "metric", "mean_delta", "p_value", "ci_low", "ci_high", "effect_r", "n", "n_zero", "method", "degenerate",
    ])?;
    for r in results {
        w.write_record([
            r.metric.clone(),
            format!("{:.6}", r.mean_delta),
            format!("{:.6e}", r.p_value),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            format!("{:.6}", r.effect_r),
            r.n.to_string(),
            r.n_zero.to_string(),
            r.method.to_string(),
            r.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stats_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<StatResult>> {
    #[derive(Deserialize)]
    struct Row {
        metric: String,
        mean_delta: f64,
        p_value: f64,
        ci_low: f64,
        ci_high: f64,
        effect_r: f64,
        n: usize,
        n_zero: usize,
        method: TestMethod,
        degenerate: bool,
    }
    csv::Reader::from_reader(input)
        .deserialize::<Row>()
        .map(|r| {
            r.map(|r| StatResult {
                metric: r.metric,
                mean_delta: r.mean_delta,
                p_value: r.p_value,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                effect_r: r.effect_r,
                n: r.n,
                n_zero: r.n_zero,
                method: r.method,
                degenerate: r.degenerate,
            })
        })
        .collect()
}

pub fn format_delta(d: f64) -> String {
    let s = format!("{d:+.3}");
    if s == "-0.000" { "+0.000".into() } else { s }
}

pub fn format_p(p: f64) -> String {
    if p >= 0.01 {
        format!("{p:.3}")
    } else if p >= 0.001 {
        format!("{p:.4}")
    } else {
        let s = format!("{p:.2e}");
        match s.split_once('e') {
            Some((m, e)) => format!("{m} × 10^{e}"),
            None => s,
        }
    }
}

/// Rows at or above this p-value show "−" for CI and r.
pub const SIGNIFICANCE: f64 = 0.05;

pub const TABLE1_HEADER: [&str; 5] = ["Metric", "Δ (NT−AUT)", "p-value", "95% CI", "r"];

/// Markdown table with one row per metric. Δ is NT minus autistic;
/// non-significant rows show "−" for CI and r, as stats.csv keeps the values.
pub fn table1_markdown(results: &[StatResult]) -> String {
    let mut s = format!("| {} |\n", TABLE1_HEADER.join(" | "));
    s.push_str("|---|---|---|---|---|\n");
    for r in results {
        let label = Metric::parse(&r.metric).map(|m| m.label()).unwrap_or(&r.metric);
        let p = if r.degenerate {
            format!("{} (degenerate)", format_p(r.p_value))
        } else {
            format_p(r.p_value)
        };
        let (ci, eff) = if r.p_value < SIGNIFICANCE {
            (format!("[{:.3}, {:.3}]", r.ci_low, r.ci_high), format!("{:.2}", r.effect_r))
        } else {
            ("−".to_string(), "−".to_string())
        };
        s.push_str(&format!("| {label} | {} | {p} | {ci} | {eff} |\n", format_delta(r.mean_delta)));
    }
    let n = results.first().map_or(0, |r| r.n);
    s.push_str(&format!(
        "\nN = {n} valid pairs. Δ is NT minus Autistic. p-values are two-sided Wilcoxon signed-rank (Pratt zero handling); r is rank-biserial; \"−\" marks p ≥ {SIGNIFICANCE}.\n"
    ));
    s
}
