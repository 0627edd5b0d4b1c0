//! Report rendering: SVG bar charts and Markdown tables.
//!
//! Everything here is a pure function of data already written to the run
//! directory; nothing is recomputed at render time.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compliance::{ComplianceClass, TokenDelta};
use crate::stats::{CollapseEntry, Metric};

/// One row of the failure-mode table: a non-compliant class seen for a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub class: ComplianceClass,
    pub model_id: String,
    /// Non-compliant outputs of this class (per side).
    pub outputs: usize,
    /// Pairs containing at least one output of this class.
    pub pairs: usize,
    /// Mean ROUGE-1 of the autistic rewrite against its source over those pairs.
    pub rouge1_aut: Option<f64>,
    /// Mean autistic-to-NT cosine over those pairs where both sides had text.
    pub cross_sim: Option<f64>,
}

pub fn failure_label(class: ComplianceClass) -> (&'static str, &'static str) {
    match class {
        ComplianceClass::Erasure => (
            "Systemic output erasure",
            "Empty or placeholder output once framing is stripped",
        ),
        ComplianceClass::HallucinationSuspect => (
            "Stereotyped hallucination",
            "Fluent content with almost no lexical overlap with the source",
        ),
        ComplianceClass::MetaCommentary => (
            "Task-evasive meta-commentary",
            "Task framing and headers in place of rewrite content",
        ),
        ComplianceClass::Refusal => ("Refusal", "Declines to produce the rewrite"),
        ComplianceClass::Compliant => ("Compliant", "No failure detected"),
    }
}

fn opt3(v: Option<f64>) -> String {
    v.map_or_else(|| "−".to_string(), |x| format!("{x:.3}"))
}

pub const FAILURE_HEADER: [&str; 5] = [
    "Failure Mode",
    "Model(s)",
    "Characteristic Symptom",
    "ROUGE-1 (AUT)",
    "AUT↔NT Sim.",
];

pub fn failure_table_md(rows: &[FailureRow]) -> String {
    let mut s = format!("| {} |\n|---|---|---|---|---|\n", FAILURE_HEADER.join(" | "));
    if rows.is_empty() {
        s.push_str("| none | − | No non-compliant outputs | − | − |\n");
    }
    for r in rows {
        let (mode, symptom) = failure_label(r.class);
        let _ = writeln!(
            s,
            "| {mode} | {} | {symptom} ({} outputs in {} pairs) | {} | {} |",
            r.model_id,
            r.outputs,
            r.pairs,
            opt3(r.rouge1_aut),
            opt3(r.cross_sim)
        );
    }
    s
}

pub fn collapse_table_md(entries: &[CollapseEntry], threshold: f64) -> String {
    let mut s = String::from("| Model | Mean AUT↔NT cosine | N | Collapsed |\n|---|---|---|---|\n");
    for e in entries {
        let _ = writeln!(
            s,
            "| {} | {:.3} | {} | {} |",
            e.model_id,
            e.mean_cos_cross,
            e.n,
            if e.collapsed { "yes" } else { "no" }
        );
    }
    if !entries.is_empty() {
        let mean = entries.iter().map(|e| e.mean_cos_cross).sum::<f64>() / entries.len() as f64;
        let _ = write!(
            s,
            "\nMean across models: {mean:.3}. A model is flagged when its mean exceeds {threshold}.\n"
        );
    }
    s
}

pub fn token_delta_table_md(rows: &[TokenDelta]) -> String {
    let mut s = String::from(
        "| Rank | Token | AUT per 10k | NT per 10k | Δ per 10k (AUT−NT) |\n|---|---|---|---|---|\n",
    );
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {:.1} | {:.1} | {:+.1} |",
            i + 1,
            r.token,
            r.per10k_a,
            r.per10k_b,
            r.delta
        );
    }
    s
}

/// Round step for about `target` ticks spanning `span`.
fn tick_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Vertical bar chart of one value per model, with a zero baseline.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 110.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;

    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let min = bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
    let span = if max - min > 0.0 { max - min } else { 1.0 };
    let step = tick_step(span, 5);
    let lo = (min / step).floor() * step;
    let hi = ((max / step).ceil() * step).max(lo + step);
    let y = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    // Grid and ticks.
    let n_ticks = ((hi - lo) / step).round() as i64;
    for k in 0..=n_ticks {
        let v = lo + k as f64 * step;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#e0e0e0"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            yy + 4.0,
            format_tick(v, step)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    let slot = if bars.is_empty() { plot_w } else { plot_w / bars.len() as f64 };
    let bar_w = slot * 0.6;
    let zero = y(0.0);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + i as f64 * slot + (slot - bar_w) / 2.0;
        let (top, height) = if *v >= 0.0 { (y(*v), zero - y(*v)) } else { (zero, y(*v) - zero) };
        let fill = if *v >= 0.0 { "#4c72b0" } else { "#dd8452" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{bar_w:.1}" height="{height:.1}" fill="{fill}"><title>{}: {v:+.4}</title></rect>"#,
            escape(label)
        );
        let cx = x + bar_w / 2.0;
        let ly = TOP + plot_h + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-40 {cx:.1} {ly:.1})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="black"/>"#,
        LEFT + plot_w
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#,
        TOP + plot_h
    );
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    format!("{v:.decimals$}")
}

pub fn chart_title(metric: Metric) -> &'static str {
    match metric {
        Metric::Rouge1 => "Lexical divergence (Δ ROUGE-1, NT − AUT)",
        Metric::RougeL => "Structural divergence (Δ ROUGE-L, NT − AUT)",
        Metric::Cosine => "Semantic divergence (Δ cosine, NT − AUT)",
        Metric::Polarity => "Affective divergence (Δ polarity change, NT − AUT)",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_rect_per_model() {
        let svg = bar_chart_svg("t", "Δ", &[("a".into(), 0.02), ("b<c".into(), -0.01)]);
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        let empty = bar_chart_svg("t", "Δ", &[]);
        assert_eq!(empty.matches("<rect x=").count(), 0);
    }

    #[test]
    fn ticks_are_round() {
        assert_eq!(tick_step(0.05, 5), 0.01);
        assert_eq!(tick_step(3.0, 5), 1.0);
        assert_eq!(format_tick(0.020000000001, 0.01), "0.02");
        assert_eq!(format_tick(-1e-18, 0.01), "0.00");
    }

    #[test]
    fn collapse_flags_render() {
        let entries = vec![
            CollapseEntry { model_id: "guard".into(), mean_cos_cross: 0.991, n: 3, collapsed: true },
            CollapseEntry { model_id: "dolphin".into(), mean_cos_cross: 0.449, n: 3, collapsed: false },
        ];
        let md = collapse_table_md(&entries, 0.85);
        assert!(md.contains("| guard | 0.991 | 3 | yes |"));
        assert!(md.contains("| dolphin | 0.449 | 3 | no |"));
    }

    #[test]
    fn failure_table_shape() {
        let md = failure_table_md(&[FailureRow {
            class: ComplianceClass::Erasure,
            model_id: "nemo".into(),
            outputs: 4,
            pairs: 4,
            rouge1_aut: Some(0.008),
            cross_sim: None,
        }]);
        assert!(md.starts_with("| Failure Mode | Model(s) | Characteristic Symptom | ROUGE-1 (AUT) | AUT↔NT Sim. |"));
        assert!(md.contains("| Systemic output erasure | nemo |"));
        assert!(md.contains("| 0.008 | − |"));
    }
}
