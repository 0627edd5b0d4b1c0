//! Batch harness for dual-persona contrastive rewrite evaluation.
//!
//! The pipeline renders persona-paired rewrite prompts over a labelled
//! corpus, collects model outputs through a cached chat gateway, filters
//! non-compliant outputs, scores the surviving pairs lexically, semantically
//! and affectively, and runs paired nonparametric statistics over the
//! NT-minus-autistic deltas. A multi-agent qualitative coding phase and a
//! psychometrically weighted ground-truth derivation sit alongside.

pub mod compliance;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod gateway;
pub mod ground_truth;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod qual;
pub mod report;
pub mod stats;

pub use compliance::{ComplianceClass, ComplianceVerdict, RuleConfig};
pub use corpus::{Condition, RunManifest, SentenceRecord};
pub use metrics::MetricRow;
pub use prompts::{Persona, RenderedPrompt};
pub use stats::{StatResult, TestMethod};
