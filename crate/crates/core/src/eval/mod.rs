//! Metrics, significance testing, diversity, and experiment protocols.

pub mod bleu;
pub mod experiments;
pub mod metrics;
pub mod significance;

pub use bleu::{bleu, bleu_self_diversity, BleuConfig};
pub use metrics::{compute_metrics, MetricsError, MetricsReport};
pub use significance::{two_proportion_z_test, Sided, ZTest};
