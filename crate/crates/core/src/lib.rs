//! Forecasting conversation derailment by sampling plausible futures.
//!
//! Given the benign opening turns of a conversation, a generator backend
//! samples `L` continuations, a classifier scores each history+continuation
//! text, and the binarized scores are majority-voted into one forecast.
//!
//! Module map:
//!
//! - [`model`]: conversations, turns, orientation labels, forecast records
//! - [`ingest`]: corpus adapters, canonical JSONL, deterministic splits
//! - [`orientation`]: annotation prompts, response parsing, agreement stats
//! - [`backend`]: backend traits and desk-scale implementations
//! - [`generator`]: serialization, training pairs, continuation sampling
//! - [`classifier`]: augmented training sets, training, scoring
//! - [`forecast`]: majority-vote inference
//! - [`eval`]: metrics, significance, diversity, experiment protocols
//! - [`synthetic`]: planted-signal corpora for end-to-end checks

pub mod backend;
pub mod classifier;
pub mod eval;
pub mod forecast;
pub mod generator;
pub mod ingest;
pub mod model;
pub mod orientation;
pub mod synthetic;

pub use model::{
    ContinuationSet, Conversation, ForecastResult, OrientationLabel, Outcome, Source, TieRule, Turn,
};

/// Derives a per-item seed from a run seed and a stable item key.
///
/// FNV-1a over the key, mixed with the seed by SplitMix64, so the result does
/// not depend on iteration order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
