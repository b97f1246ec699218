//! Inference: sample `L` continuations, score each, majority-vote.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ClassifierBackend, GenerationParams, GeneratorBackend};
use crate::classifier::{score, ClassifierError};
use crate::derive_seed;
use crate::generator::{sample_continuations, GeneratorError, SamplingConfig, SerializationScheme, DEFAULT_MAX_TURNS_CAP};
use crate::model::{ContinuationSet, Conversation, ForecastResult, TieRule};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("empty vote list")]
    NoVotes,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Strict majority of `votes`; exact ties resolve per `tie_rule`.
pub fn majority_vote(votes: &[bool], tie_rule: TieRule) -> Result<bool, ForecastError> {
    if votes.is_empty() {
        return Err(ForecastError::NoVotes);
    }
    let yes = votes.iter().filter(|&&v| v).count();
    let no = votes.len() - yes;
    Ok(match yes.cmp(&no) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => tie_rule == TieRule::PredictDerailment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Binarize each probability, then majority-vote.
    #[default]
    Vote,
    /// Threshold the mean probability instead.
    MeanProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Continuations per conversation (`L`).
    pub samples: usize,
    pub params: GenerationParams,
    pub scheme: SerializationScheme,
    pub threshold: f64,
    pub tie_rule: TieRule,
    pub seed: u64,
    pub max_turns_cap: usize,
    pub aggregation: Aggregation,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            params: GenerationParams::default(),
            scheme: SerializationScheme::default(),
            threshold: 0.5,
            tie_rule: TieRule::default(),
            seed: 0,
            max_turns_cap: DEFAULT_MAX_TURNS_CAP,
            aggregation: Aggregation::Vote,
        }
    }
}

impl ForecastConfig {
    fn sampling(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            samples: self.samples,
            params: self.params.clone(),
            scheme: self.scheme.clone(),
            seed,
            max_turns_cap: self.max_turns_cap,
        }
    }
}

/// A forecast together with the continuations it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub result: ForecastResult,
    pub continuations: ContinuationSet,
    /// Oldest turns the classifier dropped, per continuation.
    pub truncated_turns: Vec<usize>,
}

/// Forecasts from the first `k` turns of `c`, sampling with `seed`.
pub fn forecast<G, C>(c: &Conversation, k: usize, g: &G, f: &C, config: &ForecastConfig, seed: u64) -> Result<Forecast, ForecastError>
where
    G: GeneratorBackend + ?Sized,
    C: ClassifierBackend + ?Sized,
{
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(ForecastError::BadThreshold(config.threshold));
    }
    let sampled = sample_continuations(g, c, k, &config.sampling(seed))?;
    decide(&c.turns[..k], sampled.set, f, config)
}

/// Scores an existing continuation set against `history` and votes.
pub fn decide<C: ClassifierBackend + ?Sized>(
    history: &[crate::model::Turn],
    continuations: ContinuationSet,
    f: &C,
    config: &ForecastConfig,
) -> Result<Forecast, ForecastError> {
    let scored = continuations
        .continuations
        .par_iter()
        .map(|cont| score(f, history, cont, &config.scheme))
        .collect::<Result<Vec<_>, _>>()?;
    let probabilities: Vec<f64> = scored.iter().map(|s| s.probability).collect();
    let votes: Vec<bool> = probabilities.iter().map(|&p| p >= config.threshold).collect();
    let final_label = match config.aggregation {
        Aggregation::Vote => majority_vote(&votes, config.tie_rule)?,
        Aggregation::MeanProbability => {
            if probabilities.is_empty() {
                return Err(ForecastError::NoVotes);
            }
            probabilities.iter().sum::<f64>() / probabilities.len() as f64 >= config.threshold
        }
    };
    Ok(Forecast {
        result: ForecastResult {
            conversation_id: continuations.conversation_id.clone(),
            probabilities,
            votes,
            final_label,
            threshold: config.threshold,
            tie_rule: config.tie_rule,
        },
        truncated_turns: scored.iter().map(|s| s.dropped_turns).collect(),
        continuations,
    })
}

/// One line of batch output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub conversation_id: String,
    pub probabilities: Vec<f64>,
    pub votes: Vec<bool>,
    #[serde(rename = "final")]
    pub final_label: bool,
    pub gold: bool,
    #[serde(rename = "L")]
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedForecast {
    pub conversation_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub attempted: usize,
    pub succeeded: usize,
    pub skipped: Vec<SkippedForecast>,
    /// Number of derailment votes -> conversations.
    pub vote_histogram: BTreeMap<usize, usize>,
    pub derailment_rate: f64,
    pub truncated_scores: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub forecasts: Vec<Forecast>,
    pub records: Vec<ForecastRecord>,
    pub report: BatchReport,
}

/// How many leading turns to forecast from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "k")]
pub enum PrefixPolicy {
    /// The conversation's own benign prefix.
    Gold,
    Fixed(usize),
}

impl PrefixPolicy {
    pub fn k_for(self, c: &Conversation) -> usize {
        match self {
            PrefixPolicy::Gold => c.prefix_len,
            PrefixPolicy::Fixed(k) => k,
        }
    }
}

/// Forecasts every conversation, skipping (and listing) those that fail.
///
/// Conversation `c` samples with `derive_seed(config.seed, c.id)`; records
/// follow input order.
pub fn forecast_batch<G, C>(conversations: &[Conversation], policy: PrefixPolicy, g: &G, f: &C, config: &ForecastConfig) -> Batch
where
    G: GeneratorBackend + ?Sized,
    C: ClassifierBackend + ?Sized,
{
    let outcomes: Vec<(u64, Result<Forecast, ForecastError>)> = conversations
        .par_iter()
        .map(|c| {
            let seed = derive_seed(config.seed, &c.id);
            (seed, forecast(c, policy.k_for(c), g, f, config, seed))
        })
        .collect();

    let mut batch = Batch { forecasts: Vec::new(), records: Vec::new(), report: BatchReport::default() };
    batch.report.attempted = conversations.len();
    for (c, (seed, outcome)) in conversations.iter().zip(outcomes) {
        match outcome {
            Ok(fc) => {
                let r = &fc.result;
                *batch.report.vote_histogram.entry(r.votes.iter().filter(|&&v| v).count()).or_insert(0) += 1;
                batch.report.truncated_scores += fc.truncated_turns.iter().filter(|&&t| t > 0).count();
                batch.records.push(ForecastRecord {
                    conversation_id: c.id.clone(),
                    probabilities: r.probabilities.clone(),
                    votes: r.votes.clone(),
                    final_label: r.final_label,
                    gold: c.outcome.is_derailed(),
                    samples: r.votes.len(),
                    seed,
                });
                batch.forecasts.push(fc);
            }
            Err(e) => batch.report.skipped.push(SkippedForecast { conversation_id: c.id.clone(), error: e.to_string() }),
        }
    }
    batch.report.succeeded = batch.records.len();
    if !batch.records.is_empty() {
        batch.report.derailment_rate =
            batch.records.iter().filter(|r| r.final_label).count() as f64 / batch.records.len() as f64;
    }
    batch
}
