//! Experiment protocols at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::binomial;
use thiserror::Error;

use super::bleu::{bleu_self_diversity, BleuConfig, BleuError};
use super::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::backend::{BackendError, BigramGenerator, BowClassifier, BowConfig, ClassifierBackend, GeneratorBackend, TrainingReport};
use crate::classifier::{augment_training_set, train_derailment_classifier, AugmentConfig, AugmentReport, ClassifierError};
use crate::forecast::{forecast_batch, majority_vote, BatchReport, ForecastConfig, ForecastError, PrefixPolicy};
use crate::generator::{build_training_pairs, serialize, train_bigram_generator, GeneratorError, KPolicy, PairReport};
use crate::model::{Conversation, TieRule};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error("{0}")]
    Argument(String),
}

/// Majority accuracy of `l` independent votes each correct with probability
/// `p`. Ties (even `l`) count as half correct, which is what a fixed tie rule
/// scores on balanced classes.
pub fn exact_majority_accuracy(p: f64, l: usize) -> f64 {
    let l64 = l as u64;
    let mut acc = 0.0;
    for j in 0..=l {
        let mass = binomial(l64, j as u64) * p.powi(j as i32) * (1.0 - p).powi((l - j) as i32);
        if 2 * j > l {
            acc += mass;
        } else if 2 * j == l {
            acc += 0.5 * mass;
        }
    }
    acc
}

/// Monte Carlo estimate of [`exact_majority_accuracy`] with balanced gold
/// labels and `tie_rule` applied to ties.
pub fn simulate_vote_accuracy(p: f64, l: usize, trials: usize, seed: u64, tie_rule: TieRule) -> f64 {
    assert!(l >= 1 && trials >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut votes = vec![false; l];
    let mut correct = 0usize;
    for _ in 0..trials {
        let gold = rng.gen_bool(0.5);
        for v in votes.iter_mut() {
            *v = if rng.gen_bool(p) { gold } else { !gold };
        }
        if majority_vote(&votes, tie_rule).expect("non-empty") == gold {
            correct += 1;
        }
    }
    correct as f64 / trials as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivationReport {
    pub all_turns: MetricsReport,
    pub benign_prefix: MetricsReport,
    /// `all_turns.accuracy - benign_prefix.accuracy`.
    pub gap: f64,
    pub all_turns_training: TrainingReport,
    pub benign_prefix_training: TrainingReport,
}

fn view(c: &Conversation, prefix_only: bool, scheme: &crate::generator::SerializationScheme) -> Result<String, GeneratorError> {
    let turns = if prefix_only { &c.turns[..c.prefix_len] } else { &c.turns[..] };
    serialize(turns, scheme)
}

/// Trains one classifier on full transcripts and one on benign prefixes and
/// evaluates each on the same view of `test`.
pub fn run_motivation_experiment(
    train: &[Conversation],
    test: &[Conversation],
    bow: &BowConfig,
    scheme: &crate::generator::SerializationScheme,
) -> Result<MotivationReport, ExperimentError> {
    let run = |prefix_only: bool| -> Result<(MetricsReport, TrainingReport), ExperimentError> {
        let examples = train
            .iter()
            .map(|c| Ok((view(c, prefix_only, scheme)?, c.outcome.is_derailed())))
            .collect::<Result<Vec<_>, GeneratorError>>()?;
        let (clf, report) = BowClassifier::train(&examples, bow.clone())?;
        let mut preds = Vec::with_capacity(test.len());
        for c in test {
            preds.push(clf.predict_proba(&view(c, prefix_only, scheme)?)? >= 0.5);
        }
        let golds: Vec<bool> = test.iter().map(|c| c.outcome.is_derailed()).collect();
        Ok((compute_metrics(&preds, &golds)?, report))
    };
    let (all_turns, all_turns_training) = run(false)?;
    let (benign_prefix, benign_prefix_training) = run(true)?;
    Ok(MotivationReport {
        gap: all_turns.accuracy - benign_prefix.accuracy,
        all_turns,
        benign_prefix,
        all_turns_training,
        benign_prefix_training,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Synthetic continuations per training conversation.
    pub augment_l: usize,
    pub bow: BowConfig,
    /// Sampling, serialization, voting, and the run seed.
    pub forecast: ForecastConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { augment_l: 2, bow: BowConfig::default(), forecast: ForecastConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub generator: BigramGenerator,
    pub classifier: BowClassifier,
    pub pair_report: PairReport,
    pub augment_report: AugmentReport,
    pub training_report: TrainingReport,
}

/// Trains the bigram generator on gold-prefix pairs, augments, and trains the
/// bag-of-words classifier.
pub fn train_pipeline(train: &[Conversation], config: &PipelineConfig) -> Result<TrainedPipeline, ExperimentError> {
    let scheme = &config.forecast.scheme;
    let (pairs, pair_report) = build_training_pairs(train, scheme, KPolicy::GoldPrefix)?;
    let generator = train_bigram_generator(&pairs, scheme)?;
    let augment = AugmentConfig {
        l: config.augment_l,
        params: config.forecast.params.clone(),
        scheme: scheme.clone(),
        seed: config.forecast.seed,
        max_turns_cap: config.forecast.max_turns_cap,
    };
    let (examples, augment_report) = augment_training_set(train, &generator, &augment)?;
    let (classifier, training_report) = train_derailment_classifier(BowClassifier::new(config.bow.clone()), &examples)?;
    Ok(TrainedPipeline { generator, classifier, pair_report, augment_report, training_report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedBatch {
    pub metrics: MetricsReport,
    pub batch: BatchReport,
}

/// Forecasts `test` from gold prefixes and scores against gold outcomes.
pub fn evaluate_forecasts<G, C>(test: &[Conversation], g: &G, f: &C, config: &ForecastConfig) -> Result<EvaluatedBatch, ExperimentError>
where
    G: GeneratorBackend + ?Sized,
    C: ClassifierBackend + ?Sized,
{
    let b = forecast_batch(test, PrefixPolicy::Gold, g, f, config);
    let preds: Vec<bool> = b.records.iter().map(|r| r.final_label).collect();
    let golds: Vec<bool> = b.records.iter().map(|r| r.gold).collect();
    Ok(EvaluatedBatch { metrics: compute_metrics(&preds, &golds)?, batch: b.report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCountRow {
    #[serde(rename = "L")]
    pub samples: usize,
    pub metrics: MetricsReport,
    pub derailment_rate: f64,
}

/// One metrics row per `L`. Continuations are sampled once at `max(L)` and
/// the first `L` are used for each row, so rows share samples.
pub fn ablate_vote_count<G, C>(
    validation: &[Conversation],
    g: &G,
    f: &C,
    config: &ForecastConfig,
    l_values: &[usize],
) -> Result<Vec<VoteCountRow>, ExperimentError>
where
    G: GeneratorBackend + ?Sized,
    C: ClassifierBackend + ?Sized,
{
    let max_l = *l_values.iter().max().ok_or_else(|| ExperimentError::Argument("no L values".into()))?;
    if l_values.contains(&0) {
        return Err(ExperimentError::Argument("L must be >= 1".into()));
    }
    let full = ForecastConfig { samples: max_l, ..config.clone() };
    let b = forecast_batch(validation, PrefixPolicy::Gold, g, f, &full);
    let golds: Vec<bool> = b.records.iter().map(|r| r.gold).collect();
    l_values
        .iter()
        .map(|&l| {
            let preds = b
                .records
                .iter()
                .map(|r| majority_vote(&r.votes[..l], config.tie_rule))
                .collect::<Result<Vec<_>, _>>()?;
            let metrics = compute_metrics(&preds, &golds)?;
            let rate = preds.iter().filter(|&&p| p).count() as f64 / preds.len() as f64;
            Ok(VoteCountRow { samples: l, metrics, derailment_rate: rate })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixLengthRow {
    pub k: usize,
    pub evaluated: usize,
    /// Conversations with `n <= k`.
    pub excluded: usize,
    pub skipped: usize,
    pub metrics: Option<MetricsReport>,
    pub median_generated_turns: Option<usize>,
}

fn lower_median(mut v: Vec<usize>) -> Option<usize> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

/// Forecasts from the first `k` turns for each `k`, with open-ended
/// generation.
pub fn ablate_prefix_length<G, C>(
    test: &[Conversation],
    g: &G,
    f: &C,
    config: &ForecastConfig,
    k_values: &[usize],
) -> Result<Vec<PrefixLengthRow>, ExperimentError>
where
    G: GeneratorBackend + ?Sized,
    C: ClassifierBackend + ?Sized,
{
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        if k == 0 {
            return Err(ExperimentError::Argument("k must be >= 1".into()));
        }
        let eligible: Vec<Conversation> = test.iter().filter(|c| c.turns.len() > k).cloned().collect();
        let excluded = test.len() - eligible.len();
        let b = forecast_batch(&eligible, PrefixPolicy::Fixed(k), g, f, config);
        let metrics = if b.records.is_empty() {
            None
        } else {
            let preds: Vec<bool> = b.records.iter().map(|r| r.final_label).collect();
            let golds: Vec<bool> = b.records.iter().map(|r| r.gold).collect();
            Some(compute_metrics(&preds, &golds)?)
        };
        let lengths = b.forecasts.iter().flat_map(|fc| fc.continuations.continuations.iter().map(Vec::len)).collect();
        rows.push(PrefixLengthRow {
            k,
            evaluated: b.records.len(),
            excluded,
            skipped: b.report.skipped.len(),
            metrics,
            median_generated_turns: lower_median(lengths),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub conversations: usize,
    pub mean_self_bleu: f64,
    pub config: BleuConfig,
}

/// Mean leave-one-out self-BLEU over the sampled continuation sets of `test`.
pub fn measure_diversity<G: GeneratorBackend + ?Sized>(
    test: &[Conversation],
    g: &G,
    config: &ForecastConfig,
    bleu: &BleuConfig,
) -> Result<DiversityReport, ExperimentError> {
    if config.samples < 2 {
        return Err(ExperimentError::Argument("self-diversity needs L >= 2".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for c in test {
        let seed = crate::derive_seed(config.seed, &c.id);
        let sampling = crate::generator::SamplingConfig {
            samples: config.samples,
            params: config.params.clone(),
            scheme: config.scheme.clone(),
            seed,
            max_turns_cap: config.max_turns_cap,
        };
        let s = crate::generator::sample_continuations(g, c, c.prefix_len, &sampling)?;
        sum += bleu_self_diversity(&s.set, bleu)?;
        n += 1;
    }
    Ok(DiversityReport { conversations: n, mean_self_bleu: if n == 0 { 0.0 } else { sum / n as f64 }, config: *bleu })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert!((exact_majority_accuracy(0.6, 5) - 0.68256).abs() < 1e-12);
        assert!((exact_majority_accuracy(0.6, 1) - 0.6).abs() < 1e-12);
        assert!((exact_majority_accuracy(0.6, 2) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn lower_median_picks_lower() {
        assert_eq!(lower_median(vec![3, 1, 2, 4]), Some(2));
        assert_eq!(lower_median(vec![]), None);
    }
}
