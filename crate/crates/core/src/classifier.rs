//! Augmented classifier training sets, training, and scoring.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    whitespace_tokens, BackendError, ClassifierBackend, GenerationParams, GeneratorBackend, TrainableClassifier,
    TrainingReport,
};
use crate::derive_seed;
use crate::generator::{
    sample_continuations, serialize, serialize_lenient, GeneratorError, SampleStatus, SamplingConfig,
    SerializationScheme, DEFAULT_MAX_TURNS_CAP,
};
use crate::model::{Conversation, Turn};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("training needs both classes ({positives} positive of {examples})")]
    SingleClass { positives: usize, examples: usize },
    #[error("nothing to score")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealFuture,
    SyntheticFuture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub conversation_id: String,
    pub provenance: Provenance,
    pub generation_index: Option<usize>,
    /// Gold outcome of the source conversation, whatever the provenance.
    pub label: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Synthetic continuations per conversation.
    pub l: usize,
    pub params: GenerationParams,
    pub scheme: SerializationScheme,
    pub seed: u64,
    pub max_turns_cap: usize,
}

impl AugmentConfig {
    pub fn new(l: usize, params: GenerationParams, scheme: SerializationScheme, seed: u64) -> Self {
        Self { l, params, scheme, seed, max_turns_cap: DEFAULT_MAX_TURNS_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSlot {
    pub conversation_id: String,
    pub generation_index: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentReport {
    pub conversations: usize,
    pub real: usize,
    pub synthetic: usize,
    /// `|d| * (1 + l)`; the shortfall is `expected - real - synthetic`.
    pub expected: usize,
    pub dropped: Vec<DroppedSlot>,
    pub warnings: usize,
    /// Orientation labels, when on, are whatever the dataset carries.
    pub orientation_labels_from_dataset: bool,
}

impl AugmentReport {
    pub fn shortfall(&self) -> usize {
        self.expected - self.real - self.synthetic
    }
}

/// Builds one real-future example plus `l` synthetic-future examples per
/// conversation, all labeled with the conversation's gold outcome.
///
/// Synthetic futures continue the gold benign prefix. Sampling for
/// conversation `c` is seeded with `derive_seed(config.seed, c.id)`, so the
/// output does not depend on dataset order. Failed or placeholder samples are
/// dropped and listed in the report.
pub fn augment_training_set<G: GeneratorBackend + ?Sized>(
    conversations: &[Conversation],
    g: &G,
    config: &AugmentConfig,
) -> Result<(Vec<AugmentedExample>, AugmentReport), ClassifierError> {
    config.scheme.validate().map_err(GeneratorError::from)?;
    let per_conv: Vec<Result<(Vec<AugmentedExample>, Vec<DroppedSlot>, usize), ClassifierError>> =
        conversations.par_iter().map(|c| augment_one(c, g, config)).collect();

    let mut examples = Vec::with_capacity(conversations.len() * (1 + config.l));
    let mut report = AugmentReport {
        conversations: conversations.len(),
        expected: conversations.len() * (1 + config.l),
        orientation_labels_from_dataset: config.scheme.include_orientation,
        ..AugmentReport::default()
    };
    for r in per_conv {
        let (ex, dropped, warnings) = r?;
        for e in &ex {
            match e.provenance {
                Provenance::RealFuture => report.real += 1,
                Provenance::SyntheticFuture => report.synthetic += 1,
            }
        }
        examples.extend(ex);
        report.dropped.extend(dropped);
        report.warnings += warnings;
    }
    if !report.dropped.is_empty() {
        warn!("augmentation dropped {} synthetic slots", report.dropped.len());
    }
    Ok((examples, report))
}

type Augmented = (Vec<AugmentedExample>, Vec<DroppedSlot>, usize);

fn augment_one<G: GeneratorBackend + ?Sized>(
    c: &Conversation,
    g: &G,
    config: &AugmentConfig,
) -> Result<Augmented, ClassifierError> {
    let label = c.outcome.is_derailed();
    let mut out = vec![AugmentedExample {
        conversation_id: c.id.clone(),
        provenance: Provenance::RealFuture,
        generation_index: None,
        label,
        text: serialize(&c.turns, &config.scheme)?,
    }];
    let mut dropped = Vec::new();
    let mut warnings = 0;
    if config.l == 0 {
        return Ok((out, dropped, warnings));
    }

    let sampling = SamplingConfig {
        samples: config.l,
        params: config.params.clone(),
        scheme: config.scheme.clone(),
        seed: derive_seed(config.seed, &c.id),
        max_turns_cap: config.max_turns_cap,
    };
    let drop_all = |reason: String, dropped: &mut Vec<DroppedSlot>| {
        for i in 0..config.l {
            dropped.push(DroppedSlot { conversation_id: c.id.clone(), generation_index: Some(i), reason: reason.clone() });
        }
    };
    let sampled = match sample_continuations(g, c, c.prefix_len, &sampling) {
        Ok(s) => s,
        Err(e) => {
            drop_all(e.to_string(), &mut dropped);
            return Ok((out, dropped, warnings));
        }
    };
    let prefix = &c.turns[..c.prefix_len];
    for (i, (cont, rep)) in sampled.set.continuations.iter().zip(&sampled.reports).enumerate() {
        warnings += rep.warnings.len();
        if let SampleStatus::Placeholder { reason } = &rep.status {
            dropped.push(DroppedSlot { conversation_id: c.id.clone(), generation_index: Some(i), reason: reason.clone() });
            continue;
        }
        let turns: Vec<Turn> = prefix.iter().chain(cont).cloned().collect();
        out.push(AugmentedExample {
            conversation_id: c.id.clone(),
            provenance: Provenance::SyntheticFuture,
            generation_index: Some(i),
            label,
            text: serialize_lenient(&turns, &config.scheme)?,
        });
    }
    Ok((out, dropped, warnings))
}

/// Fits `backend` on the examples with binary cross-entropy.
pub fn train_derailment_classifier<B: TrainableClassifier>(
    mut backend: B,
    examples: &[AugmentedExample],
) -> Result<(B, TrainingReport), ClassifierError> {
    let positives = examples.iter().filter(|e| e.label).count();
    if positives == 0 || positives == examples.len() {
        return Err(ClassifierError::SingleClass { positives, examples: examples.len() });
    }
    let pairs: Vec<(String, bool)> = examples.iter().map(|e| (e.text.clone(), e.label)).collect();
    let report = backend.fit(&pairs)?;
    Ok((backend, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub probability: f64,
    /// Oldest turns dropped to fit the backend's input capacity.
    pub dropped_turns: usize,
}

/// Derailment probability of `history ++ continuation`.
///
/// When the rendering exceeds the backend's capacity, whole turns are dropped
/// from the front until it fits or one turn remains.
pub fn score<C: ClassifierBackend + ?Sized>(
    backend: &C,
    history: &[Turn],
    continuation: &[Turn],
    scheme: &SerializationScheme,
) -> Result<Scored, ClassifierError> {
    let turns: Vec<&Turn> = history.iter().chain(continuation).collect();
    if turns.is_empty() {
        return Err(ClassifierError::Empty);
    }
    let owned: Vec<Turn> = turns.into_iter().cloned().collect();
    let mut start = 0;
    let mut text = serialize_lenient(&owned, scheme)?;
    if let Some(cap) = backend.max_input_tokens() {
        while start + 1 < owned.len() && whitespace_tokens(&text).count() > cap {
            start += 1;
            text = serialize_lenient(&owned[start..], scheme)?;
        }
    }
    let probability = backend.predict_proba(&text)?;
    if !(0.0..=1.0).contains(&probability) {
        return Err(BackendError::Protocol(format!("probability {probability} outside [0, 1]")).into());
    }
    Ok(Scored { probability, dropped_turns: start })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BowClassifier, BowConfig, FnGenerator, KeywordStubClassifier};
    use crate::model::{Outcome, Source};

    fn conv(id: &str, derailed: bool) -> Conversation {
        let last = if derailed { "you idiot" } else { "thanks friend" };
        Conversation {
            id: id.into(),
            source: Source::Synthetic,
            prefix_len: 2,
            outcome: Outcome::from_derailed(derailed),
            turns: vec![Turn::new("a", "hello there"), Turn::new("b", "hi"), Turn::new("a", last)],
        }
    }

    fn echo() -> FnGenerator<impl Fn(&str, &GenerationParams, u64) -> Result<String, BackendError> + Send + Sync> {
        FnGenerator::new(|_: &str, _: &GenerationParams, seed: u64| Ok(format!("b: reply {seed}")))
    }

    fn config(l: usize) -> AugmentConfig {
        AugmentConfig::new(l, GenerationParams::default(), SerializationScheme::default(), 9)
    }

    #[test]
    fn counts_and_labels() {
        let d: Vec<_> = (0..10).map(|i| conv(&format!("c{i}"), i % 2 == 0)).collect();
        let (ex, report) = augment_training_set(&d, &echo(), &config(2)).unwrap();
        assert_eq!(ex.len(), 30);
        assert_eq!((report.real, report.synthetic, report.shortfall()), (10, 20, 0));
        for e in &ex {
            let src = d.iter().find(|c| c.id == e.conversation_id).unwrap();
            assert_eq!(e.label, src.outcome.is_derailed());
        }
        let (ex0, _) = augment_training_set(&d, &echo(), &config(0)).unwrap();
        assert!(ex0.iter().all(|e| e.provenance == Provenance::RealFuture));
        assert_eq!(ex0.len(), 10);
    }

    #[test]
    fn synthetic_examples_continue_the_prefix() {
        let (ex, _) = augment_training_set(&[conv("x", true)], &echo(), &config(1)).unwrap();
        assert_eq!(ex[0].text, "a: hello there\n<TURN>\nb: hi\n<TURN>\na: you idiot");
        assert!(ex[1].text.starts_with("a: hello there\n<TURN>\nb: hi\n<TURN>\nb: reply "));
        assert!(!ex[1].text.contains("idiot"));
        assert!(ex[1].label);
    }

    #[test]
    fn failed_generation_drops_slots() {
        let g = FnGenerator::new(|_: &str, _: &GenerationParams, _| Err(BackendError::Transport("down".into())));
        let (ex, report) = augment_training_set(&[conv("x", true)], &g, &config(2)).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(report.shortfall(), 2);
        assert_eq!(report.dropped.len(), 2);
    }

    #[test]
    fn single_class_is_rejected() {
        let (ex, _) = augment_training_set(&[conv("x", true)], &echo(), &config(0)).unwrap();
        let err = train_derailment_classifier(BowClassifier::new(BowConfig::default()), &ex).unwrap_err();
        assert!(matches!(err, ClassifierError::SingleClass { positives: 1, examples: 1 }));
    }

    #[test]
    fn scoring() {
        let s = SerializationScheme::default();
        let stub = KeywordStubClassifier::new("idiot");
        let h = [Turn::new("a", "hello")];
        assert_eq!(score(&stub, &h, &[Turn::new("b", "idiot")], &s).unwrap().probability, 1.0);
        assert_eq!(score(&stub, &h, &[], &s).unwrap().probability, 0.0);
        assert!(matches!(score(&stub, &[], &[], &s), Err(ClassifierError::Empty)));
        let untrained = BowClassifier::new(BowConfig::default());
        assert!(matches!(
            score(&untrained, &h, &[], &s),
            Err(ClassifierError::Backend(BackendError::NotTrained))
        ));
    }

    #[test]
    fn truncation_drops_oldest_whole_turns() {
        let s = SerializationScheme::default();
        let stub = KeywordStubClassifier::new("idiot").with_capacity(6);
        let h = [Turn::new("a", "idiot one two three"), Turn::new("b", "four five")];
        let r = score(&stub, &h, &[Turn::new("a", "six")], &s).unwrap();
        assert_eq!(r.dropped_turns, 1);
        assert_eq!(r.probability, 0.0);
    }
}
