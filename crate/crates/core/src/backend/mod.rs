//! Generation, classification and annotation backends.
//!
//! The pipeline only talks to the traits defined here. The concrete types are
//! desk-scale stand-ins (a smoothed bigram generator, a bag-of-words logistic
//! classifier, keyword stubs) plus [`external::ExternalBackend`], which proxies
//! calls to an out-of-process model server.

mod bigram;
mod bow;
pub mod external;
pub mod presets;
pub mod sampling;
mod stub;

pub use bigram::BigramGenerator;
pub use bow::{bce_loss, feature_tokens, BowClassifier, BowConfig, TrainingReport};
pub use stub::{FixedLabelAnnotator, FnGenerator, KeywordStubClassifier, ScriptedAnnotator};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_END_MARKER: &str = "<END_OF_CONVERSATION>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("training failed: {0}")]
    Training(String),
    #[error("backend has not been trained")]
    NotTrained,
    #[error("prompt of {tokens} tokens exceeds context capacity of {capacity}")]
    ContextOverflow { tokens: usize, capacity: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

impl BackendError {
    /// Transport failures may succeed on a later attempt.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Sampling knobs shared by every generator backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct GenerationParams {
    temperature: f64,
    top_p: f64,
    repetition_penalty: f64,
    max_new_tokens: usize,
    stop_marker: String,
}

#[derive(Deserialize)]
struct RawParams {
    temperature: f64,
    top_p: f64,
    repetition_penalty: f64,
    max_new_tokens: usize,
    stop_marker: String,
}

impl TryFrom<RawParams> for GenerationParams {
    type Error = BackendError;

    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        GenerationParams::new(r.temperature, r.top_p, r.repetition_penalty, r.max_new_tokens, r.stop_marker)
    }
}

impl GenerationParams {
    pub fn new(
        temperature: f64,
        top_p: f64,
        repetition_penalty: f64,
        max_new_tokens: usize,
        stop_marker: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let stop_marker = stop_marker.into();
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(BackendError::InvalidParams(format!("temperature must be > 0, got {temperature}")));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(BackendError::InvalidParams(format!("top_p must be in (0, 1], got {top_p}")));
        }
        if !(repetition_penalty.is_finite() && repetition_penalty >= 1.0) {
            return Err(BackendError::InvalidParams(format!(
                "repetition_penalty must be >= 1, got {repetition_penalty}"
            )));
        }
        if max_new_tokens == 0 {
            return Err(BackendError::InvalidParams("max_new_tokens must be positive".into()));
        }
        if stop_marker.trim().is_empty() {
            return Err(BackendError::InvalidParams("stop_marker must be non-empty".into()));
        }
        Ok(Self { temperature, top_p, repetition_penalty, max_new_tokens, stop_marker })
    }

    /// Raw model distribution: unit temperature, no nucleus cut, no penalty.
    pub fn unmodified(max_new_tokens: usize) -> Self {
        Self::new(1.0, 1.0, 1.0, max_new_tokens, DEFAULT_END_MARKER).expect("valid constants")
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn top_p(&self) -> f64 {
        self.top_p
    }

    pub fn repetition_penalty(&self) -> f64 {
        self.repetition_penalty
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    pub fn stop_marker(&self) -> &str {
        &self.stop_marker
    }

    pub fn with_max_new_tokens(mut self, n: usize) -> Result<Self, BackendError> {
        if n == 0 {
            return Err(BackendError::InvalidParams("max_new_tokens must be positive".into()));
        }
        self.max_new_tokens = n;
        Ok(self)
    }

    pub fn with_stop_marker(self, marker: impl Into<String>) -> Result<Self, BackendError> {
        Self::new(self.temperature, self.top_p, self.repetition_penalty, self.max_new_tokens, marker)
    }
}

impl Default for GenerationParams {
    /// Temperature 1.0, top-p 0.9, repetition penalty 1.05.
    fn default() -> Self {
        Self::new(1.0, 0.9, 1.05, 256, DEFAULT_END_MARKER).expect("valid constants")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub trainable: bool,
    pub deterministic_given_seed: bool,
}

pub trait GeneratorBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Continues `prompt`. Output ends with the stop marker or stops after
    /// `max_new_tokens` tokens.
    fn generate(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String, BackendError>;
}

pub trait ClassifierBackend: Send + Sync {
    /// Probability that `text` describes a derailing conversation.
    fn predict_proba(&self, text: &str) -> Result<f64, BackendError>;

    /// Input capacity in whitespace tokens, if bounded.
    fn max_input_tokens(&self) -> Option<usize> {
        None
    }
}

/// A classifier that can be fit on `(text, derailed)` pairs with binary
/// cross-entropy.
pub trait TrainableClassifier: ClassifierBackend {
    fn fit(&mut self, examples: &[(String, bool)]) -> Result<TrainingReport, BackendError>;
}

pub trait AnnotationBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;

    /// Called before every request; rate-limited backends block here.
    fn throttle(&self) {}
}

impl<T: GeneratorBackend + ?Sized> GeneratorBackend for &T {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn generate(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String, BackendError> {
        (**self).generate(prompt, params, seed)
    }
}

impl<T: ClassifierBackend + ?Sized> ClassifierBackend for &T {
    fn predict_proba(&self, text: &str) -> Result<f64, BackendError> {
        (**self).predict_proba(text)
    }

    fn max_input_tokens(&self) -> Option<usize> {
        (**self).max_input_tokens()
    }
}

/// Whitespace tokenization used by all toy backends.
pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}
