use std::sync::Mutex;

use super::bow::feature_tokens;
use super::{AnnotationBackend, BackendError, Capabilities, ClassifierBackend, GenerationParams, GeneratorBackend};

/// Returns 1.0 when the text contains `trigger` as a token, else 0.0.
#[derive(Debug, Clone)]
pub struct KeywordStubClassifier {
    trigger: String,
    max_input_tokens: Option<usize>,
}

impl KeywordStubClassifier {
    pub fn new(trigger: impl Into<String>) -> Self {
        Self { trigger: trigger.into().to_lowercase(), max_input_tokens: None }
    }

    pub fn with_capacity(mut self, tokens: usize) -> Self {
        self.max_input_tokens = Some(tokens);
        self
    }
}

impl ClassifierBackend for KeywordStubClassifier {
    fn predict_proba(&self, text: &str) -> Result<f64, BackendError> {
        Ok(if feature_tokens(text).any(|t| t == self.trigger) { 1.0 } else { 0.0 })
    }

    fn max_input_tokens(&self) -> Option<usize> {
        self.max_input_tokens
    }
}

/// Generator backed by a closure over `(prompt, params, seed)`.
pub struct FnGenerator<F> {
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(&str, &GenerationParams, u64) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> GeneratorBackend for FnGenerator<F>
where
    F: Fn(&str, &GenerationParams, u64) -> Result<String, BackendError> + Send + Sync,
{
    fn capabilities(&self) -> Capabilities {
        Capabilities { trainable: false, deterministic_given_seed: true }
    }

    fn generate(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String, BackendError> {
        (self.f)(prompt, params, seed)
    }
}

/// Annotator that tags every target turn with the same label.
///
/// The target conversation is taken to be the last block of `Turn i:` lines
/// starting at `Turn 1:` in the prompt.
#[derive(Debug, Clone)]
pub struct FixedLabelAnnotator {
    label: String,
}

impl FixedLabelAnnotator {
    pub fn new(label: crate::model::OrientationLabel) -> Self {
        Self { label: label.display_names().join(", ") }
    }

    pub fn neutral() -> Self {
        Self::new(crate::model::OrientationLabel::neutral())
    }
}

pub(crate) fn trailing_turn_count(prompt: &str) -> usize {
    let mut count = 0;
    for line in prompt.lines() {
        let Some(rest) = line.trim_start().strip_prefix("Turn ") else { continue };
        let Some((num, _)) = rest.split_once(':') else { continue };
        match num.trim().parse::<usize>() {
            Ok(1) => count = 1,
            Ok(i) if i == count + 1 => count = i,
            _ => {}
        }
    }
    count
}

impl AnnotationBackend for FixedLabelAnnotator {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let n = trailing_turn_count(prompt);
        Ok((1..=n).map(|i| format!("Turn {i}: {}", self.label)).collect::<Vec<_>>().join("\n"))
    }
}

/// Replays canned responses in order; the last one repeats once exhausted.
#[derive(Debug)]
pub struct ScriptedAnnotator {
    responses: Vec<Result<String, BackendError>>,
    next: Mutex<usize>,
}

impl ScriptedAnnotator {
    pub fn new(responses: Vec<Result<String, BackendError>>) -> Self {
        assert!(!responses.is_empty(), "at least one scripted response");
        Self { responses, next: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.next.lock().expect("poisoned")
    }
}

impl AnnotationBackend for ScriptedAnnotator {
    fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
        let mut next = self.next.lock().expect("poisoned");
        let i = (*next).min(self.responses.len() - 1);
        *next += 1;
        self.responses[i].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_stub() {
        let s = KeywordStubClassifier::new("idiot");
        assert_eq!(s.predict_proba("you are an Idiot!").unwrap(), 1.0);
        assert_eq!(s.predict_proba("you are kind").unwrap(), 0.0);
    }

    #[test]
    fn counts_trailing_turn_block() {
        let prompt = "Conversation 1:\nTurn 1: a: x\nTurn 2: b: y\n\nAnnotations:\nTurn 1: N\nTurn 2: N\n\nConversation 5:\nTurn 1: a: q\nTurn 2: b: r\nTurn 3: a: s\n\nSocial Orientation Tags:\n";
        assert_eq!(trailing_turn_count(prompt), 3);
        let out = FixedLabelAnnotator::neutral().complete(prompt).unwrap();
        assert_eq!(out.lines().count(), 3);
        assert_eq!(out.lines().next().unwrap(), "Turn 1: Neutral, Neutral, Neutral, Neutral");
    }
}
