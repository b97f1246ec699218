//! Full-scale hyperparameters for users plugging in real LLM backends.
//!
//! Nothing in this crate reads these values at run time except
//! [`full_scale_sampling`], which only builds a [`GenerationParams`].

use serde::{Deserialize, Serialize};

use super::{GenerationParams, DEFAULT_END_MARKER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTunePreset {
    pub name: String,
    pub base_model: String,
    pub parameters: String,
    pub use_lora: bool,
    pub lora_rank: Option<u32>,
    pub lora_alpha: Option<u32>,
    pub lora_modules: Option<String>,
    pub lora_bias: Option<bool>,
    pub loss: Option<String>,
    pub epochs: u32,
    pub max_context_tokens: u32,
    pub batch_size: u32,
    pub optimizer: String,
    pub lr_schedule: String,
    pub max_lr: f64,
    pub min_lr: f64,
    pub gradient_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPreset {
    pub name: String,
    pub base_model: String,
    pub initial_context_tokens: u32,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub generation_batch_size: u32,
}

const SCHEDULE: &str = "one-cycle cosine with linear warmup";

pub fn generator_finetune() -> FineTunePreset {
    FineTunePreset {
        name: "mistral-7b-generator".into(),
        base_model: "mistralai/Mistral-7B-v0.1".into(),
        parameters: "7.24B".into(),
        use_lora: true,
        lora_rank: Some(64),
        lora_alpha: Some(64),
        lora_modules: Some("all except embedding".into()),
        lora_bias: Some(true),
        loss: None,
        epochs: 3,
        max_context_tokens: 3072,
        batch_size: 32,
        optimizer: "AdamW".into(),
        lr_schedule: SCHEDULE.into(),
        max_lr: 1e-4,
        min_lr: 2e-5,
        gradient_clip: 5.0,
    }
}

pub fn bart_classifier() -> FineTunePreset {
    FineTunePreset {
        name: "bart-base-classifier".into(),
        base_model: "facebook/bart-base".into(),
        parameters: "139M".into(),
        use_lora: false,
        lora_rank: None,
        lora_alpha: None,
        lora_modules: None,
        lora_bias: None,
        loss: Some("binary cross-entropy".into()),
        epochs: 15,
        max_context_tokens: 1024,
        batch_size: 32,
        optimizer: "AdamW".into(),
        lr_schedule: SCHEDULE.into(),
        max_lr: 2e-5,
        min_lr: 2e-6,
        gradient_clip: 5.0,
    }
}

pub fn mistral_classifier() -> FineTunePreset {
    FineTunePreset {
        name: "mistral-7b-classifier".into(),
        loss: Some("binary cross-entropy".into()),
        epochs: 15,
        max_context_tokens: 2048,
        ..generator_finetune()
    }
}

pub fn generator_sampling() -> SamplingPreset {
    SamplingPreset {
        name: "mistral-7b-sampling".into(),
        base_model: "mistralai/Mistral-7B-v0.1".into(),
        initial_context_tokens: 2048,
        max_new_tokens: 1024,
        temperature: 1.0,
        top_p: 0.9,
        top_k: None,
        repetition_penalty: 1.05,
        generation_batch_size: 8,
    }
}

/// Sampling knobs of [`generator_sampling`] as [`GenerationParams`].
pub fn full_scale_sampling() -> GenerationParams {
    let p = generator_sampling();
    GenerationParams::new(p.temperature, p.top_p, p.repetition_penalty, p.max_new_tokens as usize, DEFAULT_END_MARKER)
        .expect("preset values are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        let s = full_scale_sampling();
        assert_eq!((s.temperature(), s.top_p(), s.repetition_penalty(), s.max_new_tokens()), (1.0, 0.9, 1.05, 1024));
        assert_eq!(mistral_classifier().lora_rank, Some(64));
        assert_eq!(bart_classifier().max_lr, 2e-5);
        assert_eq!(generator_finetune().epochs, 3);
    }
}
