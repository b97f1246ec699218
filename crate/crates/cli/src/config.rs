//! Run configuration: one TOML document, overridable by flags.

use std::path::Path;

use anyhow::{Context, Result};
use derail_core::backend::{BowConfig, GenerationParams};
use derail_core::eval::bleu::BleuConfig;
use derail_core::eval::significance::Sided;
use derail_core::forecast::{Aggregation, ForecastConfig};
use derail_core::generator::{SerializationScheme, DEFAULT_MAX_TURNS_CAP};
use derail_core::model::TieRule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let p = GenerationParams::default();
        Self {
            temperature: p.temperature(),
            top_p: p.top_p(),
            repetition_penalty: p.repetition_penalty(),
            max_new_tokens: p.max_new_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub samples: usize,
    pub threshold: f64,
    pub tie_rule: TieRule,
    pub aggregation: Aggregation,
    pub max_turns_cap: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            samples: 5,
            threshold: 0.5,
            tie_rule: TieRule::PredictDerailment,
            aggregation: Aggregation::Vote,
            max_turns_cap: DEFAULT_MAX_TURNS_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub l: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { l: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    /// Fixed prefix length for training pairs; `None` uses each
    /// conversation's benign prefix.
    pub fixed_k: Option<usize>,
    /// Context capacity in tokens; `None` is unbounded.
    pub context_capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { seed: 7, ratios: [0.8, 0.1, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub max_retries: usize,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        Self { max_retries: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sided: Sided,
    pub bleu: BleuConfig,
    pub l_values: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sided: Sided::OneSided, bleu: BleuConfig::default(), l_values: vec![1, 3, 5, 7, 11, 15], k_values: vec![2, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sampling: SamplingSection,
    pub scheme: SerializationScheme,
    pub forecast: ForecastSection,
    pub classifier: BowConfig,
    pub augment: AugmentSection,
    pub generator: GeneratorSection,
    pub split: SplitSection,
    pub annotation: AnnotationSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn params(&self) -> Result<GenerationParams> {
        let s = &self.sampling;
        Ok(GenerationParams::new(
            s.temperature,
            s.top_p,
            s.repetition_penalty,
            s.max_new_tokens,
            self.scheme.end_of_conversation_marker.trim(),
        )?)
    }

    pub fn forecast_config(&self) -> Result<ForecastConfig> {
        let f = &self.forecast;
        if f.samples == 0 {
            anyhow::bail!("forecast.samples must be >= 1");
        }
        if !(0.0..=1.0).contains(&f.threshold) {
            anyhow::bail!("forecast.threshold must lie in [0, 1], got {}", f.threshold);
        }
        Ok(ForecastConfig {
            samples: f.samples,
            params: self.params()?,
            scheme: self.scheme.clone(),
            threshold: f.threshold,
            tie_rule: f.tie_rule,
            seed: self.seed,
            max_turns_cap: f.max_turns_cap,
            aggregation: f.aggregation,
        })
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[forecast]\nsamples = 7\n").unwrap();
        assert_eq!((c.seed, c.forecast.samples, c.augment.l), (3, 7, 2));
        assert_eq!(c.sampling, SamplingSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[forecast]\nsampels = 7\n").is_err());
    }

    #[test]
    fn bundled_presets_parse() {
        for name in ["desk.toml", "full_scale.toml"] {
            let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
            RunConfig::load(&p).unwrap().forecast_config().unwrap();
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }
}
