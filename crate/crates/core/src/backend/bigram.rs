use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{draw, shape_distribution};
use super::{whitespace_tokens, BackendError, Capabilities, GenerationParams, GeneratorBackend};

/// Word-level bigram language model with add-one smoothing.
///
/// `P(b | a) = (count(a, b) + 1) / (count(a, ·) + V)` where `V` is the number
/// of observed token types plus the stop marker. Unknown or empty contexts
/// fall back to the uniform distribution, which is what the formula gives for
/// a zero-count row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "BigramState", into = "BigramState")]
pub struct BigramGenerator {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<BTreeMap<usize, u64>>,
    totals: Vec<u64>,
    stop_marker: String,
    context_capacity: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct BigramState {
    stop_marker: String,
    context_capacity: Option<usize>,
    vocab: Vec<String>,
    /// Sparse rows: `(successor index, count)`.
    transitions: Vec<Vec<(usize, u64)>>,
}

impl From<BigramState> for BigramGenerator {
    fn from(s: BigramState) -> Self {
        let index = s.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let rows: Vec<BTreeMap<usize, u64>> = s.transitions.into_iter().map(|r| r.into_iter().collect()).collect();
        let totals = rows.iter().map(|r| r.values().sum()).collect();
        Self {
            vocab: s.vocab,
            index,
            rows,
            totals,
            stop_marker: s.stop_marker,
            context_capacity: s.context_capacity,
        }
    }
}

impl From<BigramGenerator> for BigramState {
    fn from(g: BigramGenerator) -> Self {
        Self {
            stop_marker: g.stop_marker,
            context_capacity: g.context_capacity,
            vocab: g.vocab,
            transitions: g.rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        }
    }
}

impl BigramGenerator {
    /// Maximum-likelihood counts over `corpus`. Sequences are used as given;
    /// callers append the stop marker where a sequence is complete.
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], stop_marker: &str) -> Result<Self, BackendError> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(BackendError::Training("empty corpus".into()));
        }
        let mut types: Vec<String> = corpus
            .iter()
            .flatten()
            .map(|t| t.as_ref().to_string())
            .chain(std::iter::once(stop_marker.to_string()))
            .collect();
        types.sort();
        types.dedup();
        let index: HashMap<String, usize> = types.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

        let mut rows = vec![BTreeMap::new(); types.len()];
        for seq in corpus {
            for pair in seq.windows(2) {
                let a = index[pair[0].as_ref()];
                let b = index[pair[1].as_ref()];
                *rows[a].entry(b).or_insert(0u64) += 1;
            }
        }
        let totals = rows.iter().map(|r: &BTreeMap<usize, u64>| r.values().sum()).collect();
        Ok(Self {
            vocab: types,
            index,
            rows,
            totals,
            stop_marker: stop_marker.to_string(),
            context_capacity: None,
        })
    }

    /// Trains on raw texts split on whitespace.
    pub fn train_on_texts<S: AsRef<str>>(texts: &[S], stop_marker: &str) -> Result<Self, BackendError> {
        let corpus: Vec<Vec<&str>> = texts.iter().map(|t| whitespace_tokens(t.as_ref()).collect()).collect();
        Self::train(&corpus, stop_marker)
    }

    /// Prompts longer than `capacity` tokens are rejected with
    /// [`BackendError::ContextOverflow`].
    pub fn with_context_capacity(mut self, capacity: Option<usize>) -> Self {
        self.context_capacity = capacity;
        self
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn stop_marker(&self) -> &str {
        &self.stop_marker
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Smoothed `P(next | prev)`.
    pub fn prob(&self, prev: &str, next: &str) -> f64 {
        let Some(b) = self.token_index(next) else { return 0.0 };
        self.distribution(self.token_index(prev))[b]
    }

    /// Dense smoothed next-token distribution after `prev` (`None` = unknown).
    pub fn distribution(&self, prev: Option<usize>) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        match prev {
            None => vec![1.0 / v; self.vocab.len()],
            Some(a) => {
                let denom = self.totals[a] as f64 + v;
                let mut out = vec![1.0 / denom; self.vocab.len()];
                for (&b, &c) in &self.rows[a] {
                    out[b] = (c as f64 + 1.0) / denom;
                }
                out
            }
        }
    }

    /// Most probable successor, ties broken by vocabulary order.
    pub fn greedy_next(&self, prev: &str) -> &str {
        let dist = self.distribution(self.token_index(prev));
        let best = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("vocabulary is never empty");
        &self.vocab[best]
    }
}

impl GeneratorBackend for BigramGenerator {
    fn capabilities(&self) -> Capabilities {
        Capabilities { trainable: true, deterministic_given_seed: true }
    }

    fn generate(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String, BackendError> {
        let prompt_tokens: Vec<&str> = whitespace_tokens(prompt).collect();
        if let Some(capacity) = self.context_capacity {
            if prompt_tokens.len() > capacity {
                return Err(BackendError::ContextOverflow { tokens: prompt_tokens.len(), capacity });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emitted = vec![false; self.vocab.len()];
        let mut prev = prompt_tokens.last().and_then(|t| self.token_index(t));
        let mut out: Vec<&str> = Vec::new();
        while out.len() < params.max_new_tokens() {
            let dist = shape_distribution(&self.distribution(prev), &emitted, params);
            let next = draw(&dist, &mut rng);
            emitted[next] = true;
            let token = self.vocab[next].as_str();
            out.push(token);
            if token == params.stop_marker() {
                break;
            }
            prev = Some(next);
        }
        Ok(out.join(" "))
    }
}
