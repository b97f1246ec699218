use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BackendError, ClassifierBackend, TrainableClassifier};

const PROB_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy,
/// `-(1/m) Σ [y log p + (1 - y) log(1 - p)]`, with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BowConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Input capacity in whitespace tokens; `None` is unbounded.
    pub max_input_tokens: Option<usize>,
}

impl Default for BowConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.5, l2: 1e-4, max_input_tokens: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub examples: usize,
    pub positives: usize,
    /// Mean BCE on the training set before each epoch's update.
    pub loss_curve: Vec<f64>,
    /// Mean BCE of the final model on the training set.
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Logistic regression over binary bag-of-words features, fit by full-batch
/// gradient descent on mean BCE. Training is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowClassifier {
    config: BowConfig,
    vocab: BTreeMap<String, usize>,
    weights: Vec<f64>,
    bias: f64,
    trained: bool,
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn feature_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

impl BowClassifier {
    pub fn new(config: BowConfig) -> Self {
        Self { config, vocab: BTreeMap::new(), weights: Vec::new(), bias: 0.0, trained: false }
    }

    pub fn config(&self) -> &BowConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Weight learned for `token`, if it was seen during training.
    pub fn weight(&self, token: &str) -> Option<f64> {
        self.vocab.get(token).map(|&i| self.weights[i])
    }

    fn features(&self, text: &str) -> Vec<usize> {
        let mut f: Vec<usize> = feature_tokens(text).filter_map(|t| self.vocab.get(&t).copied()).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    fn logit(&self, features: &[usize]) -> f64 {
        self.bias + features.iter().map(|&i| self.weights[i]).sum::<f64>()
    }

    /// Fresh classifier trained on `examples`.
    pub fn train(examples: &[(String, bool)], config: BowConfig) -> Result<(Self, TrainingReport), BackendError> {
        let mut clf = Self::new(config);
        let report = clf.fit(examples)?;
        Ok((clf, report))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ClassifierBackend for BowClassifier {
    fn predict_proba(&self, text: &str) -> Result<f64, BackendError> {
        if !self.trained {
            return Err(BackendError::NotTrained);
        }
        Ok(sigmoid(self.logit(&self.features(text))))
    }

    fn max_input_tokens(&self) -> Option<usize> {
        self.config.max_input_tokens
    }
}

impl TrainableClassifier for BowClassifier {
    fn fit(&mut self, examples: &[(String, bool)]) -> Result<TrainingReport, BackendError> {
        let positives = examples.iter().filter(|e| e.1).count();
        if positives == 0 || positives == examples.len() {
            return Err(BackendError::Training(format!(
                "both classes are required ({positives} positive of {})",
                examples.len()
            )));
        }

        let mut words: Vec<String> = examples.iter().flat_map(|(t, _)| feature_tokens(t)).collect();
        words.sort();
        words.dedup();
        self.vocab = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        self.weights = vec![0.0; self.vocab.len()];
        self.bias = 0.0;

        let feats: Vec<Vec<usize>> = examples.iter().map(|(t, _)| self.features(t)).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.1).collect();
        let m = examples.len() as f64;
        let lr = self.config.learning_rate;
        let l2 = self.config.l2;

        let mut loss_curve = Vec::with_capacity(self.config.epochs);
        let mut grad = vec![0.0; self.weights.len()];
        for _ in 0..self.config.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_bias = 0.0;
            let mut probs = Vec::with_capacity(feats.len());
            for (f, &y) in feats.iter().zip(&labels) {
                let p = sigmoid(self.logit(f));
                probs.push(p);
                let err = p - if y { 1.0 } else { 0.0 };
                grad_bias += err;
                for &i in f {
                    grad[i] += err;
                }
            }
            loss_curve.push(bce_loss(&probs, &labels));
            self.bias -= lr * grad_bias / m;
            for (w, g) in self.weights.iter_mut().zip(&grad) {
                *w -= lr * (g / m + l2 * *w);
            }
        }
        self.trained = true;

        let probs: Vec<f64> = feats.iter().map(|f| sigmoid(self.logit(f))).collect();
        let correct = probs.iter().zip(&labels).filter(|(&p, &y)| (p >= 0.5) == y).count();
        Ok(TrainingReport {
            examples: examples.len(),
            positives,
            loss_curve,
            final_loss: bce_loss(&probs, &labels),
            train_accuracy: correct as f64 / m,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize) -> Vec<(String, bool)> {
        (0..n)
            .map(|i| {
                let filler = format!("w{} w{} common", i % 7, (i * 3) % 11);
                if i % 2 == 0 {
                    (format!("{filler} idiot"), true)
                } else {
                    (format!("{filler} thanks"), false)
                }
            })
            .collect()
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_loss(&[0.5], &[true]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1.0], &[true]) < 1e-11);
        assert!((bce_loss(&[0.0], &[true]) - (1e12f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn separable_keyword_data_is_learned() {
        let data = separable(200);
        let (clf, report) = BowClassifier::train(&data, BowConfig::default()).unwrap();
        assert!(report.train_accuracy >= 0.99, "{report:?}");
        let probs: Vec<f64> = data.iter().map(|(t, _)| clf.predict_proba(t).unwrap()).collect();
        let labels: Vec<bool> = data.iter().map(|e| e.1).collect();
        assert!((report.final_loss - bce_loss(&probs, &labels)).abs() < 1e-12);
        assert!(report.loss_curve.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(clf.weight("idiot").unwrap() > 0.0);
        assert!(clf.weight("thanks").unwrap() < 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let data = vec![("a".to_string(), true), ("b".to_string(), true)];
        assert!(matches!(BowClassifier::train(&data, BowConfig::default()), Err(BackendError::Training(_))));
    }

    #[test]
    fn untrained_predict_fails() {
        let clf = BowClassifier::new(BowConfig::default());
        assert_eq!(clf.predict_proba("x"), Err(BackendError::NotTrained));
    }

    #[test]
    fn features_ignore_case_and_punctuation() {
        let toks: Vec<String> = feature_tokens("Idiot! you: <TURN> ...").collect();
        assert_eq!(toks, vec!["idiot", "you", "turn"]);
    }
}
