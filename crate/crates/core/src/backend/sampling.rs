//! Next-token sampling: temperature, then nucleus filtering, then repetition
//! penalty on the surviving candidates.

use rand::Rng;

use super::GenerationParams;

/// Turns a probability vector into the sparse distribution actually sampled
/// from. `emitted[i]` marks tokens already produced in this generation.
///
/// Returned pairs are `(token index, probability)` sorted by descending
/// temperature-scaled probability (ties by index); probabilities sum to 1.
pub fn shape_distribution(probs: &[f64], emitted: &[bool], params: &GenerationParams) -> Vec<(usize, f64)> {
    assert_eq!(probs.len(), emitted.len(), "probability/emitted length mismatch");
    if probs.is_empty() {
        return Vec::new();
    }

    // Temperature on log-probabilities, stabilised by the max logit.
    let t = params.temperature();
    let logits: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / t } else { f64::NEG_INFINITY })
        .collect();
    let scaled = softmax(&logits);

    let mut order: Vec<usize> = (0..scaled.len()).filter(|&i| scaled[i] > 0.0).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));

    // Smallest head of the sorted list whose mass reaches top_p.
    let top_p = params.top_p();
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += scaled[i];
        if top_p < 1.0 && mass >= top_p - 1e-12 {
            break;
        }
    }

    let penalty = params.repetition_penalty();
    let scores: Vec<f64> = kept
        .iter()
        .map(|&i| {
            let s = scaled[i].ln();
            if emitted[i] && penalty != 1.0 {
                if s > 0.0 {
                    s / penalty
                } else {
                    s * penalty
                }
            } else {
                s
            }
        })
        .collect();
    let renorm = softmax(&scores);
    kept.into_iter().zip(renorm).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Inverse-CDF draw from a sparse distribution.
pub fn draw<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in dist {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.last().map(|&(i, _)| i).expect("non-empty distribution")
}
