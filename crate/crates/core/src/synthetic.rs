//! Planted-signal corpora.
//!
//! Each conversation has `prefix_len` benign turns and one future turn. The
//! last prefix turn lists the same marker words in ascending order when the
//! conversation derails and in descending order when it does not, so a
//! bag-of-words view of the prefix carries no signal, while a model of word
//! order does. Earlier prefix turns are random filler.
//!
//! The future turn is spoken by a class-specific speaker and reads
//! `"honestly you are such a <noun>"`, where the noun is the trigger word for
//! derailing conversations. Under a bigram model the noun is independent of
//! the speaker, so generated futures reproduce the speaker reliably and the
//! noun only by chance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Conversation, Outcome, Source, Turn};

pub const MARKERS: [&str; 9] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota"];
pub const TRIGGER: &str = "idiot";
pub const DERAIL_SPEAKER: &str = "mallory";
pub const BENIGN_SPEAKER: &str = "eve";

const PREFIX_SPEAKERS: [&str; 4] = ["alice", "bob", "carol", "dave"];
const FILLER: [&str; 24] = [
    "article", "source", "edit", "page", "section", "citation", "revert", "draft", "policy", "talk", "review",
    "merge", "template", "image", "link", "category", "archive", "summary", "update", "wording", "lead", "infobox",
    "reference", "format",
];
const FRAME: &str = "honestly you are such a";
const BENIGN_NOUN: &str = "gem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub conversations: usize,
    /// Benign turns; the marker turn is the last of them.
    pub prefix_len: usize,
    pub filler_words: (usize, usize),
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { conversations: 200, prefix_len: 3, filler_words: (4, 8), seed: 0, id_prefix: "syn".into() }
    }
}

fn marker_turn(derailed: bool) -> String {
    let mut words = MARKERS.to_vec();
    if !derailed {
        words.reverse();
    }
    words.join(" ")
}

pub fn future_turn(derailed: bool) -> Turn {
    let (speaker, noun) = if derailed { (DERAIL_SPEAKER, TRIGGER) } else { (BENIGN_SPEAKER, BENIGN_NOUN) };
    Turn::new(speaker, format!("{FRAME} {noun}")).with_derailment(derailed)
}

/// Class-balanced planted corpus: conversation `i` derails iff `i` is even.
pub fn planted_corpus(config: &PlantedConfig) -> Vec<Conversation> {
    assert!(config.prefix_len >= 1, "prefix_len must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = config.filler_words;
    (0..config.conversations)
        .map(|i| {
            let derailed = i % 2 == 0;
            let mut turns: Vec<Turn> = (0..config.prefix_len - 1)
                .map(|_| {
                    let n = rng.gen_range(lo..=hi.max(lo));
                    let text: Vec<&str> = (0..n).map(|_| *FILLER.choose(&mut rng).expect("filler")).collect();
                    Turn::new(*PREFIX_SPEAKERS.choose(&mut rng).expect("speakers"), text.join(" ")).with_derailment(false)
                })
                .collect();
            turns.push(
                Turn::new(*PREFIX_SPEAKERS.choose(&mut rng).expect("speakers"), marker_turn(derailed)).with_derailment(false),
            );
            turns.push(future_turn(derailed));
            Conversation {
                id: format!("{}-{i:05}", config.id_prefix),
                source: Source::Synthetic,
                prefix_len: config.prefix_len,
                outcome: Outcome::from_derailed(derailed),
                turns,
            }
        })
        .collect()
}

/// Train and test corpora drawn with distinct seeds and id prefixes.
pub fn planted_splits(train: usize, test: usize, prefix_len: usize, seed: u64) -> (Vec<Conversation>, Vec<Conversation>) {
    let base = PlantedConfig { prefix_len, ..PlantedConfig::default() };
    let tr = planted_corpus(&PlantedConfig { conversations: train, seed, id_prefix: "train".into(), ..base.clone() });
    let te = planted_corpus(&PlantedConfig {
        conversations: test,
        seed: seed.wrapping_add(1),
        id_prefix: "test".into(),
        ..base
    });
    (tr, te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::feature_tokens;

    #[test]
    fn valid_and_balanced() {
        let d = planted_corpus(&PlantedConfig { conversations: 10, ..Default::default() });
        assert_eq!(d.iter().filter(|c| c.outcome.is_derailed()).count(), 5);
        for c in &d {
            c.ensure_valid().unwrap();
            assert_eq!(c.turns.len(), 4);
        }
    }

    #[test]
    fn prefix_bag_of_words_is_class_free_on_the_marker_turn() {
        let d = planted_corpus(&PlantedConfig { conversations: 2, ..Default::default() });
        let bag = |c: &Conversation| {
            let mut v: Vec<String> = feature_tokens(&c.turns[c.prefix_len - 1].text).collect();
            v.sort();
            v
        };
        assert_eq!(bag(&d[0]), bag(&d[1]));
        assert!(d.iter().all(|c| c.turns[..c.prefix_len].iter().all(|t| !t.text.contains(TRIGGER))));
    }
}
