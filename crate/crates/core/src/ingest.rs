//! Corpus adapters, canonical JSONL, and deterministic splits.
//!
//! # Source formats
//!
//! Both adapters read JSON Lines, one conversation per line.
//!
//! CGA-Wiki (conversation-level export of the ConvoKit corpus):
//!
//! ```json
//! {"conversation_id": "c1", "split": "train", "conversation_has_personal_attack": true,
//!  "utterances": [{"speaker": "Tryptofish", "text": "== Good work! ==", "comment_has_personal_attack": false}, ...]}
//! ```
//!
//! `split` is one of `train`, `val`/`validation`, `test`. Utterance-level
//! attack flags are optional. Section headers (text wrapped in `==`) are
//! dropped, and the final remaining turn is the one being forecast.
//!
//! BNC (one thread of four comments, the last a reply that was either removed
//! by a moderator for name-calling or upvoted by the original poster):
//!
//! ```json
//! {"id": "t3_abc", "label": "ad_hominem" | "constructive",
//!  "comments": [{"author": "u1", "body": "..."}, ... 4 entries]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Conversation, Outcome, Source, Turn};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: record {id} has {turns} turns, expected {expected}")]
    Structure { line: usize, id: String, turns: usize, expected: usize },
    #[error("line {line}: {error}")]
    Invalid { line: usize, error: crate::model::ValidationError },
    #[error("duplicate conversation id {0}")]
    DuplicateId(String),
    #[error("invalid split ratios: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Option<Split>,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Option<Split>, conversations: Vec<Conversation>) -> Self {
        Self { name: name.into(), split, conversations }
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn check_unique_ids(&self) -> Result<(), IngestError> {
        let mut seen = HashSet::new();
        for c in &self.conversations {
            if !seen.insert(c.id.as_str()) {
                return Err(IngestError::DuplicateId(c.id.clone()));
            }
        }
        Ok(())
    }
}

pub type SplitMap = BTreeMap<Split, Dataset>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassBalance {
    pub derailed: usize,
    pub benign: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub kept: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    pub section_headers_removed: usize,
    pub class_balance: ClassBalance,
    /// Turn count -> number of conversations.
    pub turn_count_histogram: BTreeMap<usize, usize>,
}

impl LoadReport {
    fn record(&mut self, c: &Conversation) {
        self.kept += 1;
        match c.outcome {
            Outcome::Derailed => self.class_balance.derailed += 1,
            Outcome::Benign => self.class_balance.benign += 1,
        }
        *self.turn_count_histogram.entry(c.turns.len()).or_insert(0) += 1;
    }

    /// Median turn count (lower median for even counts).
    pub fn median_turns(&self) -> Option<usize> {
        if self.kept == 0 {
            return None;
        }
        let target = (self.kept - 1) / 2;
        let mut seen = 0;
        for (&turns, &count) in &self.turn_count_histogram {
            seen += count;
            if seen > target {
                return Some(turns);
            }
        }
        None
    }
}

/// A turn whose trimmed text is fully enclosed in `==` markers.
pub fn is_section_header(text: &str) -> bool {
    let t = text.trim();
    t.len() >= 4 && t.starts_with("==") && t.ends_with("==") && !t.trim_matches('=').trim().is_empty()
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })
}

/// Non-blank lines with their 1-based line numbers.
fn json_lines(path: &Path) -> Result<Vec<(usize, String)>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T, IngestError> {
    serde_json::from_str(line).map_err(|e| IngestError::Parse { line: line_no, message: e.to_string() })
}

#[derive(Deserialize)]
struct CgaRecord {
    conversation_id: String,
    split: String,
    conversation_has_personal_attack: bool,
    utterances: Vec<CgaUtterance>,
}

#[derive(Deserialize)]
struct CgaUtterance {
    speaker: String,
    text: String,
    #[serde(default)]
    comment_has_personal_attack: Option<bool>,
}

/// Loads CGA-Wiki under its official splits.
pub fn load_cga_wiki(path: &Path) -> Result<(SplitMap, LoadReport), IngestError> {
    let mut report = LoadReport::default();
    let mut splits: SplitMap = BTreeMap::new();
    for (line_no, line) in json_lines(path)? {
        let rec: CgaRecord = parse_line(line_no, &line)?;
        let split: Split = rec.split.parse().map_err(|m| IngestError::Parse { line: line_no, message: m })?;
        let before = rec.utterances.len();
        let turns: Vec<Turn> = rec
            .utterances
            .into_iter()
            .filter(|u| !is_section_header(&u.text))
            .map(|u| Turn {
                speaker: u.speaker,
                text: u.text,
                orientation: None,
                is_derailment: u.comment_has_personal_attack,
            })
            .collect();
        report.section_headers_removed += before - turns.len();
        if turns.len() < 2 {
            warn!("skipping {}: {} turns left after removing section headers", rec.conversation_id, turns.len());
            report.skipped += 1;
            report.skipped_ids.push(rec.conversation_id);
            continue;
        }
        let c = Conversation {
            id: rec.conversation_id,
            source: Source::CgaWiki,
            prefix_len: turns.len() - 1,
            outcome: Outcome::from_derailed(rec.conversation_has_personal_attack),
            turns,
        };
        c.ensure_valid().map_err(|error| IngestError::Invalid { line: line_no, error })?;
        report.record(&c);
        splits
            .entry(split)
            .or_insert_with(|| Dataset::new("cga_wiki", Some(split), Vec::new()))
            .conversations
            .push(c);
    }
    check_disjoint(&splits)?;
    Ok((splits, report))
}

#[derive(Deserialize)]
struct BncRecord {
    id: String,
    label: String,
    comments: Vec<BncComment>,
}

#[derive(Deserialize)]
struct BncComment {
    author: String,
    body: String,
}

pub const BNC_TURNS: usize = 4;

/// Loads a BNC file as one unsplit dataset.
pub fn load_bnc(path: &Path) -> Result<(Dataset, LoadReport), IngestError> {
    let mut report = LoadReport::default();
    let mut conversations = Vec::new();
    for (line_no, line) in json_lines(path)? {
        let rec: BncRecord = parse_line(line_no, &line)?;
        if rec.comments.len() != BNC_TURNS {
            return Err(IngestError::Structure {
                line: line_no,
                id: rec.id,
                turns: rec.comments.len(),
                expected: BNC_TURNS,
            });
        }
        let derailed = match rec.label.trim().to_ascii_lowercase().as_str() {
            "ad_hominem" | "name_calling" | "derailed" => true,
            "constructive" | "benign" => false,
            other => {
                return Err(IngestError::Parse { line: line_no, message: format!("unknown BNC label {other:?}") })
            }
        };
        let turns = rec
            .comments
            .into_iter()
            .enumerate()
            .map(|(i, cm)| Turn {
                speaker: cm.author,
                text: cm.body,
                orientation: None,
                is_derailment: Some(i == BNC_TURNS - 1 && derailed),
            })
            .collect();
        let c = Conversation {
            id: rec.id,
            source: Source::Bnc,
            prefix_len: BNC_TURNS - 1,
            outcome: Outcome::from_derailed(derailed),
            turns,
        };
        c.ensure_valid().map_err(|error| IngestError::Invalid { line: line_no, error })?;
        report.record(&c);
        conversations.push(c);
    }
    let d = Dataset::new("bnc", None, conversations);
    d.check_unique_ids()?;
    Ok((d, report))
}

fn check_disjoint(splits: &SplitMap) -> Result<(), IngestError> {
    let mut seen = HashSet::new();
    for d in splits.values() {
        for c in &d.conversations {
            if !seen.insert(c.id.as_str()) {
                return Err(IngestError::DuplicateId(c.id.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self, IngestError> {
        if ratios.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(IngestError::Config(format!("every ratio must be > 0, got {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(IngestError::Config(format!("ratios must sum to 1, got {sum}")));
        }
        Ok(Self { ratios, seed })
    }

    /// 8:1:1.
    pub fn eight_one_one(seed: u64) -> Self {
        Self::new([0.8, 0.1, 0.1], seed).expect("valid constants")
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.ratios
    }

    /// Split sizes: floor of each ratio times `n`, remainder to train.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let val = (self.ratios[1] * n as f64 + 1e-9).floor() as usize;
        let test = (self.ratios[2] * n as f64 + 1e-9).floor() as usize;
        [n - val - test, val, test]
    }
}

/// Seeded split that ignores input order: ids are sorted, shuffled with the
/// seed, then cut into train/validation/test.
pub fn split_dataset(d: &Dataset, spec: &SplitSpec) -> Result<SplitMap, IngestError> {
    d.check_unique_ids()?;
    let mut convs: Vec<&Conversation> = d.conversations.iter().collect();
    convs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    convs.shuffle(&mut rng);

    let [n_train, n_val, _] = spec.sizes(convs.len());
    let mut out = BTreeMap::new();
    let cuts = [(Split::Train, 0, n_train), (Split::Validation, n_train, n_train + n_val), (Split::Test, n_train + n_val, convs.len())];
    for (split, lo, hi) in cuts {
        let members = convs[lo..hi].iter().map(|&c| c.clone()).collect();
        out.insert(split, Dataset::new(d.name.clone(), Some(split), members));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IngestError> {
    let io_err = |e: std::io::Error| IngestError::Io { path: path.display().to_string(), source: e };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| IngestError::Parse { line: 0, message: e.to_string() })?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IngestError> {
    json_lines(path)?.into_iter().map(|(n, l)| parse_line(n, &l)).collect()
}

/// Reads canonical conversation JSONL and validates every record.
pub fn load_canonical(path: &Path, name: &str, split: Option<Split>) -> Result<Dataset, IngestError> {
    let mut conversations = Vec::new();
    for (line_no, line) in json_lines(path)? {
        let c: Conversation = parse_line(line_no, &line)?;
        c.ensure_valid().map_err(|error| IngestError::Invalid { line: line_no, error })?;
        conversations.push(c);
    }
    let d = Dataset::new(name, split, conversations);
    d.check_unique_ids()?;
    Ok(d)
}

pub fn save_canonical(path: &Path, d: &Dataset) -> Result<(), IngestError> {
    write_jsonl(path, &d.conversations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(n: usize) -> Dataset {
        let convs = (0..n)
            .map(|i| Conversation {
                id: format!("conv-{i:04}"),
                source: Source::Synthetic,
                prefix_len: 1,
                outcome: Outcome::from_derailed(i % 2 == 0),
                turns: vec![Turn::new("a", "x"), Turn::new("b", "y")],
            })
            .collect();
        Dataset::new("t", None, convs)
    }

    #[test]
    fn section_header_rule() {
        assert!(is_section_header("== Good work! =="));
        assert!(is_section_header("  ==Title==  "));
        assert!(!is_section_header("==="));
        assert!(!is_section_header("a == b"));
        assert!(!is_section_header("== unbalanced"));
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::eight_one_one(7);
        assert_eq!(spec.sizes(100), [80, 10, 10]);
        assert_eq!(spec.sizes(103), [83, 10, 10]);
        assert_eq!(spec.sizes(20), [16, 2, 2]);
        let m = split_dataset(&dataset(103), &spec).unwrap();
        assert_eq!(m[&Split::Train].len(), 83);
        assert_eq!(m[&Split::Validation].len(), 10);
        assert_eq!(m[&Split::Test].len(), 10);
    }

    #[test]
    fn bad_ratios() {
        assert!(SplitSpec::new([0.8, 0.1, 0.2], 0).is_err());
        assert!(SplitSpec::new([0.9, 0.1, 0.0], 0).is_err());
        assert!(SplitSpec::new([0.7, 0.2, 0.1], 0).is_ok());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut d = dataset(3);
        d.conversations[2].id = d.conversations[0].id.clone();
        assert!(matches!(split_dataset(&d, &SplitSpec::eight_one_one(1)), Err(IngestError::DuplicateId(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition_independent_of_order(n in 1usize..200, seed in any::<u64>(), perm_seed in any::<u64>()) {
            let d = dataset(n);
            let spec = SplitSpec::eight_one_one(seed);
            let a = split_dataset(&d, &spec).unwrap();
            let mut shuffled = d.clone();
            shuffled.conversations.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let b = split_dataset(&shuffled, &spec).unwrap();
            let ids = |m: &SplitMap, s: Split| m[&s].conversations.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
            let mut all = Vec::new();
            for s in Split::ALL {
                prop_assert_eq!(ids(&a, s), ids(&b, s));
                all.extend(ids(&a, s));
            }
            let total = all.len();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), total);
            prop_assert_eq!(total, n);
        }
    }
}
