//! Shared conversation data model.
//!
//! Every other module consumes these types. They are plain data: immutable
//! once built, `Send + Sync`, and serialized in the canonical JSONL layout
//! (one [`Conversation`] per line).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationParams;

/// Speaker id assigned to generated turns whose speaker prefix could not be parsed.
pub const UNKNOWN_SPEAKER: &str = "<unknown>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {axis} keyword {token:?}")]
pub struct KeywordError {
    pub axis: Axis,
    pub token: String,
}

/// The four circumplex axes, in their fixed rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Power,
    Benevolence,
    Arousal,
    PoliticalLeaning,
}

impl Axis {
    pub const ALL: [Axis; 4] = [
        Axis::Power,
        Axis::Benevolence,
        Axis::Arousal,
        Axis::PoliticalLeaning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Power => "power",
            Axis::Benevolence => "benevolence",
            Axis::Arousal => "arousal",
            Axis::PoliticalLeaning => "political_leaning",
        }
    }

    /// Canonical keywords of this axis, in display order.
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            Axis::Power => &["assertive", "confident", "neutral", "open_minded", "submissive"],
            Axis::Benevolence => &["confrontational", "dismissive", "neutral", "friendly", "supportive"],
            Axis::Arousal => &["energetic", "neutral", "calm"],
            Axis::PoliticalLeaning => &["liberal", "neutral", "conservative"],
        }
    }

    /// Axes that accept `token` as a keyword.
    pub fn owners_of(token: &str) -> Vec<Axis> {
        let norm = normalize_keyword(token);
        Axis::ALL
            .into_iter()
            .filter(|a| a.keywords().contains(&norm.as_str()))
            .collect()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_keyword(s).as_str() {
            "power" => Ok(Axis::Power),
            "benevolence" => Ok(Axis::Benevolence),
            "arousal" => Ok(Axis::Arousal),
            "political_leaning" | "progressiveness" => Ok(Axis::PoliticalLeaning),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

/// Lowercases and maps `-`/space to `_` so "Open-minded" becomes "open_minded".
pub fn normalize_keyword(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            '-' | ' ' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

macro_rules! axis_enum {
    ($name:ident, $axis:expr, { $($variant:ident => $kw:literal, $display:literal;)+ }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $kw,)+
                }
            }

            /// Capitalized form used in prompts ("Open-minded").
            pub fn display_name(self) -> &'static str {
                match self {
                    $($name::$variant => $display,)+
                }
            }
        }

        impl FromStr for $name {
            type Err = KeywordError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match normalize_keyword(s).as_str() {
                    $($kw => Ok($name::$variant),)+
                    _ => Err(KeywordError { axis: $axis, token: s.trim().to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

axis_enum!(Power, Axis::Power, {
    Assertive => "assertive", "Assertive";
    Confident => "confident", "Confident";
    Neutral => "neutral", "Neutral";
    OpenMinded => "open_minded", "Open-minded";
    Submissive => "submissive", "Submissive";
});

axis_enum!(Benevolence, Axis::Benevolence, {
    Confrontational => "confrontational", "Confrontational";
    Dismissive => "dismissive", "Dismissive";
    Neutral => "neutral", "Neutral";
    Friendly => "friendly", "Friendly";
    Supportive => "supportive", "Supportive";
});

axis_enum!(Arousal, Axis::Arousal, {
    Energetic => "energetic", "Energetic";
    Neutral => "neutral", "Neutral";
    Calm => "calm", "Calm";
});

axis_enum!(PoliticalLeaning, Axis::PoliticalLeaning, {
    Liberal => "liberal", "Liberal";
    Neutral => "neutral", "Neutral";
    Conservative => "conservative", "Conservative";
});

/// One keyword per circumplex axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrientationLabel {
    pub power: Power,
    pub benevolence: Benevolence,
    pub arousal: Arousal,
    pub political_leaning: PoliticalLeaning,
}

impl OrientationLabel {
    pub fn new(
        power: Power,
        benevolence: Benevolence,
        arousal: Arousal,
        political_leaning: PoliticalLeaning,
    ) -> Self {
        Self { power, benevolence, arousal, political_leaning }
    }

    pub fn neutral() -> Self {
        Self::new(Power::Neutral, Benevolence::Neutral, Arousal::Neutral, PoliticalLeaning::Neutral)
    }

    /// Canonical keywords in axis order.
    pub fn keywords(&self) -> [&'static str; 4] {
        [
            self.power.as_str(),
            self.benevolence.as_str(),
            self.arousal.as_str(),
            self.political_leaning.as_str(),
        ]
    }

    pub fn display_names(&self) -> [&'static str; 4] {
        [
            self.power.display_name(),
            self.benevolence.display_name(),
            self.arousal.display_name(),
            self.political_leaning.display_name(),
        ]
    }

    pub fn get(&self, axis: Axis) -> &'static str {
        match axis {
            Axis::Power => self.power.as_str(),
            Axis::Benevolence => self.benevolence.as_str(),
            Axis::Arousal => self.arousal.as_str(),
            Axis::PoliticalLeaning => self.political_leaning.as_str(),
        }
    }

    /// Parses four keywords given in axis order. The error names the
    /// offending axis position.
    pub fn from_keywords<S: AsRef<str>>(words: &[S]) -> Result<Self, KeywordError> {
        if words.len() != 4 {
            return Err(KeywordError {
                axis: Axis::ALL[words.len().min(3)],
                token: format!("expected 4 keywords, found {}", words.len()),
            });
        }
        Ok(Self {
            power: words[0].as_ref().parse()?,
            benevolence: words[1].as_ref().parse()?,
            arousal: words[2].as_ref().parse()?,
            political_leaning: words[3].as_ref().parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    #[serde(default)]
    pub orientation: Option<OrientationLabel>,
    #[serde(default)]
    pub is_derailment: Option<bool>,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
            orientation: None,
            is_derailment: None,
        }
    }

    pub fn with_orientation(mut self, label: OrientationLabel) -> Self {
        self.orientation = Some(label);
        self
    }

    pub fn with_derailment(mut self, flag: bool) -> Self {
        self.is_derailment = Some(flag);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Derailed,
    Benign,
}

impl Outcome {
    pub fn is_derailed(self) -> bool {
        self == Outcome::Derailed
    }

    pub fn from_derailed(derailed: bool) -> Self {
        if derailed {
            Outcome::Derailed
        } else {
            Outcome::Benign
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    CgaWiki,
    Bnc,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub source: Source,
    pub prefix_len: usize,
    pub outcome: Outcome,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("conversation {id} is invalid: {}", violations.join("; "))]
pub struct ValidationError {
    pub id: String,
    pub violations: Vec<String>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Lists every broken invariant. Turn indices in messages are 1-based.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.turns.len();
        if self.id.trim().is_empty() {
            out.push("id must be non-empty".to_string());
        }
        if n < 2 {
            out.push(format!("conversation must have at least 2 turns, found {n}"));
        }
        if self.prefix_len < 1 {
            out.push("prefix_len must be >= 1".to_string());
        }
        if self.prefix_len >= n {
            out.push("prefix_len must be < n".to_string());
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let idx = i + 1;
            if turn.text.trim().is_empty() {
                out.push(format!("empty text at turn {idx}"));
            }
            if idx <= self.prefix_len && turn.is_derailment == Some(true) {
                out.push(format!("benign prefix violated at turn {idx}"));
            }
        }
        let future_flags: Vec<bool> = self
            .turns
            .iter()
            .skip(self.prefix_len)
            .filter_map(|t| t.is_derailment)
            .collect();
        if !future_flags.is_empty() {
            let flagged = future_flags.iter().any(|&f| f);
            if flagged != self.outcome.is_derailed() {
                out.push(format!(
                    "outcome {:?} disagrees with per-turn derailment flags",
                    self.outcome
                ));
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), ValidationError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { id: self.id.clone(), violations })
        }
    }

    /// The first `prefix_len` turns.
    pub fn benign_prefix(&self) -> Result<&[Turn], ValidationError> {
        self.ensure_valid()?;
        Ok(&self.turns[..self.prefix_len])
    }
}

/// Free-function form of [`Conversation::validate`].
pub fn validate_conversation(c: &Conversation) -> Vec<String> {
    c.validate()
}

pub fn benign_prefix(c: &Conversation) -> Result<Vec<Turn>, ValidationError> {
    c.benign_prefix().map(<[Turn]>::to_vec)
}

/// L sampled futures for one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSet {
    pub conversation_id: String,
    pub prefix_len: usize,
    pub seed: u64,
    pub params: GenerationParams,
    pub continuations: Vec<Vec<Turn>>,
}

impl ContinuationSet {
    pub fn len(&self) -> usize {
        self.continuations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.continuations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    PredictDerailment,
    PredictBenign,
}

impl FromStr for TieRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_keyword(s).as_str() {
            "predict_derailment" | "derailment" => Ok(TieRule::PredictDerailment),
            "predict_benign" | "benign" => Ok(TieRule::PredictBenign),
            other => Err(format!("unknown tie rule {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub conversation_id: String,
    pub probabilities: Vec<f64>,
    pub votes: Vec<bool>,
    #[serde(rename = "final")]
    pub final_label: bool,
    pub threshold: f64,
    pub tie_rule: TieRule,
}

impl ForecastResult {
    /// Checks `votes[i] == (p[i] >= threshold)` and the length match.
    pub fn votes_consistent(&self) -> bool {
        self.probabilities.len() == self.votes.len()
            && self
                .probabilities
                .iter()
                .zip(&self.votes)
                .all(|(&p, &v)| (p >= self.threshold) == v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(s: &str, t: &str) -> Turn {
        Turn::new(s, t)
    }

    fn four_turn(prefix_len: usize) -> Conversation {
        Conversation {
            id: "c1".into(),
            source: Source::Bnc,
            prefix_len,
            outcome: Outcome::Derailed,
            turns: vec![
                turn("a", "hello").with_derailment(false),
                turn("b", "hi there").with_derailment(false),
                turn("a", "what do you think").with_derailment(false),
                turn("b", "you are an idiot").with_derailment(true),
            ],
        }
    }

    #[test]
    fn valid_four_turn_conversation() {
        assert!(validate_conversation(&four_turn(3)).is_empty());
    }

    #[test]
    fn prefix_len_equal_to_n_is_rejected() {
        assert!(validate_conversation(&four_turn(4)).contains(&"prefix_len must be < n".to_string()));
    }

    #[test]
    fn derailing_prefix_turn_is_named() {
        let mut c = four_turn(3);
        c.turns[1].is_derailment = Some(true);
        let v = validate_conversation(&c);
        assert_eq!(v, vec!["benign prefix violated at turn 2"]);
    }

    #[test]
    fn outcome_must_match_flags() {
        let mut c = four_turn(3);
        c.outcome = Outcome::Benign;
        assert_eq!(validate_conversation(&c).len(), 1);
        c.turns[3].is_derailment = None;
        assert!(validate_conversation(&c).is_empty());
    }

    #[test]
    fn benign_prefix_slices() {
        let c = four_turn(3);
        let p = benign_prefix(&c).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[2].text, "what do you think");

        let mut six = four_turn(3);
        six.turns.insert(0, turn("x", "one"));
        six.turns.insert(0, turn("y", "zero"));
        six.prefix_len = 5;
        six.turns[5].is_derailment = Some(true);
        assert_eq!(benign_prefix(&six).unwrap().len(), 5);

        let mut one = four_turn(1);
        one.turns[1].is_derailment = None;
        one.turns[2].is_derailment = None;
        assert_eq!(benign_prefix(&one).unwrap(), vec![c.turns[0].clone()]);
    }

    #[test]
    fn benign_prefix_rejects_invalid() {
        assert!(benign_prefix(&four_turn(4)).is_err());
    }

    #[test]
    fn keyword_parsing_is_case_insensitive() {
        assert_eq!("Open-minded".parse::<Power>().unwrap(), Power::OpenMinded);
        assert_eq!("OPEN_MINDED".parse::<Power>().unwrap(), Power::OpenMinded);
        assert!("friendly".parse::<Power>().is_err());
        assert_eq!(Axis::owners_of("Neutral").len(), 4);
        assert_eq!(Axis::owners_of("friendly"), vec![Axis::Benevolence]);
    }

    #[test]
    fn canonical_json_layout() {
        let c = four_turn(3);
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["source"], "bnc");
        assert_eq!(v["outcome"], "derailed");
        assert!(v["turns"][0]["orientation"].is_null());
        let label = OrientationLabel::new(
            Power::OpenMinded,
            Benevolence::Supportive,
            Arousal::Energetic,
            PoliticalLeaning::Neutral,
        );
        let t = turn("a", "b").with_orientation(label);
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["orientation"]["power"], "open_minded");
        assert_eq!(v["orientation"]["political_leaning"], "neutral");
    }
}
