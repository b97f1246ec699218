//! Conversation <-> backend text, generator training pairs, and continuation
//! sampling.
//!
//! A turn renders as
//!
//! ```text
//! [power, benevolence, arousal, political_leaning] speaker: text
//! ```
//!
//! with the bracketed tag present only when the scheme includes orientation.
//! Turns are joined by the turn delimiter. The end marker is appended only to
//! complete conversations (training targets).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{whitespace_tokens, BackendError, BigramGenerator, GenerationParams, GeneratorBackend};
use crate::model::{ContinuationSet, Conversation, OrientationLabel, Turn, UNKNOWN_SPEAKER};

/// Salt mixed into the seed of the single retry after an empty generation.
const RESAMPLE_SALT: u64 = 0x005e_ed0f_e4a7_1e55;

pub const DEFAULT_MAX_TURNS_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializationScheme {
    pub include_orientation: bool,
    pub turn_delimiter: String,
    pub label_open: String,
    pub label_close: String,
    pub end_of_conversation_marker: String,
    pub speaker_separator: String,
    /// Appends the true next speaker to generation prompts. Off by default.
    pub inject_next_speaker: bool,
}

impl Default for SerializationScheme {
    fn default() -> Self {
        Self {
            include_orientation: false,
            turn_delimiter: "\n<TURN>\n".into(),
            label_open: "[".into(),
            label_close: "]".into(),
            end_of_conversation_marker: crate::backend::DEFAULT_END_MARKER.into(),
            speaker_separator: ": ".into(),
            inject_next_speaker: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("structural string {0} must be non-empty")]
    Empty(&'static str),
    #[error("structural strings {0} and {1} must differ")]
    Clash(&'static str, &'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("turn {turn} has no orientation label but the scheme includes orientation")]
    MissingLabel { turn: usize },
    #[error("cannot serialize an empty turn list")]
    NoTurns,
    #[error("invalid prefix length {k} for a conversation of {n} turns")]
    BadPrefix { k: usize, n: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl SerializationScheme {
    pub fn with_orientation(mut self, on: bool) -> Self {
        self.include_orientation = on;
        self
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let parts = [
            ("turn_delimiter", &self.turn_delimiter),
            ("label_open", &self.label_open),
            ("label_close", &self.label_close),
            ("end_of_conversation_marker", &self.end_of_conversation_marker),
            ("speaker_separator", &self.speaker_separator),
        ];
        for (name, s) in &parts {
            if s.is_empty() {
                return Err(SchemeError::Empty(name));
            }
        }
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if parts[i].1 == parts[j].1 {
                    return Err(SchemeError::Clash(parts[i].0, parts[j].0));
                }
            }
        }
        Ok(())
    }

    fn split_token(&self) -> &str {
        let t = self.turn_delimiter.trim();
        if t.is_empty() {
            &self.turn_delimiter
        } else {
            t
        }
    }

    fn end_token(&self) -> &str {
        let t = self.end_of_conversation_marker.trim();
        if t.is_empty() {
            &self.end_of_conversation_marker
        } else {
            t
        }
    }

    pub fn render_label(&self, label: &OrientationLabel) -> String {
        format!("{}{}{}", self.label_open, label.keywords().join(", "), self.label_close)
    }

    /// Renders one turn. Without `strict`, a missing label in orientation
    /// mode renders the turn untagged instead of failing.
    fn render_turn(&self, turn: &Turn, index: usize, strict: bool) -> Result<String, GeneratorError> {
        let mut out = String::new();
        if self.include_orientation {
            match &turn.orientation {
                Some(label) => {
                    out.push_str(&self.render_label(label));
                    out.push(' ');
                }
                None if strict => return Err(GeneratorError::MissingLabel { turn: index }),
                None => {}
            }
        }
        out.push_str(&turn.speaker);
        out.push_str(&self.speaker_separator);
        out.push_str(&collapse_delimiters(&turn.text, self));
        Ok(out)
    }
}

/// Turn text may not contain the turn delimiter; replace it with a space.
fn collapse_delimiters(text: &str, scheme: &SerializationScheme) -> String {
    if text.contains(scheme.split_token()) {
        text.replace(scheme.split_token(), " ")
    } else {
        text.to_string()
    }
}

fn render(turns: &[Turn], scheme: &SerializationScheme, strict: bool) -> Result<String, GeneratorError> {
    if turns.is_empty() {
        return Err(GeneratorError::NoTurns);
    }
    let rendered = turns
        .iter()
        .enumerate()
        .map(|(i, t)| scheme.render_turn(t, i + 1, strict))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rendered.join(&scheme.turn_delimiter))
}

/// Renders turns as backend text. Fails when orientation is on and a turn has
/// no label; the error names the 1-based turn index.
pub fn serialize(turns: &[Turn], scheme: &SerializationScheme) -> Result<String, GeneratorError> {
    scheme.validate()?;
    render(turns, scheme, true)
}

/// Like [`serialize`], but unlabeled turns render without a tag. Used for
/// generated turns, which carry labels only if the generator emitted them.
pub fn serialize_lenient(turns: &[Turn], scheme: &SerializationScheme) -> Result<String, GeneratorError> {
    scheme.validate()?;
    render(turns, scheme, false)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Deserialized {
    pub turns: Vec<Turn>,
    pub warnings: Vec<String>,
}

/// Parses backend output back into turns. Never fails: malformed tags stay in
/// the text and are reported as warnings, and segments without a speaker
/// prefix get [`UNKNOWN_SPEAKER`].
pub fn deserialize_continuation(text: &str, scheme: &SerializationScheme) -> Deserialized {
    let body = match text.find(scheme.end_token()) {
        Some(pos) => &text[..pos],
        None => text,
    };
    let mut out = Deserialized::default();
    for segment in body.split(scheme.split_token()) {
        let segment = segment.trim();
        if segment.is_empty() {
            continue;
        }
        let idx = out.turns.len() + 1;
        let (orientation, rest) = match parse_tag(segment, scheme) {
            TagParse::None => (None, segment),
            TagParse::Valid(label, rest) => (Some(label), rest),
            TagParse::Invalid(reason) => {
                out.warnings.push(format!("turn {idx}: label tag kept as text ({reason})"));
                (None, segment)
            }
        };
        let (speaker, body) = match rest.split_once(scheme.speaker_separator.as_str()) {
            Some((s, t)) if !s.trim().is_empty() && !t.trim().is_empty() => (s.trim(), t.trim()),
            _ => (UNKNOWN_SPEAKER, rest),
        };
        out.turns.push(Turn {
            speaker: speaker.to_string(),
            text: body.to_string(),
            orientation,
            is_derailment: None,
        });
    }
    out
}

enum TagParse<'a> {
    None,
    Valid(OrientationLabel, &'a str),
    Invalid(String),
}

fn parse_tag<'a>(segment: &'a str, scheme: &SerializationScheme) -> TagParse<'a> {
    let Some(after_open) = segment.strip_prefix(scheme.label_open.as_str()) else {
        return TagParse::None;
    };
    let Some(close) = after_open.find(scheme.label_close.as_str()) else {
        return TagParse::Invalid("unterminated tag".into());
    };
    let words: Vec<&str> = after_open[..close].split(',').map(str::trim).collect();
    match OrientationLabel::from_keywords(&words) {
        Ok(label) => TagParse::Valid(label, after_open[close + scheme.label_close.len()..].trim_start()),
        Err(e) => TagParse::Invalid(e.to_string()),
    }
}

/// Generator training example: `context` (turns 1..k) and `target`
/// (turns k+1..n followed by the end marker).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub conversation_id: String,
    pub context_text: String,
    pub target_text: String,
    pub k_used: usize,
}

impl TrainingPair {
    /// Context tokens followed directly by target tokens.
    pub fn tokens(&self) -> Vec<&str> {
        whitespace_tokens(&self.context_text).chain(whitespace_tokens(&self.target_text)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "k")]
pub enum KPolicy {
    /// k = the conversation's own benign prefix length.
    GoldPrefix,
    /// Fixed k; conversations with n <= k are skipped.
    FixedK(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairReport {
    pub used: usize,
    pub too_short: usize,
    pub missing_labels: usize,
}

pub fn build_training_pairs(
    conversations: &[Conversation],
    scheme: &SerializationScheme,
    policy: KPolicy,
) -> Result<(Vec<TrainingPair>, PairReport), GeneratorError> {
    scheme.validate()?;
    let mut report = PairReport::default();
    let mut pairs = Vec::new();
    for c in conversations {
        let n = c.turns.len();
        let k = match policy {
            KPolicy::GoldPrefix => c.prefix_len,
            KPolicy::FixedK(v) => v,
        };
        if k == 0 || k >= n {
            report.too_short += 1;
            continue;
        }
        let rendered = serialize(&c.turns[..k], scheme).and_then(|ctx| Ok((ctx, serialize(&c.turns[k..], scheme)?)));
        match rendered {
            Ok((context_text, future)) => {
                pairs.push(TrainingPair {
                    conversation_id: c.id.clone(),
                    context_text,
                    target_text: format!("{future} {}", scheme.end_of_conversation_marker),
                    k_used: k,
                });
                report.used += 1;
            }
            Err(GeneratorError::MissingLabel { .. }) => report.missing_labels += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, report))
}

/// Fits the toy bigram generator on training pairs.
pub fn train_bigram_generator(
    pairs: &[TrainingPair],
    scheme: &SerializationScheme,
) -> Result<BigramGenerator, GeneratorError> {
    let corpus: Vec<Vec<&str>> = pairs.iter().map(TrainingPair::tokens).collect();
    Ok(BigramGenerator::train(&corpus, scheme.end_token())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SampleStatus {
    Ok,
    /// The first draw was empty; the retry succeeded.
    Resampled,
    /// Both draws were empty, or generation failed. The continuation is a
    /// single empty-text turn.
    Placeholder { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub status: SampleStatus,
    /// Oldest prefix turns dropped to fit the backend context.
    pub dropped_prefix_turns: usize,
    pub capped: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub set: ContinuationSet,
    pub reports: Vec<SampleReport>,
}

impl Sampled {
    pub fn placeholder_count(&self) -> usize {
        self.reports
            .iter()
            .filter(|r| matches!(r.status, SampleStatus::Placeholder { .. }))
            .count()
    }
}

fn placeholder_turn() -> Vec<Turn> {
    vec![Turn::new(UNKNOWN_SPEAKER, "")]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub samples: usize,
    pub params: GenerationParams,
    pub scheme: SerializationScheme,
    pub seed: u64,
    pub max_turns_cap: usize,
}

impl SamplingConfig {
    pub fn new(samples: usize, params: GenerationParams, scheme: SerializationScheme, seed: u64) -> Self {
        Self { samples, params, scheme, seed, max_turns_cap: DEFAULT_MAX_TURNS_CAP }
    }
}

/// Samples `config.samples` continuations of the first `k` turns of `c`.
///
/// Sample `i` uses seed `config.seed + i`. Results are ordered by `i` even
/// when samples run concurrently.
pub fn sample_continuations<G: GeneratorBackend + ?Sized>(
    g: &G,
    c: &Conversation,
    k: usize,
    config: &SamplingConfig,
) -> Result<Sampled, GeneratorError> {
    let n = c.turns.len();
    if k == 0 || k >= n {
        return Err(GeneratorError::BadPrefix { k, n });
    }
    sample_from_history(g, &c.id, &c.turns[..k], c.turns.get(k).map(|t| t.speaker.as_str()), config)
}

/// Samples continuations of an arbitrary history. `next_speaker` is used
/// only when the scheme injects it.
pub fn sample_from_history<G: GeneratorBackend + ?Sized>(
    g: &G,
    conversation_id: &str,
    history: &[Turn],
    next_speaker: Option<&str>,
    config: &SamplingConfig,
) -> Result<Sampled, GeneratorError> {
    if config.samples == 0 {
        return Err(GeneratorError::NoSamples);
    }
    if history.is_empty() {
        return Err(GeneratorError::NoTurns);
    }
    let scheme = &config.scheme;
    scheme.validate()?;
    let params = if config.params.stop_marker() == scheme.end_token() {
        config.params.clone()
    } else {
        config.params.clone().with_stop_marker(scheme.end_token())?
    };
    // Surface serialization problems (e.g. missing labels) before sampling.
    serialize(history, scheme)?;

    let injected = match (scheme.inject_next_speaker, next_speaker) {
        (true, Some(s)) => Some(format!("{s}{}", scheme.speaker_separator)),
        _ => None,
    };

    let results: Vec<(Vec<Turn>, SampleReport)> = (0..config.samples)
        .into_par_iter()
        .map(|i| {
            sample_one(
                g,
                history,
                injected.as_deref(),
                &params,
                scheme,
                config.seed.wrapping_add(i as u64),
                config.max_turns_cap,
            )
        })
        .collect();

    let (continuations, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Sampled {
        set: ContinuationSet {
            conversation_id: conversation_id.to_string(),
            prefix_len: history.len(),
            seed: config.seed,
            params,
            continuations,
        },
        reports,
    })
}

fn sample_one<G: GeneratorBackend + ?Sized>(
    g: &G,
    history: &[Turn],
    injected: Option<&str>,
    params: &GenerationParams,
    scheme: &SerializationScheme,
    seed: u64,
    max_turns_cap: usize,
) -> (Vec<Turn>, SampleReport) {
    let mut report = SampleReport { status: SampleStatus::Ok, dropped_prefix_turns: 0, capped: false, warnings: Vec::new() };

    let draw = |start: usize, seed: u64| -> Result<String, BackendError> {
        let mut prompt = render(&history[start..], scheme, true).expect("history validated");
        if let Some(s) = injected {
            prompt.push_str(&scheme.turn_delimiter);
            prompt.push_str(s.trim_end());
        }
        g.generate(&prompt, params, seed).map(|out| match injected {
            Some(s) => format!("{s}{out}"),
            None => out,
        })
    };

    let mut start = 0;
    let attempt = |seed: u64, start: &mut usize| -> Result<String, BackendError> {
        loop {
            match draw(*start, seed) {
                Err(BackendError::ContextOverflow { .. }) if *start + 1 < history.len() => *start += 1,
                other => return other,
            }
        }
    };

    let mut turns = None;
    for (round, s) in [seed, seed ^ RESAMPLE_SALT].into_iter().enumerate() {
        match attempt(s, &mut start) {
            Ok(text) => {
                let parsed = deserialize_continuation(&text, scheme);
                report.warnings.extend(parsed.warnings);
                if !parsed.turns.is_empty() {
                    if round == 1 {
                        report.status = SampleStatus::Resampled;
                    }
                    turns = Some(parsed.turns);
                    break;
                }
                report.warnings.push(format!("empty generation (draw {})", round + 1));
            }
            Err(e) => {
                report.dropped_prefix_turns = start;
                report.status = SampleStatus::Placeholder { reason: format!("generation failed: {e}") };
                report.warnings.push(e.to_string());
                return (placeholder_turn(), report);
            }
        }
    }
    report.dropped_prefix_turns = start;
    match turns {
        Some(mut t) => {
            if t.len() > max_turns_cap {
                t.truncate(max_turns_cap.max(1));
                report.capped = true;
            }
            (t, report)
        }
        None => {
            report.status = SampleStatus::Placeholder { reason: "empty generation after resample".into() };
            (placeholder_turn(), report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FnGenerator;
    use crate::model::{Arousal, Benevolence, Outcome, PoliticalLeaning, Power, Source};
    use proptest::prelude::*;

    fn label() -> OrientationLabel {
        OrientationLabel::new(Power::Assertive, Benevolence::Confrontational, Arousal::Energetic, PoliticalLeaning::Conservative)
    }

    fn conv(n: usize, prefix_len: usize) -> Conversation {
        Conversation {
            id: format!("c{n}"),
            source: Source::Synthetic,
            prefix_len,
            outcome: Outcome::Benign,
            turns: (0..n).map(|i| Turn::new(if i % 2 == 0 { "A" } else { "B" }, format!("turn {}", i + 1))).collect(),
        }
    }

    #[test]
    fn single_turn_rendering() {
        let s = SerializationScheme::default();
        assert_eq!(serialize(&[Turn::new("A", "hi")], &s).unwrap(), "A: hi");
        let on = s.with_orientation(true);
        let t = Turn::new("A", "hi").with_orientation(label());
        assert_eq!(
            serialize(&[t], &on).unwrap(),
            "[assertive, confrontational, energetic, conservative] A: hi"
        );
    }

    #[test]
    fn missing_label_names_turn() {
        let on = SerializationScheme::default().with_orientation(true);
        let turns = [Turn::new("A", "x").with_orientation(label()), Turn::new("B", "y")];
        assert_eq!(serialize(&turns, &on), Err(GeneratorError::MissingLabel { turn: 2 }));
        assert!(serialize_lenient(&turns, &on).unwrap().ends_with("B: y"));
    }

    #[test]
    fn scheme_rejects_clashes() {
        let mut s = SerializationScheme::default();
        s.label_close = s.label_open.clone();
        assert!(matches!(s.validate(), Err(SchemeError::Clash(..))));
        s = SerializationScheme::default();
        s.speaker_separator.clear();
        assert_eq!(s.validate(), Err(SchemeError::Empty("speaker_separator")));
    }

    #[test]
    fn deserialize_splits_turns() {
        let mut s = SerializationScheme::default();
        s.turn_delimiter = "<EOT>".into();
        let d = deserialize_continuation("A: sure<EOT>B: no way", &s);
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[1].speaker, "B");
        assert_eq!(d.turns[1].text, "no way");
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn misplaced_keyword_keeps_tag_as_text() {
        let s = SerializationScheme::default();
        let d = deserialize_continuation("[friendly, supportive, calm, neutral] A: thanks", &s);
        assert_eq!(d.turns.len(), 1);
        assert_eq!(d.warnings.len(), 1);
        assert!(d.turns[0].orientation.is_none());
        assert!(d.turns[0].speaker.starts_with("[friendly"));
    }

    #[test]
    fn unparseable_segment_gets_unknown_speaker() {
        let s = SerializationScheme::default();
        let d = deserialize_continuation("just some words <END_OF_CONVERSATION> trailing", &s);
        assert_eq!(d.turns, vec![Turn::new(UNKNOWN_SPEAKER, "just some words")]);
    }

    #[test]
    fn space_joined_generation_is_parsed() {
        // Token-level generators emit the delimiter as a plain token.
        let s = SerializationScheme::default();
        let d = deserialize_continuation("A: x y <TURN> B: z <END_OF_CONVERSATION>", &s);
        assert_eq!(d.turns, vec![Turn::new("A", "x y"), Turn::new("B", "z")]);
    }

    #[test]
    fn labeled_round_trip() {
        let on = SerializationScheme::default().with_orientation(true);
        let turns: Vec<Turn> = (0..3)
            .map(|i| Turn::new(format!("u{i}"), format!("text {i}")).with_orientation(label()))
            .collect();
        let d = deserialize_continuation(&serialize(&turns, &on).unwrap(), &on);
        assert_eq!(d.turns, turns);
    }

    #[test]
    fn training_pairs_gold_prefix() {
        let s = SerializationScheme::default();
        let (pairs, report) = build_training_pairs(&[conv(4, 3)], &s, KPolicy::GoldPrefix).unwrap();
        assert_eq!(report.used, 1);
        let p = &pairs[0];
        assert_eq!(p.k_used, 3);
        assert_eq!(deserialize_continuation(&p.context_text, &s).turns.len(), 3);
        assert!(p.target_text.ends_with("<END_OF_CONVERSATION>"));
        assert_eq!(deserialize_continuation(&p.target_text, &s).turns, vec![Turn::new("B", "turn 4")]);
    }

    #[test]
    fn training_pairs_fixed_k() {
        let s = SerializationScheme::default();
        let (pairs, report) = build_training_pairs(&[conv(6, 5), conv(3, 2)], &s, KPolicy::FixedK(2)).unwrap();
        assert_eq!(report.used, 2);
        let target = deserialize_continuation(&pairs[0].target_text, &s).turns;
        assert_eq!(target.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(), ["turn 3", "turn 4", "turn 5", "turn 6"]);

        let (pairs, report) = build_training_pairs(&[conv(3, 2)], &s, KPolicy::FixedK(4)).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(report.too_short, 1);
    }

    fn cfg(samples: usize) -> SamplingConfig {
        SamplingConfig::new(samples, GenerationParams::default(), SerializationScheme::default(), 100)
    }

    #[test]
    fn sample_count_and_seeds() {
        let g = FnGenerator::new(|_: &str, _: &GenerationParams, seed: u64| Ok(format!("C: seed {seed} <END_OF_CONVERSATION>")));
        let c = conv(4, 3);
        let out = sample_continuations(&g, &c, 3, &cfg(5)).unwrap();
        assert_eq!(out.set.len(), 5);
        for (i, cont) in out.set.continuations.iter().enumerate() {
            assert_eq!(cont[0].text, format!("seed {}", 100 + i));
        }
        assert_eq!(out.set.prefix_len, 3);
        let again = sample_continuations(&g, &c, 3, &cfg(5)).unwrap();
        assert_eq!(again.set, out.set);
    }

    #[test]
    fn empty_generation_resamples_then_placeholder() {
        let g = FnGenerator::new(|_: &str, _: &GenerationParams, _: u64| Ok("<END_OF_CONVERSATION>".to_string()));
        let out = sample_continuations(&g, &conv(4, 3), 3, &cfg(2)).unwrap();
        assert_eq!(out.set.len(), 2);
        assert_eq!(out.placeholder_count(), 2);
        assert_eq!(out.set.continuations[0], vec![Turn::new(UNKNOWN_SPEAKER, "")]);

        let g = FnGenerator::new(|_: &str, _: &GenerationParams, seed: u64| {
            Ok(if seed == 100 { "<END_OF_CONVERSATION>".into() } else { "B: ok".into() })
        });
        let out = sample_continuations(&g, &conv(4, 3), 3, &cfg(1)).unwrap();
        assert_eq!(out.reports[0].status, SampleStatus::Resampled);
        assert_eq!(out.set.continuations[0], vec![Turn::new("B", "ok")]);
    }

    #[test]
    fn context_overflow_drops_oldest_turns() {
        let g = FnGenerator::new(|prompt: &str, _: &GenerationParams, _: u64| {
            let turns = prompt.matches("<TURN>").count() + 1;
            if turns > 2 {
                Err(BackendError::ContextOverflow { tokens: turns, capacity: 2 })
            } else {
                Ok(format!("Z: saw {turns}"))
            }
        });
        let out = sample_continuations(&g, &conv(5, 4), 4, &cfg(1)).unwrap();
        assert_eq!(out.reports[0].dropped_prefix_turns, 2);
        assert_eq!(out.set.continuations[0][0].text, "saw 2");

        let never = FnGenerator::new(|_: &str, _: &GenerationParams, _: u64| {
            Err(BackendError::ContextOverflow { tokens: 9, capacity: 1 })
        });
        let out = sample_continuations(&never, &conv(5, 4), 4, &cfg(3)).unwrap();
        assert_eq!(out.set.len(), 3);
        assert_eq!(out.placeholder_count(), 3);
    }

    #[test]
    fn turn_cap_and_bad_prefix() {
        let g = FnGenerator::new(|_: &str, _: &GenerationParams, _: u64| {
            Ok((0..40).map(|i| format!("S: t{i}")).collect::<Vec<_>>().join(" <TURN> "))
        });
        let mut c = cfg(1);
        c.max_turns_cap = 16;
        let out = sample_continuations(&g, &conv(4, 3), 3, &c).unwrap();
        assert_eq!(out.set.continuations[0].len(), 16);
        assert!(out.reports[0].capped);
        assert!(matches!(sample_continuations(&g, &conv(4, 3), 4, &c), Err(GeneratorError::BadPrefix { .. })));
        assert!(matches!(sample_continuations(&g, &conv(4, 3), 0, &c), Err(GeneratorError::BadPrefix { .. })));
    }

    #[test]
    fn prompt_never_injects_next_speaker_by_default() {
        let g = FnGenerator::new(|prompt: &str, _: &GenerationParams, _: u64| Ok(format!("X: {}", prompt.len())));
        let c = conv(4, 3);
        let plain = sample_continuations(&g, &c, 3, &cfg(1)).unwrap();
        assert_eq!(plain.set.continuations[0][0].speaker, "X");

        let mut inj = cfg(1);
        inj.scheme.inject_next_speaker = true;
        let g = FnGenerator::new(|prompt: &str, _: &GenerationParams, _: u64| {
            assert!(prompt.ends_with("<TURN>\nB:"));
            Ok("hello there".to_string())
        });
        let out = sample_continuations(&g, &c, 3, &inj).unwrap();
        assert_eq!(out.set.continuations[0], vec![Turn::new("B", "hello there")]);
    }

    fn arb_label() -> impl Strategy<Value = OrientationLabel> {
        (0..5usize, 0..5usize, 0..3usize, 0..3usize).prop_map(|(a, b, c, d)| {
            OrientationLabel::new(Power::ALL[a], Benevolence::ALL[b], Arousal::ALL[c], PoliticalLeaning::ALL[d])
        })
    }

    fn arb_turn() -> impl Strategy<Value = Turn> {
        ("[a-z][a-z0-9_]{0,8}", "[a-zA-Z0-9.,!?']{1,10}( [a-zA-Z0-9.,!?']{1,10}){0,6}", arb_label())
            .prop_map(|(s, t, l)| Turn::new(s, t).with_orientation(l))
    }

    proptest! {
        #[test]
        fn round_trip_any_scheme(turns in prop::collection::vec(arb_turn(), 1..8), orient in any::<bool>(), alt in any::<bool>()) {
            let mut scheme = SerializationScheme::default().with_orientation(orient);
            if alt {
                scheme.turn_delimiter = " ||| ".into();
                scheme.label_open = "<<".into();
                scheme.label_close = ">>".into();
                scheme.speaker_separator = " :: ".into();
                scheme.end_of_conversation_marker = "#END#".into();
            }
            let text = serialize(&turns, &scheme).unwrap();
            let back = deserialize_continuation(&text, &scheme);
            prop_assert!(back.warnings.is_empty());
            let expect: Vec<Turn> = turns
                .iter()
                .map(|t| Turn { orientation: if orient { t.orientation } else { None }, ..t.clone() })
                .collect();
            prop_assert_eq!(back.turns, expect);
        }

        #[test]
        fn pair_concatenation_recovers_turns(turns in prop::collection::vec(arb_turn(), 2..8), k_frac in 0.0f64..1.0) {
            let n = turns.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let k = k.min(n - 1);
            let c = Conversation { id: "p".into(), source: Source::Synthetic, prefix_len: k, outcome: Outcome::Benign, turns: turns.clone() };
            let scheme = SerializationScheme::default().with_orientation(true);
            let (pairs, _) = build_training_pairs(&[c], &scheme, KPolicy::GoldPrefix).unwrap();
            let mut all = deserialize_continuation(&pairs[0].context_text, &scheme).turns;
            all.extend(deserialize_continuation(&pairs[0].target_text, &scheme).turns);
            prop_assert_eq!(all, turns);
        }
    }
}
