//! Social-orientation annotation: few-shot prompts, response parsing, and
//! agreement statistics for checking annotations against human judges.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AnnotationBackend, BackendError};
use crate::model::{Axis, Conversation, KeywordError, OrientationLabel, Turn};

/// Placeholder replaced by the target conversation.
pub const PLACEHOLDER: &str = "{Comments to Annotate}";

const PREAMBLE: &str = "Analyze the communication styles in the specified Wikipedia editor discussions according to four dimensions: power, benevolence, arousal, and progressiveness. Definitions and response options for each dimension are provided below. Begin by reading the first four conversations. For the fifth conversation, annotate every comment according to the dimensions provided, using the same format. Select the most appropriate option from each category for each comment. If a conversation has been partially annotated, only provide annotations for the remaining comments. Provide these annotations directly, without additional explanations or digressions.

Dimensions:

1. Power: This dimension gauges the extent to which an individual seeks to control or assert dominance in a conversation.
- Options: Assertive, Confident, Neutral, Open-minded, Submissive

2. Benevolence: This measures the warmth and positivity of the interactions.
- Options: Confrontational, Dismissive, Neutral, Friendly, Supportive

3. Arousal: This refers to the level of energy and excitement in the comment.
- Options: Energetic, Neutral, Calm

4. Progressiveness: This assesses the political orientation conveyed in the comment.
- Options: Liberal, Neutral, Conservative

In the following conversations drawn from Wikipedia discussion forums, each row corresponds to a turn number, an user name, and a comment made by that user. Provide a social orientation tag for every turn in the input, and do not skip any turns. Closely follow the format in the first four examples, and finish the last sample. Do not provide any explanations.";

const TAG_HEADING: &str = "Social Orientation Tags:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    /// `Turn i: speaker: text` lines.
    pub conversation: String,
    /// `Turn i: w1, w2, w3, w4` lines.
    pub annotations: String,
    pub heading: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPromptTemplate {
    pub preamble: String,
    pub exemplars: Vec<Exemplar>,
    pub placeholder: String,
    /// Heading after the target conversation; empty for raw templates.
    pub target_heading: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template must contain the placeholder {placeholder:?} exactly once, found {found}")]
    Placeholder { placeholder: String, found: usize },
    #[error("conversation has no turns")]
    NoTurns,
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

fn exemplar(turns: &[(&str, &str)], labels: &[&str], heading: &str) -> Exemplar {
    let conversation = turns
        .iter()
        .enumerate()
        .map(|(i, (s, t))| format!("Turn {}: {s}: {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let annotations = labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("Turn {}: {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    Exemplar { conversation, annotations, heading: heading.to_string() }
}

impl Default for AnnotationPromptTemplate {
    /// The four-shot Wikipedia template. Conversation 1 is the published
    /// exemplar; conversations 2-4 are written for this crate.
    fn default() -> Self {
        let exemplars = vec![
            exemplar(
                &[
                    ("Tryptofish", "== Good work! =="),
                    ("Tryptofish", "'''The Admin's Barnstar''' For the apparently thankless task of drafting a suggested closing summary at the RfC/U."),
                    ("The Wordsmith", "Thank you for your kindness. I do make an effort to be even-handed, no matter what people wiki_link about me."),
                    ("Lar", "I was just popping by to offer some words of encouragement. Glad to see Tryp beat me to it. ++: /"),
                ],
                &[
                    "Open-minded, Supportive, Energetic, Neutral",
                    "Open-minded, Supportive, Energetic, Neutral",
                    "Open-minded, Friendly, Neutral, Neutral",
                    "Open-minded, Supportive, Energetic, Neutral",
                ],
                "Annotations:",
            ),
            exemplar(
                &[
                    ("Hobit", "You reverted my edit to the infobox without explanation. The population figure is from the 2010 census, which is cited."),
                    ("Nyttend", "The census page you linked gives the county total, not the city. Please check the source before re-adding."),
                    ("Hobit", "Fair point, I misread the table. I'll look for the city figure instead."),
                ],
                &[
                    "Assertive, Dismissive, Neutral, Neutral",
                    "Confident, Dismissive, Calm, Neutral",
                    "Submissive, Friendly, Calm, Neutral",
                ],
                TAG_HEADING,
            ),
            exemplar(
                &[
                    ("Carcharoth", "This article reads like a press release for the new tax policy. It needs criticism from economists, not just the ministry's talking points."),
                    ("JzG", "Agreed that it is one-sided. The opposition's alternative budget deserves a paragraph too."),
                    ("Binksternet", "Stop removing sourced material! You obviously have an agenda here and it shows."),
                ],
                &[
                    "Assertive, Dismissive, Energetic, Liberal",
                    "Confident, Friendly, Neutral, Liberal",
                    "Assertive, Confrontational, Energetic, Neutral",
                ],
                TAG_HEADING,
            ),
            exemplar(
                &[
                    ("Mjroots", "Would anyone mind if I merged the two stub articles about the station? They cover the same building."),
                    ("Ritchie333", "No objection from me. Maybe keep the redirect for the old name."),
                    ("Mjroots", "Good idea, thanks. Done."),
                ],
                &[
                    "Open-minded, Friendly, Calm, Neutral",
                    "Open-minded, Supportive, Calm, Neutral",
                    "Confident, Friendly, Calm, Neutral",
                ],
                TAG_HEADING,
            ),
        ];
        Self {
            preamble: PREAMBLE.to_string(),
            exemplars,
            placeholder: PLACEHOLDER.to_string(),
            target_heading: TAG_HEADING.to_string(),
        }
    }
}

impl AnnotationPromptTemplate {
    /// A template given as literal text; it must contain `placeholder` once.
    pub fn from_text(text: impl Into<String>, placeholder: impl Into<String>) -> Self {
        Self {
            preamble: text.into(),
            exemplars: Vec::new(),
            placeholder: placeholder.into(),
            target_heading: String::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Self::from_text(text, PLACEHOLDER))
    }

    /// Full template text, placeholder not yet substituted.
    pub fn render(&self) -> String {
        if self.exemplars.is_empty() && self.target_heading.is_empty() {
            return self.preamble.clone();
        }
        let mut out = String::new();
        out.push_str(&self.preamble);
        out.push_str("\n\n");
        for (i, ex) in self.exemplars.iter().enumerate() {
            out.push_str(&format!(
                "Conversation {}:\n{}\n\n{}\n{}\n\n",
                i + 1,
                ex.conversation,
                ex.heading,
                ex.annotations
            ));
        }
        out.push_str(&format!(
            "Conversation {}:\n{}\n\n{}\n",
            self.exemplars.len() + 1,
            self.placeholder,
            self.target_heading
        ));
        out
    }
}

/// `Turn i: speaker: text` lines, newlines inside text collapsed to spaces.
pub fn render_conversation(turns: &[Turn]) -> String {
    turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let text = t.text.replace("\r\n", " ").replace(['\n', '\r'], " ");
            format!("Turn {}: {}: {}", i + 1, t.speaker, text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_annotation_prompt(template: &AnnotationPromptTemplate, c: &Conversation) -> Result<String, TemplateError> {
    if c.turns.is_empty() {
        return Err(TemplateError::NoTurns);
    }
    let skeleton = template.render();
    let found = skeleton.matches(template.placeholder.as_str()).count();
    if found != 1 || template.placeholder.is_empty() {
        return Err(TemplateError::Placeholder { placeholder: template.placeholder.clone(), found });
    }
    Ok(skeleton.replacen(template.placeholder.as_str(), &render_conversation(&c.turns), 1))
}

/// `Turn i: Open-minded, Supportive, Energetic, Neutral` lines.
pub fn render_annotations(labels: &[OrientationLabel]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("Turn {}: {}", i + 1, l.display_names().join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationParseError {
    #[error("n_turns must be at least 1")]
    NoTurnsRequested,
    #[error("turn {turn}: expected 4 keywords, found {found}")]
    KeywordCount { turn: usize, found: usize },
    #[error("turn {turn}: unknown {axis} keyword {token:?}")]
    UnknownKeyword { turn: usize, axis: Axis, token: String },
    #[error("turn {turn}: {token:?} is a {actual} keyword, found in the {expected} position")]
    WrongAxis { turn: usize, expected: Axis, actual: Axis, token: String },
    #[error("turn {turn} annotated more than once")]
    DuplicateTurn { turn: usize },
    #[error("turn {turn} is outside 1..={n_turns}")]
    UnexpectedTurn { turn: usize, n_turns: usize },
    #[error("turn {turn} has no annotation")]
    MissingTurn { turn: usize },
}

/// `Some((index, rest))` for lines of the form `Turn <i>: <rest>`.
fn split_turn_line(line: &str) -> Option<(usize, &str)> {
    let line = line.trim();
    let head = line.get(..4)?;
    if !head.eq_ignore_ascii_case("turn") {
        return None;
    }
    let (num, rest) = line[4..].split_once(':')?;
    let idx = num.trim().parse().ok()?;
    Some((idx, rest))
}

fn parse_tag_line(turn: usize, rest: &str) -> Result<OrientationLabel, AnnotationParseError> {
    let rest = rest.trim();
    let rest = rest.strip_suffix('.').unwrap_or(rest);
    let words: Vec<&str> = rest.split(',').map(str::trim).collect();
    if words.len() != 4 {
        return Err(AnnotationParseError::KeywordCount { turn, found: words.len() });
    }
    OrientationLabel::from_keywords(&words).map_err(|KeywordError { axis, token }| {
        match Axis::owners_of(&token).into_iter().find(|a| *a != axis) {
            Some(actual) => AnnotationParseError::WrongAxis { turn, expected: axis, actual, token },
            None => AnnotationParseError::UnknownKeyword { turn, axis, token },
        }
    })
}

/// Parses a model response into exactly `n_turns` labels. Lines that do not
/// start with `Turn <i>:` are ignored; every tag line must be well formed.
pub fn parse_annotation_response(text: &str, n_turns: usize) -> Result<Vec<OrientationLabel>, AnnotationParseError> {
    if n_turns == 0 {
        return Err(AnnotationParseError::NoTurnsRequested);
    }
    let mut labels: Vec<Option<OrientationLabel>> = vec![None; n_turns];
    for line in text.lines() {
        let Some((turn, rest)) = split_turn_line(line) else { continue };
        if turn == 0 || turn > n_turns {
            return Err(AnnotationParseError::UnexpectedTurn { turn, n_turns });
        }
        let label = parse_tag_line(turn, rest)?;
        if labels[turn - 1].replace(label).is_some() {
            return Err(AnnotationParseError::DuplicateTurn { turn });
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or(AnnotationParseError::MissingTurn { turn: i + 1 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("annotation failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("backend error: {0}")]
    Backend(BackendError),
}

/// Labels every turn of `c`. Parse failures and transport errors are retried
/// up to `max_retries` times; other backend errors fail immediately.
pub fn annotate_conversation<B: AnnotationBackend + ?Sized>(
    backend: &B,
    template: &AnnotationPromptTemplate,
    c: &Conversation,
    max_retries: usize,
) -> Result<Conversation, AnnotationError> {
    let prompt = build_annotation_prompt(template, c)?;
    let attempts = max_retries + 1;
    let mut last = String::new();
    for _ in 0..attempts {
        backend.throttle();
        let reply = match backend.complete(&prompt) {
            Ok(r) => r,
            Err(e) if e.is_retriable() => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(AnnotationError::Backend(e)),
        };
        match parse_annotation_response(&reply, c.turns.len()) {
            Ok(labels) => {
                let mut out = c.clone();
                for (t, l) in out.turns.iter_mut().zip(labels) {
                    t.orientation = Some(l);
                }
                return Ok(out);
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(AnnotationError::Exhausted { attempts, last })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Agree,
    SomewhatAgree,
    Disagree,
    NotApplicable,
}

impl Judgment {
    pub const ALL: [Judgment; 4] = [Judgment::Agree, Judgment::SomewhatAgree, Judgment::Disagree, Judgment::NotApplicable];
}

/// One human judgment of one axis of one annotated turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub conversation_id: String,
    pub turn_index: usize,
    pub axis: Axis,
    pub judgment: Judgment,
    pub annotator_id: String,
}

pub fn read_agreement_csv(path: &Path) -> Result<Vec<AgreementRecord>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

pub fn write_agreement_csv(path: &Path, records: &[AgreementRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JudgmentProportions {
    pub n: usize,
    pub agree: f64,
    pub somewhat_agree: f64,
    pub disagree: f64,
    pub not_applicable: f64,
}

impl JudgmentProportions {
    fn from_counts(counts: &[usize; 4]) -> Self {
        let n: usize = counts.iter().sum();
        let p = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        Self { n, agree: p(counts[0]), somewhat_agree: p(counts[1]), disagree: p(counts[2]), not_applicable: p(counts[3]) }
    }

    pub fn get(&self, j: Judgment) -> f64 {
        match j {
            Judgment::Agree => self.agree,
            Judgment::SomewhatAgree => self.somewhat_agree,
            Judgment::Disagree => self.disagree,
            Judgment::NotApplicable => self.not_applicable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub overall: JudgmentProportions,
    pub per_axis: BTreeMap<Axis, JudgmentProportions>,
}

pub fn agreement_summary(records: &[AgreementRecord]) -> AgreementSummary {
    let slot = |j: Judgment| Judgment::ALL.iter().position(|&x| x == j).expect("listed");
    let mut overall = [0usize; 4];
    let mut per_axis: BTreeMap<Axis, [usize; 4]> = BTreeMap::new();
    for r in records {
        overall[slot(r.judgment)] += 1;
        per_axis.entry(r.axis).or_default()[slot(r.judgment)] += 1;
    }
    AgreementSummary {
        overall: JudgmentProportions::from_counts(&overall),
        per_axis: per_axis.iter().map(|(a, c)| (*a, JudgmentProportions::from_counts(c))).collect(),
    }
}

/// One nominal rating: `annotator` assigned `value` to `item`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NominalRating {
    pub item: String,
    pub annotator: String,
    pub value: String,
}

impl NominalRating {
    pub fn new(item: impl Into<String>, annotator: impl Into<String>, value: impl Into<String>) -> Self {
        Self { item: item.into(), annotator: annotator.into(), value: value.into() }
    }
}

/// Items are `(conversation, turn, axis)`; values are judgments.
pub fn ratings_from_records(records: &[AgreementRecord]) -> Vec<NominalRating> {
    records
        .iter()
        .map(|r| {
            NominalRating::new(
                format!("{}#{}#{}", r.conversation_id, r.turn_index, r.axis),
                r.annotator_id.clone(),
                serde_json::to_value(r.judgment).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlphaError {
    #[error("no item was rated by two or more annotators")]
    NoOverlap,
    #[error("all pairable ratings use a single value; expected disagreement is zero")]
    NoVariation,
}

/// Krippendorff's alpha for nominal data.
///
/// Built from the coincidence matrix: each item rated by `m >= 2` annotators
/// contributes `n_c n_k / (m - 1)` to cell `(c, k)` (and `n_c (n_c - 1) / (m - 1)`
/// to the diagonal). Items with a single rating are not pairable and are
/// ignored. If an annotator rated an item twice, the later rating wins.
pub fn krippendorff_alpha(ratings: &[NominalRating]) -> Result<f64, AlphaError> {
    let mut by_item: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for r in ratings {
        by_item.entry(r.item.as_str()).or_default().insert(r.annotator.as_str(), r.value.as_str());
    }

    let mut diagonal = 0.0;
    let mut marginals: HashMap<&str, f64> = HashMap::new();
    let mut pairable = false;
    for coders in by_item.values() {
        let m = coders.len();
        if m < 2 {
            continue;
        }
        pairable = true;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for v in coders.values() {
            *counts.entry(v).or_insert(0) += 1;
        }
        let w = 1.0 / (m as f64 - 1.0);
        for (v, &c) in &counts {
            diagonal += (c * (c - 1)) as f64 * w;
            // row sum of the coincidence matrix for value v: c * (m - 1) / (m - 1)
            *marginals.entry(v).or_insert(0.0) += c as f64;
        }
    }
    if !pairable {
        return Err(AlphaError::NoOverlap);
    }
    let n: f64 = marginals.values().sum();
    let sum_sq: f64 = marginals.values().map(|x| x * x).sum();
    let expected = n * n - sum_sq;
    if expected <= 0.0 {
        return Err(AlphaError::NoVariation);
    }
    Ok(1.0 - (n - 1.0) * (n - diagonal) / expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixedLabelAnnotator, ScriptedAnnotator};
    use crate::model::{Arousal, Benevolence, Outcome, PoliticalLeaning, Power, Source};

    fn conv(texts: &[&str]) -> Conversation {
        Conversation {
            id: "c".into(),
            source: Source::CgaWiki,
            prefix_len: texts.len() - 1,
            outcome: Outcome::Benign,
            turns: texts.iter().enumerate().map(|(i, t)| Turn::new(format!("u{i}"), *t)).collect(),
        }
    }

    #[test]
    fn default_template_has_one_placeholder_and_four_shots() {
        let t = AnnotationPromptTemplate::default();
        assert_eq!(t.exemplars.len(), 4);
        let text = t.render();
        assert_eq!(text.matches(PLACEHOLDER).count(), 1);
        assert!(text.contains("Conversation 5:\n{Comments to Annotate}\n\nSocial Orientation Tags:\n"));
        assert!(text.contains("Turn 1: Tryptofish: == Good work! =="));
        assert!(text.contains("Annotations:\nTurn 1: Open-minded, Supportive, Energetic, Neutral"));
    }

    #[test]
    fn bundled_template_file_matches_default() {
        let file = include_str!("../templates/orientation_annotation.txt");
        assert_eq!(file, AnnotationPromptTemplate::default().render());
    }

    #[test]
    fn exemplar_annotations_parse() {
        for ex in AnnotationPromptTemplate::default().exemplars {
            let n = ex.conversation.lines().count();
            assert_eq!(parse_annotation_response(&ex.annotations, n).unwrap().len(), n);
        }
    }

    #[test]
    fn prompt_ends_with_target_turns() {
        let t = AnnotationPromptTemplate::default();
        let p = build_annotation_prompt(&t, &conv(&["hello", "line one\nline two"])).unwrap();
        assert!(p.ends_with("Turn 1: u0: hello\nTurn 2: u1: line one line two\n\nSocial Orientation Tags:\n"));
    }

    #[test]
    fn template_placeholder_errors() {
        let c = conv(&["a", "b"]);
        let none = AnnotationPromptTemplate::from_text("no marker here", PLACEHOLDER);
        assert!(matches!(build_annotation_prompt(&none, &c), Err(TemplateError::Placeholder { found: 0, .. })));
        let two = AnnotationPromptTemplate::from_text(format!("{PLACEHOLDER} {PLACEHOLDER}"), PLACEHOLDER);
        assert!(matches!(build_annotation_prompt(&two, &c), Err(TemplateError::Placeholder { found: 2, .. })));
        let one = AnnotationPromptTemplate::from_text(format!("X\n{PLACEHOLDER}\nY"), PLACEHOLDER);
        assert_eq!(build_annotation_prompt(&one, &c).unwrap(), "X\nTurn 1: u0: a\nTurn 2: u1: b\nY");
    }

    #[test]
    fn parses_published_exemplar_line() {
        let l = parse_annotation_response("Turn 1: Open-minded, Supportive, Energetic, Neutral", 1).unwrap();
        assert_eq!(
            l,
            vec![OrientationLabel::new(Power::OpenMinded, Benevolence::Supportive, Arousal::Energetic, PoliticalLeaning::Neutral)]
        );
        let l = parse_annotation_response("Turn 1: Assertive, Confrontational, Energetic, Conservative", 1).unwrap();
        assert_eq!(
            l[0],
            OrientationLabel::new(Power::Assertive, Benevolence::Confrontational, Arousal::Energetic, PoliticalLeaning::Conservative)
        );
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_annotation_response("Turn 1: Happy, Supportive, Energetic, Neutral", 1),
            Err(AnnotationParseError::UnknownKeyword { turn: 1, axis: Axis::Power, token: "Happy".into() })
        );
        assert_eq!(
            parse_annotation_response("Turn 1: Friendly, Supportive, Calm, Neutral", 1),
            Err(AnnotationParseError::WrongAxis { turn: 1, expected: Axis::Power, actual: Axis::Benevolence, token: "Friendly".into() })
        );
        let ok = "Turn 1: Neutral, Neutral, Neutral, Neutral";
        assert_eq!(parse_annotation_response(ok, 2), Err(AnnotationParseError::MissingTurn { turn: 2 }));
        assert_eq!(
            parse_annotation_response(&format!("{ok}\n{ok}"), 1),
            Err(AnnotationParseError::DuplicateTurn { turn: 1 })
        );
        assert_eq!(
            parse_annotation_response("Turn 3: Neutral, Neutral, Neutral, Neutral", 2),
            Err(AnnotationParseError::UnexpectedTurn { turn: 3, n_turns: 2 })
        );
        assert_eq!(
            parse_annotation_response("Turn 1: Neutral, Neutral", 1),
            Err(AnnotationParseError::KeywordCount { turn: 1, found: 2 })
        );
        assert_eq!(parse_annotation_response(ok, 0), Err(AnnotationParseError::NoTurnsRequested));
    }

    #[test]
    fn parse_tolerates_commentary_period_and_case() {
        let text = "Sure, here you go:\n  turn 1: open-minded, SUPPORTIVE, energetic, neutral.  \nHope this helps.";
        assert_eq!(parse_annotation_response(text, 1).unwrap()[0].power, Power::OpenMinded);
    }

    #[test]
    fn annotate_with_fixed_stub() {
        let c = conv(&["a", "b", "c"]);
        let out = annotate_conversation(&FixedLabelAnnotator::neutral(), &AnnotationPromptTemplate::default(), &c, 0).unwrap();
        assert!(out.turns.iter().all(|t| t.orientation == Some(OrientationLabel::neutral())));
    }

    #[test]
    fn annotate_retries_then_succeeds() {
        let c = conv(&["a", "b", "c"]);
        let good = "Turn 1: Neutral, Neutral, Calm, Neutral\nTurn 2: Confident, Friendly, Calm, Liberal\nTurn 3: Neutral, Neutral, Neutral, Neutral";
        let stub = ScriptedAnnotator::new(vec![Ok("garbage".into()), Ok("more garbage".into()), Ok(good.into())]);
        let out = annotate_conversation(&stub, &AnnotationPromptTemplate::default(), &c, 2).unwrap();
        assert_eq!(stub.calls(), 3);
        assert_eq!(out.turns[1].orientation.unwrap().political_leaning, PoliticalLeaning::Liberal);
    }

    #[test]
    fn annotate_exhausts_retries() {
        let c = conv(&["a", "b", "c"]);
        let stub = ScriptedAnnotator::new(vec![Ok("garbage".into())]);
        let err = annotate_conversation(&stub, &AnnotationPromptTemplate::default(), &c, 2).unwrap_err();
        assert_eq!(stub.calls(), 3);
        assert!(matches!(err, AnnotationError::Exhausted { attempts: 3, .. }));
    }

    #[test]
    fn transport_errors_are_retried() {
        let c = conv(&["a", "b"]);
        let good = "Turn 1: Neutral, Neutral, Calm, Neutral\nTurn 2: Neutral, Neutral, Calm, Neutral";
        let stub = ScriptedAnnotator::new(vec![Err(BackendError::Transport("timeout".into())), Ok(good.into())]);
        assert!(annotate_conversation(&stub, &AnnotationPromptTemplate::default(), &c, 1).is_ok());
        let stub = ScriptedAnnotator::new(vec![Err(BackendError::NotTrained)]);
        assert!(matches!(
            annotate_conversation(&stub, &AnnotationPromptTemplate::default(), &c, 5),
            Err(AnnotationError::Backend(_))
        ));
    }

    fn record(axis: Axis, judgment: Judgment) -> AgreementRecord {
        AgreementRecord { conversation_id: "c".into(), turn_index: 1, axis, judgment, annotator_id: "h1".into() }
    }

    #[test]
    fn summary_proportions() {
        let all: Vec<_> = (0..10).map(|_| record(Axis::Power, Judgment::Agree)).collect();
        assert_eq!(agreement_summary(&all).overall.agree, 1.0);
        let mixed: Vec<_> = Judgment::ALL.iter().map(|&j| record(Axis::Arousal, j)).collect();
        let s = agreement_summary(&mixed);
        for j in Judgment::ALL {
            assert_eq!(s.per_axis[&Axis::Arousal].get(j), 0.25);
        }
        let total: f64 = Judgment::ALL.iter().map(|&j| s.overall.get(j)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agree.csv");
        let recs = vec![record(Axis::PoliticalLeaning, Judgment::SomewhatAgree), record(Axis::Power, Judgment::NotApplicable)];
        write_agreement_csv(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("conversation_id,turn_index,axis,judgment,annotator_id\n"));
        assert!(text.contains("c,1,political_leaning,somewhat_agree,h1"));
        assert_eq!(read_agreement_csv(&path).unwrap(), recs);
    }

    #[test]
    fn alpha_perfect_agreement() {
        let mut r = Vec::new();
        for i in 0..10 {
            let v = ["a", "b", "c"][i % 3];
            r.push(NominalRating::new(i.to_string(), "x", v));
            r.push(NominalRating::new(i.to_string(), "y", v));
        }
        assert_eq!(krippendorff_alpha(&r).unwrap(), 1.0);
    }

    #[test]
    fn alpha_reference_reliability_matrix() {
        // Four coders, twelve units, nominal alpha 0.743.
        let rows: [&[Option<u8>]; 4] = [
            &[Some(1), Some(2), Some(3), Some(3), Some(2), Some(1), Some(4), Some(1), Some(2), None, None, None],
            &[Some(1), Some(2), Some(3), Some(3), Some(2), Some(2), Some(4), Some(1), Some(2), Some(5), None, Some(3)],
            &[None, Some(3), Some(3), Some(3), Some(2), Some(3), Some(4), Some(2), Some(2), Some(5), Some(1), None],
            &[Some(1), Some(2), Some(3), Some(3), Some(2), Some(4), Some(4), Some(1), Some(2), Some(5), Some(1), None],
        ];
        let mut r = Vec::new();
        for (coder, row) in rows.iter().enumerate() {
            for (unit, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    r.push(NominalRating::new(unit.to_string(), coder.to_string(), v.to_string()));
                }
            }
        }
        let a = krippendorff_alpha(&r).unwrap();
        assert!((a - 0.743).abs() < 5e-4, "{a}");
    }

    #[test]
    fn alpha_errors() {
        let single = vec![NominalRating::new("1", "x", "a"), NominalRating::new("2", "y", "b")];
        assert_eq!(krippendorff_alpha(&single), Err(AlphaError::NoOverlap));
        let flat = vec![NominalRating::new("1", "x", "a"), NominalRating::new("1", "y", "a")];
        assert_eq!(krippendorff_alpha(&flat), Err(AlphaError::NoVariation));
    }
}
