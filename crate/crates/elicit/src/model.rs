//! Core domain types shared by every other module: questions, model
//! responses, parsed distributions, prediction records, reports, and
//! rewards.
//!
//! All types here are immutable value objects. Invariant-carrying types
//! (questions, distributions, prediction records) keep their fields
//! private and validate on construction, so a violating value cannot be
//! built through the public API, including deserialization.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Canonical text of the "None of the above" candidate.
pub const NOTA_CANONICAL: &str = "none of the above";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("question text must be non-empty")]
    EmptyQuestion,
    #[error("gold answer must be non-empty")]
    EmptyGold,
    #[error("question id must be non-empty")]
    EmptyId,
    #[error("a known answer space needs at least one option")]
    NoOptions,
    #[error("at most 26 options are supported, got {0}")]
    TooManyOptions(usize),
    #[error("gold answer {0:?} does not match any option label")]
    GoldNotAnOption(String),
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("probability {value} for candidate {candidate:?} is outside [0, 1]")]
    InvalidProbability { candidate: String, value: f64 },
    #[error("probabilities sum to {sum}, outside 1 +/- {tolerance}")]
    DistributionSum { sum: f64, tolerance: f64 },
    #[error("candidate {0:?} appears more than once after canonicalization")]
    DuplicateCandidate(String),
    #[error("more than one entry is marked as none-of-the-above")]
    MultipleNota,
    #[error("nota_index {0} does not point at a none-of-the-above entry")]
    BadNotaIndex(usize),
    #[error("a candidate distribution needs at least one entry")]
    EmptyDistribution,
    #[error("token logprob at index {index} is {value}, expected a finite value <= 0")]
    InvalidLogprob { index: usize, value: f64 },
    #[error("token offsets decrease at index {0}")]
    UnorderedOffsets(usize),
    #[error("verb_distrib records must carry a distribution")]
    MissingDistribution,
    #[error("record answer {answer:?} is not the distribution argmax {argmax:?}")]
    AnswerNotArgmax { answer: String, argmax: String },
    #[error("format-error records cannot carry an answer, confidence, or distribution")]
    PayloadOnFormatError,
    #[error("ok records must carry an answer and a confidence")]
    MissingPayload,
    #[error("method top-k requires k >= 2, got {0}")]
    BadTopK(usize),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("unknown failure reason {0:?}")]
    UnknownFailureReason(String),
    #[error("unknown parse status {0:?}")]
    UnknownParseStatus(String),
}

/// Normalizes an answer for comparison: trims surrounding whitespace and
/// punctuation, collapses inner whitespace runs, and lowercases.
///
/// Idempotent: applying it twice gives the same string.
pub fn canonicalize_answer(text: &str) -> String {
    let trimmed = text.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let mut out = String::with_capacity(trimmed.len());
    for word in trimmed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// True when the text canonicalizes to the none-of-the-above marker.
pub fn is_nota(text: &str) -> bool {
    canonicalize_answer(text) == NOTA_CANONICAL
}

/// Comparison key of an answer within a given answer space. In a known
/// space an answer matching an option letter or an option's full text
/// resolves to the lowercased letter; everything else canonicalizes.
pub fn answer_key_in(space: &AnswerSpace, answer: &str) -> String {
    let canonical = canonicalize_answer(answer);
    if let AnswerSpace::Known(options) = space {
        for option in options {
            if canonical == option.label.to_lowercase()
                || canonical == canonicalize_answer(&option.text)
            {
                return option.label.to_lowercase();
            }
        }
    }
    canonical
}

/// One lettered option of a multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

/// The space a question's answer is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub enum AnswerSpace {
    /// Enumerable options with unique letter labels, in presentation order.
    Known(Vec<AnswerOption>),
    /// Free-form answers.
    Open,
}

impl AnswerSpace {
    pub fn is_open(&self) -> bool {
        matches!(self, AnswerSpace::Open)
    }

    pub fn options(&self) -> Option<&[AnswerOption]> {
        match self {
            AnswerSpace::Known(opts) => Some(opts),
            AnswerSpace::Open => None,
        }
    }
}

/// One benchmark item: prompt text, answer space, and the gold answer.
///
/// For a known space the gold is stored as the option letter; for an open
/// space it is free text.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionInstance {
    id: String,
    question: String,
    answer_space: AnswerSpace,
    gold: String,
}

impl QuestionInstance {
    /// Builds a multiple-choice question, assigning letters A, B, ... to
    /// `options` in order. `gold` must name one of the assigned letters.
    pub fn multiple_choice(
        id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        gold: &str,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let question = question.into();
        if id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        if options.is_empty() {
            return Err(ModelError::NoOptions);
        }
        if options.len() > 26 {
            return Err(ModelError::TooManyOptions(options.len()));
        }
        let options: Vec<AnswerOption> = options
            .into_iter()
            .enumerate()
            .map(|(i, text)| AnswerOption {
                label: char::from(b'A' + i as u8).to_string(),
                text,
            })
            .collect();
        let gold_norm = gold.trim().to_uppercase();
        if !options.iter().any(|o| o.label == gold_norm) {
            return Err(ModelError::GoldNotAnOption(gold.to_string()));
        }
        Ok(Self {
            id,
            question,
            answer_space: AnswerSpace::Known(options),
            gold: gold_norm,
        })
    }

    /// Builds an open-ended question with a free-text gold answer.
    pub fn open(
        id: impl Into<String>,
        question: impl Into<String>,
        gold: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let question = question.into();
        let gold = gold.into();
        if id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        if gold.trim().is_empty() {
            return Err(ModelError::EmptyGold);
        }
        Ok(Self {
            id,
            question,
            answer_space: AnswerSpace::Open,
            gold,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn answer_space(&self) -> &AnswerSpace {
        &self.answer_space
    }

    pub fn gold(&self) -> &str {
        &self.gold
    }

    pub fn is_open(&self) -> bool {
        self.answer_space.is_open()
    }

    /// Comparison key of the gold answer: the lowercased option letter for
    /// known spaces, the canonicalized gold text for open ones.
    pub fn gold_key(&self) -> String {
        match &self.answer_space {
            AnswerSpace::Known(_) => self.gold.to_lowercase(),
            AnswerSpace::Open => canonicalize_answer(&self.gold),
        }
    }

    /// Maps an answer to its comparison key. In a known space an answer
    /// matching an option's full text resolves to that option's letter, so
    /// "Paris" and "B" compare equal when B reads "Paris".
    pub fn answer_key(&self, answer: &str) -> String {
        answer_key_in(&self.answer_space, answer)
    }
}

/// Alternative token at one sampled position, with its log-probability.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

/// Log-probability of one generated token, with the character offset of
/// the token in the completion text and the top alternatives at that
/// position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub offset: usize,
    pub top_alternatives: Vec<TokenAlternative>,
}

/// One raw model completion: text, token accounting, and optional
/// per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelResponse {
    raw_text: String,
    token_usage: u64,
    token_logprobs: Option<Vec<TokenLogprob>>,
}

impl ModelResponse {
    pub fn new(
        raw_text: impl Into<String>,
        token_usage: u64,
        token_logprobs: Option<Vec<TokenLogprob>>,
    ) -> Result<Self, ModelError> {
        if let Some(entries) = &token_logprobs {
            let mut last_offset = 0usize;
            for (index, entry) in entries.iter().enumerate() {
                if !entry.logprob.is_finite() || entry.logprob > 0.0 {
                    return Err(ModelError::InvalidLogprob {
                        index,
                        value: entry.logprob,
                    });
                }
                for alt in &entry.top_alternatives {
                    if !alt.logprob.is_finite() || alt.logprob > 0.0 {
                        return Err(ModelError::InvalidLogprob {
                            index,
                            value: alt.logprob,
                        });
                    }
                }
                if entry.offset < last_offset {
                    return Err(ModelError::UnorderedOffsets(index));
                }
                last_offset = entry.offset;
            }
        }
        Ok(Self {
            raw_text: raw_text.into(),
            token_usage,
            token_logprobs,
        })
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn token_usage(&self) -> u64 {
        self.token_usage
    }

    pub fn token_logprobs(&self) -> Option<&[TokenLogprob]> {
        self.token_logprobs.as_deref()
    }
}

/// One candidate answer and the probability assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub candidate: String,
    pub probability: f64,
}

/// An ordered list of (candidate, probability) pairs, optionally marking a
/// "None of the above" entry.
///
/// Two construction modes exist. [`CandidateDistribution::validated`] is
/// the full-distribution form used by the verbalized-distribution parser:
/// entries must be deduplicated, and the probabilities must sum to 1
/// within the given tolerance. [`CandidateDistribution::unconstrained`]
/// carries top-k candidate lists, whose probabilities are independent and
/// need not sum to anything.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateDistribution {
    entries: Vec<CandidateEntry>,
    nota_index: Option<usize>,
}

impl CandidateDistribution {
    fn check_entries(entries: &[CandidateEntry]) -> Result<Option<usize>, ModelError> {
        let mut seen: Vec<String> = Vec::with_capacity(entries.len());
        let mut nota_index = None;
        for (i, entry) in entries.iter().enumerate() {
            if !entry.probability.is_finite() || !(0.0..=1.0).contains(&entry.probability) {
                return Err(ModelError::InvalidProbability {
                    candidate: entry.candidate.clone(),
                    value: entry.probability,
                });
            }
            let canonical = canonicalize_answer(&entry.candidate);
            if seen.contains(&canonical) {
                return Err(ModelError::DuplicateCandidate(entry.candidate.clone()));
            }
            if canonical == NOTA_CANONICAL {
                if nota_index.is_some() {
                    return Err(ModelError::MultipleNota);
                }
                nota_index = Some(i);
            }
            seen.push(canonical);
        }
        Ok(nota_index)
    }

    /// Builds a proper distribution. Entries must already be deduplicated;
    /// their probabilities must sum to 1 within `tolerance`.
    pub fn validated(entries: Vec<CandidateEntry>, tolerance: f64) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyDistribution);
        }
        let nota_index = Self::check_entries(&entries)?;
        let sum: f64 = entries.iter().map(|e| e.probability).sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(ModelError::DistributionSum { sum, tolerance });
        }
        Ok(Self {
            entries,
            nota_index,
        })
    }

    /// Builds a candidate list without a sum constraint (top-k style).
    pub fn unconstrained(entries: Vec<CandidateEntry>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyDistribution);
        }
        let nota_index = Self::check_entries(&entries)?;
        Ok(Self {
            entries,
            nota_index,
        })
    }

    pub fn entries(&self) -> &[CandidateEntry] {
        &self.entries
    }

    pub fn nota_index(&self) -> Option<usize> {
        self.nota_index
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.probability).sum()
    }

    /// Entry with the highest probability; ties go to the earliest entry.
    pub fn argmax(&self) -> &CandidateEntry {
        let mut best = &self.entries[0];
        for entry in &self.entries[1..] {
            if entry.probability > best.probability {
                best = entry;
            }
        }
        best
    }
}

#[derive(Deserialize)]
struct RawCandidateDistribution {
    entries: Vec<CandidateEntry>,
    nota_index: Option<usize>,
}

impl TryFrom<RawCandidateDistribution> for CandidateDistribution {
    type Error = ModelError;

    fn try_from(raw: RawCandidateDistribution) -> Result<Self, ModelError> {
        let dist = CandidateDistribution::unconstrained(raw.entries)?;
        if raw.nota_index != dist.nota_index {
            return Err(ModelError::BadNotaIndex(raw.nota_index.unwrap_or(0)));
        }
        Ok(dist)
    }
}

impl<'de> Deserialize<'de> for CandidateDistribution {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = RawCandidateDistribution::deserialize(deserializer)?;
        CandidateDistribution::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// One of the five confidence elicitation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Product of token probabilities over the final-answer span.
    Logit,
    /// Probability assigned to the token "True" when judging the own answer.
    PTrue,
    /// Verbalized confidence: answer plus a stated confidence value.
    VerbConf,
    /// Verbalized top-k: k guesses, each with a probability; argmax wins.
    VerbTopK { k: usize },
    /// Verbalized probability distribution over the answer space.
    VerbDistrib,
}

impl Method {
    pub const DEFAULT_TOP_K: usize = 2;

    /// True for the methods that read confidences from token logprobs.
    pub fn needs_logprobs(&self) -> bool {
        matches!(self, Method::Logit | Method::PTrue)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Logit => write!(f, "logit"),
            Method::PTrue => write!(f, "ptrue"),
            Method::VerbConf => write!(f, "verb_conf"),
            Method::VerbTopK { k } => write!(f, "verb_topk:{k}"),
            Method::VerbDistrib => write!(f, "verb_distrib"),
        }
    }
}

impl FromStr for Method {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        let s = s.trim();
        let lower = s.to_lowercase();
        match lower.as_str() {
            "logit" => return Ok(Method::Logit),
            "ptrue" | "p_true" => return Ok(Method::PTrue),
            "verb_conf" | "confidence" => return Ok(Method::VerbConf),
            "verb_topk" | "topk" => {
                return Ok(Method::VerbTopK {
                    k: Method::DEFAULT_TOP_K,
                })
            }
            "verb_distrib" | "distribution" | "distrib" => return Ok(Method::VerbDistrib),
            _ => {}
        }
        if let Some(k) = lower
            .strip_prefix("verb_topk:")
            .or_else(|| lower.strip_prefix("topk:"))
        {
            let k: usize = k
                .parse()
                .map_err(|_| ModelError::UnknownMethod(s.to_string()))?;
            if k < 2 {
                return Err(ModelError::BadTopK(k));
            }
            return Ok(Method::VerbTopK { k });
        }
        Err(ModelError::UnknownMethod(s.to_string()))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Why a completion failed to produce a usable prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    /// No parseable JSON object or array in the completion.
    NoJson,
    /// JSON present but not in the requested schema.
    BadSchema,
    /// A confidence or probability outside [0, 1], or a score off-scale.
    OutOfRange,
    /// Distribution probabilities do not sum to 1 within tolerance.
    SumViolation,
    /// A distribution with zero candidates.
    EmptyCandidates,
    /// Open-space distribution without the required none-of-the-above entry.
    MissingNota,
    /// The backend returned no token logprobs.
    MissingLogprobs,
    /// The final-answer marker was absent or not covered by logprobs.
    SpanNotFound,
    /// The client gave up after retries.
    ClientFailure,
}

impl FailureReason {
    pub const ALL: [FailureReason; 9] = [
        FailureReason::NoJson,
        FailureReason::BadSchema,
        FailureReason::OutOfRange,
        FailureReason::SumViolation,
        FailureReason::EmptyCandidates,
        FailureReason::MissingNota,
        FailureReason::MissingLogprobs,
        FailureReason::SpanNotFound,
        FailureReason::ClientFailure,
    ];
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FailureReason::NoJson => "no_json",
            FailureReason::BadSchema => "bad_schema",
            FailureReason::OutOfRange => "out_of_range",
            FailureReason::SumViolation => "sum_violation",
            FailureReason::EmptyCandidates => "empty_candidates",
            FailureReason::MissingNota => "missing_nota",
            FailureReason::MissingLogprobs => "missing_logprobs",
            FailureReason::SpanNotFound => "span_not_found",
            FailureReason::ClientFailure => "client_failure",
        };
        f.write_str(name)
    }
}

impl FromStr for FailureReason {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Ok(match s {
            "no_json" => FailureReason::NoJson,
            "bad_schema" => FailureReason::BadSchema,
            "out_of_range" => FailureReason::OutOfRange,
            "sum_violation" => FailureReason::SumViolation,
            "empty_candidates" => FailureReason::EmptyCandidates,
            "missing_nota" => FailureReason::MissingNota,
            "missing_logprobs" => FailureReason::MissingLogprobs,
            "span_not_found" => FailureReason::SpanNotFound,
            "client_failure" => FailureReason::ClientFailure,
            other => return Err(ModelError::UnknownFailureReason(other.to_string())),
        })
    }
}

/// Outcome of parsing one completion, as recorded on a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseStatus {
    Ok,
    FormatError(FailureReason),
}

impl ParseStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ParseStatus::Ok)
    }
}

impl fmt::Display for ParseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseStatus::Ok => f.write_str("ok"),
            ParseStatus::FormatError(reason) => write!(f, "format_error:{reason}"),
        }
    }
}

impl FromStr for ParseStatus {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        if s == "ok" {
            return Ok(ParseStatus::Ok);
        }
        if let Some(reason) = s.strip_prefix("format_error:") {
            return Ok(ParseStatus::FormatError(reason.parse()?));
        }
        Err(ModelError::UnknownParseStatus(s.to_string()))
    }
}

impl Serialize for ParseStatus {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParseStatus {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How an aggregated record was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Frequency,
    WeightedConfidence,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationMode::Frequency => f.write_str("frequency"),
            AggregationMode::WeightedConfidence => f.write_str("weighted_confidence"),
        }
    }
}

/// Tag attached to records that came out of sample aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationTag {
    pub mode: AggregationMode,
    pub n: usize,
}

/// One scored model response for one question.
///
/// Serializes to a single JSON object (one line of the run log). Optional
/// fields are omitted rather than written as null, so format-error records
/// carry no answer or confidence at all.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    question_id: String,
    method: Method,
    raw_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distribution: Option<CandidateDistribution>,
    token_usage: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    correct: Option<bool>,
    parse_status: ParseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregation: Option<AggregationTag>,
}

impl PredictionRecord {
    /// Builds a successfully parsed record. For `VerbDistrib` the
    /// distribution must be present and `answer` must be its argmax
    /// candidate.
    pub fn parsed(
        question_id: impl Into<String>,
        method: Method,
        raw_text: impl Into<String>,
        answer: impl Into<String>,
        confidence: f64,
        distribution: Option<CandidateDistribution>,
        token_usage: u64,
    ) -> Result<Self, ModelError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(ModelError::InvalidConfidence(confidence));
        }
        let answer = answer.into();
        if method == Method::VerbDistrib {
            let dist = distribution
                .as_ref()
                .ok_or(ModelError::MissingDistribution)?;
            let argmax = dist.argmax();
            if argmax.candidate != answer {
                return Err(ModelError::AnswerNotArgmax {
                    answer,
                    argmax: argmax.candidate.clone(),
                });
            }
        }
        Ok(Self {
            question_id: question_id.into(),
            method,
            raw_text: raw_text.into(),
            answer: Some(answer),
            confidence: Some(confidence),
            distribution,
            token_usage,
            correct: None,
            parse_status: ParseStatus::Ok,
            aggregation: None,
        })
    }

    /// Builds a record produced by sample aggregation. Aggregated records
    /// collapse to a single answer/confidence pair, so a distribution
    /// method carries no candidate list here.
    pub fn aggregated(
        question_id: impl Into<String>,
        method: Method,
        answer: impl Into<String>,
        confidence: f64,
        token_usage: u64,
        tag: AggregationTag,
    ) -> Result<Self, ModelError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(ModelError::InvalidConfidence(confidence));
        }
        Ok(Self {
            question_id: question_id.into(),
            method,
            raw_text: String::new(),
            answer: Some(answer.into()),
            confidence: Some(confidence),
            distribution: None,
            token_usage,
            correct: None,
            parse_status: ParseStatus::Ok,
            aggregation: Some(tag),
        })
    }

    /// Builds a record for a completion that failed format validation.
    pub fn format_error(
        question_id: impl Into<String>,
        method: Method,
        raw_text: impl Into<String>,
        reason: FailureReason,
        token_usage: u64,
    ) -> Self {
        Self {
            question_id: question_id.into(),
            method,
            raw_text: raw_text.into(),
            answer: None,
            confidence: None,
            distribution: None,
            token_usage,
            correct: None,
            parse_status: ParseStatus::FormatError(reason),
            aggregation: None,
        }
    }

    pub fn with_correct(mut self, correct: bool) -> Self {
        self.correct = Some(correct);
        self
    }

    pub fn set_correct(&mut self, correct: Option<bool>) {
        self.correct = correct;
    }

    pub fn with_aggregation(mut self, tag: AggregationTag) -> Self {
        self.aggregation = Some(tag);
        self
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn answer(&self) -> Option<&str> {
        self.answer.as_deref()
    }

    pub fn confidence(&self) -> Option<f64> {
        self.confidence
    }

    pub fn distribution(&self) -> Option<&CandidateDistribution> {
        self.distribution.as_ref()
    }

    pub fn token_usage(&self) -> u64 {
        self.token_usage
    }

    pub fn correct(&self) -> Option<bool> {
        self.correct
    }

    pub fn parse_status(&self) -> ParseStatus {
        self.parse_status
    }

    pub fn aggregation(&self) -> Option<AggregationTag> {
        self.aggregation
    }

    pub fn is_ok(&self) -> bool {
        self.parse_status.is_ok()
    }
}

#[derive(Deserialize)]
struct RawPredictionRecord {
    question_id: String,
    method: Method,
    raw_text: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    distribution: Option<CandidateDistribution>,
    token_usage: u64,
    #[serde(default)]
    correct: Option<bool>,
    parse_status: ParseStatus,
    #[serde(default)]
    aggregation: Option<AggregationTag>,
}

impl TryFrom<RawPredictionRecord> for PredictionRecord {
    type Error = ModelError;

    fn try_from(raw: RawPredictionRecord) -> Result<Self, ModelError> {
        let record = match raw.parse_status {
            ParseStatus::Ok => {
                let answer = raw.answer.ok_or(ModelError::MissingPayload)?;
                let confidence = raw.confidence.ok_or(ModelError::MissingPayload)?;
                match raw.aggregation {
                    Some(tag) => PredictionRecord::aggregated(
                        raw.question_id,
                        raw.method,
                        answer,
                        confidence,
                        raw.token_usage,
                        tag,
                    )?,
                    None => PredictionRecord::parsed(
                        raw.question_id,
                        raw.method,
                        raw.raw_text,
                        answer,
                        confidence,
                        raw.distribution,
                        raw.token_usage,
                    )?,
                }
            }
            ParseStatus::FormatError(reason) => {
                if raw.answer.is_some() || raw.confidence.is_some() || raw.distribution.is_some() {
                    return Err(ModelError::PayloadOnFormatError);
                }
                PredictionRecord::format_error(
                    raw.question_id,
                    raw.method,
                    raw.raw_text,
                    reason,
                    raw.token_usage,
                )
            }
        };
        let mut record = record;
        record.correct = raw.correct;
        record.aggregation = raw.aggregation;
        Ok(record)
    }
}

impl<'de> Deserialize<'de> for PredictionRecord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawPredictionRecord::deserialize(deserializer)?;
        PredictionRecord::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// One row of a reliability diagram: the bin bounds, how many scored
/// records landed in it, and their mean confidence and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Metric suite for one (model, method, dataset) cell.
///
/// `n` counts every record considered. Format-error records count as
/// incorrect for `accuracy` but carry no confidence, so they are excluded
/// from AUROC/ECE/Brier and from the calibration bins; `format_errors`
/// reports how many were excluded. Bin counts therefore sum to
/// `n - format_errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub brier: f64,
    pub ece: f64,
    pub multi_brier: Option<f64>,
    pub calibration_bins: Vec<CalibrationBin>,
    pub mean_tokens: f64,
    pub format_errors: usize,
    pub nota_answers: usize,
}

/// Scalar reward plus the flags that produced it.
///
/// `format_ok == false` forces `reward == -1`; otherwise the reward is
/// `y - (confidence - y)^2` with `y = correct as 0/1`, and `correct` is
/// meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub reward: f64,
    pub format_ok: bool,
    pub correct: bool,
}

/// Scores on the three reasoning-quality axes, each in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScores {
    pub evidential_strength: u8,
    pub uncertainty_awareness: u8,
    pub logical_calibration: u8,
}

/// Anonymized slot the rubric judge sees a reasoning trace under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RubricLabel {
    A,
    B,
    C,
}

impl RubricLabel {
    pub const ALL: [RubricLabel; 3] = [RubricLabel::A, RubricLabel::B, RubricLabel::C];

    pub fn title(&self) -> &'static str {
        match self {
            RubricLabel::A => "Method A",
            RubricLabel::B => "Method B",
            RubricLabel::C => "Method C",
        }
    }
}

/// Map from rubric label to scores, as returned by the rubric parser.
pub type RubricReply = BTreeMap<RubricLabel, RubricScores>;
