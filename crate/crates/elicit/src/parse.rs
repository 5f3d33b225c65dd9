//! Extraction of answers, confidences, and candidate distributions from
//! raw completions, plus the logprob-based confidence readers and the
//! judge/rubric reply parsers.
//!
//! The JSON parsers never panic and always classify a completion as
//! either `Ok` or a `FormatError` with a specific reason. Repair is
//! deliberately minimal: fenced or prose-wrapped JSON is found by
//! scanning for balanced values, the last parseable top-level value wins,
//! and nothing else is fixed up.

use crate::model::{
    answer_key_in, canonicalize_answer, AnswerSpace, CandidateDistribution, CandidateEntry,
    FailureReason, Method, ModelError, ModelResponse, PredictionRecord, RubricLabel, RubricReply,
    RubricScores, NOTA_CANONICAL,
};
use serde_json::Value;
use std::ops::Range;
use thiserror::Error;

/// How far a distribution's probability mass may stray from 1 before the
/// completion is a format error. Within the tolerance the probabilities
/// are renormalized to sum to exactly 1. The same tolerance applies when
/// rewards validate distributions during RL scoring.
pub const DEFAULT_SUM_TOLERANCE: f64 = 0.05;

/// Marker line the chain-of-thought answer prompts ask for.
pub const FINAL_ANSWER_MARKER: &str = "final answer:";

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("completion carries no usable token logprobs")]
    MissingLogprobs,
    #[error("no final-answer span could be matched against the logprob stream")]
    SpanNotFound,
    #[error("judge reply is neither yes nor no: {0:?}")]
    UnparseableVerdict(String),
    #[error("malformed reply: {0}")]
    Format(FailureReason),
}

/// A successfully parsed prediction: the chosen answer, its confidence,
/// and (for top-k and distribution methods) the full candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrediction {
    pub answer: String,
    pub confidence: f64,
    pub distribution: Option<CandidateDistribution>,
}

/// Parse result for one completion: exactly one of a payload or a
/// format-error reason.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    Ok(ParsedPrediction),
    FormatError(FailureReason),
}

impl ParseOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, ParseOutcome::Ok(_))
    }

    pub fn payload(&self) -> Option<&ParsedPrediction> {
        match self {
            ParseOutcome::Ok(p) => Some(p),
            ParseOutcome::FormatError(_) => None,
        }
    }

    /// Folds the outcome into a prediction record.
    pub fn into_record(
        self,
        question_id: &str,
        method: Method,
        raw_text: &str,
        token_usage: u64,
    ) -> Result<PredictionRecord, ModelError> {
        match self {
            ParseOutcome::Ok(p) => PredictionRecord::parsed(
                question_id,
                method,
                raw_text,
                p.answer,
                p.confidence,
                p.distribution,
                token_usage,
            ),
            ParseOutcome::FormatError(reason) => Ok(PredictionRecord::format_error(
                question_id,
                method,
                raw_text,
                reason,
                token_usage,
            )),
        }
    }
}

/// Scans for a balanced JSON value starting at `start` (which must index
/// a `{` or `[`). Returns the exclusive end offset, honoring strings and
/// escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escape = false;
    for (i, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escape {
                escape = false;
            } else {
                match b {
                    b'\\' => escape = true,
                    b'"' => in_string = false,
                    _ => {}
                }
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.last() == Some(&b) {
                    stack.pop();
                    if stack.is_empty() {
                        return Some(start + i + 1);
                    }
                } else {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

/// Returns the last top-level JSON object or array in the text, tolerating
/// code fences and surrounding prose. Prompts put the JSON at the end, so
/// the last value is the final answer even when the reasoning contains
/// earlier JSON fragments.
pub fn extract_json(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut cursor = 0usize;
    let mut last: Option<Value> = None;
    while cursor < bytes.len() {
        let Some(rel) = bytes[cursor..]
            .iter()
            .position(|&b| b == b'{' || b == b'[')
        else {
            break;
        };
        let opener = cursor + rel;
        match balanced_end(bytes, opener) {
            Some(end) => match serde_json::from_str::<Value>(&text[opener..end]) {
                Ok(value) => {
                    last = Some(value);
                    cursor = end;
                }
                Err(_) => cursor = opener + 1,
            },
            None => cursor = opener + 1,
        }
    }
    last
}

fn number_like(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
}

fn text_like(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Candidate text under either the open-space key (`candidate`) or the
/// known-space key (`option`).
fn candidate_text(obj: &serde_json::Map<String, Value>) -> Option<String> {
    obj.get("candidate")
        .or_else(|| obj.get("option"))
        .and_then(text_like)
}

/// Parses a `{"final_answer": ..., "confidence": ...}` reply. The
/// confidence may come as a number or a numeric string.
pub fn parse_verbalized_confidence(raw_text: &str) -> ParseOutcome {
    let value = match extract_json(raw_text) {
        Some(v) => v,
        None => return ParseOutcome::FormatError(FailureReason::NoJson),
    };
    let obj = match value.as_object() {
        Some(o) => o,
        None => return ParseOutcome::FormatError(FailureReason::BadSchema),
    };
    let answer = match obj.get("final_answer").and_then(text_like) {
        Some(a) => a,
        None => return ParseOutcome::FormatError(FailureReason::BadSchema),
    };
    let confidence = match obj.get("confidence").and_then(number_like) {
        Some(c) => c,
        None => return ParseOutcome::FormatError(FailureReason::BadSchema),
    };
    if !(0.0..=1.0).contains(&confidence) {
        return ParseOutcome::FormatError(FailureReason::OutOfRange);
    }
    ParseOutcome::Ok(ParsedPrediction {
        answer,
        confidence,
        distribution: None,
    })
}

fn parse_candidate_array(value: &Value) -> Result<Vec<CandidateEntry>, FailureReason> {
    let arr = value.as_array().ok_or(FailureReason::BadSchema)?;
    let mut entries = Vec::with_capacity(arr.len());
    for item in arr {
        let obj = item.as_object().ok_or(FailureReason::BadSchema)?;
        let candidate = candidate_text(obj).ok_or(FailureReason::BadSchema)?;
        let probability = obj
            .get("confidence")
            .and_then(number_like)
            .ok_or(FailureReason::BadSchema)?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(FailureReason::OutOfRange);
        }
        entries.push(CandidateEntry {
            candidate,
            probability,
        });
    }
    Ok(entries)
}

/// Parses a top-k guess array. The answer is the candidate with maximal
/// confidence (ties break toward the earliest entry); the confidences of
/// different guesses are independent, so no sum constraint applies.
///
/// `k` is the number of guesses the prompt requested. Models sometimes
/// return more; anything with at least two entries is accepted. Repeated
/// candidates are collapsed to their highest confidence.
pub fn parse_topk(raw_text: &str, k: usize) -> ParseOutcome {
    debug_assert!(k >= 2, "top-k requires k >= 2");
    let value = match extract_json(raw_text) {
        Some(v) => v,
        None => return ParseOutcome::FormatError(FailureReason::NoJson),
    };
    let entries = match parse_candidate_array(&value) {
        Ok(e) => e,
        Err(reason) => return ParseOutcome::FormatError(reason),
    };
    if entries.len() < 2 {
        return ParseOutcome::FormatError(FailureReason::BadSchema);
    }
    // collapse duplicates, keeping first position and maximal confidence
    let mut merged: Vec<CandidateEntry> = Vec::with_capacity(entries.len());
    let mut keys: Vec<String> = Vec::with_capacity(entries.len());
    for entry in entries {
        let key = canonicalize_answer(&entry.candidate);
        match keys.iter().position(|k| *k == key) {
            Some(i) => {
                if entry.probability > merged[i].probability {
                    merged[i].probability = entry.probability;
                }
            }
            None => {
                keys.push(key);
                merged.push(entry);
            }
        }
    }
    let best = merged
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.probability
                .partial_cmp(&b.probability)
                .unwrap()
                .then(ib.cmp(ia))
        })
        .map(|(_, e)| e.clone())
        .expect("at least two entries");
    let distribution = match CandidateDistribution::unconstrained(merged) {
        Ok(d) => d,
        Err(_) => return ParseOutcome::FormatError(FailureReason::BadSchema),
    };
    ParseOutcome::Ok(ParsedPrediction {
        answer: best.candidate,
        confidence: best.probability,
        distribution: Some(distribution),
    })
}

/// Parses a verbalized probability distribution.
///
/// Candidates are deduplicated by comparison key (probabilities of
/// duplicates are summed); open spaces must include a "None of the above"
/// entry, while known spaces may only name option letters or option
/// texts. If the total mass is within `tolerance` of 1 the probabilities
/// are renormalized to sum to exactly 1; otherwise the completion is a
/// `SumViolation`. The answer is the argmax candidate after
/// renormalization, ties toward the earliest entry.
pub fn parse_distribution(
    raw_text: &str,
    answer_space: &AnswerSpace,
    tolerance: f64,
) -> ParseOutcome {
    let value = match extract_json(raw_text) {
        Some(v) => v,
        None => return ParseOutcome::FormatError(FailureReason::NoJson),
    };
    if value.as_array().map(|a| a.is_empty()) == Some(true) {
        return ParseOutcome::FormatError(FailureReason::EmptyCandidates);
    }
    let entries = match parse_candidate_array(&value) {
        Ok(e) => e,
        Err(reason) => return ParseOutcome::FormatError(reason),
    };

    // dedup by key, summing probability mass and keeping the first text
    let mut merged: Vec<CandidateEntry> = Vec::with_capacity(entries.len());
    let mut keys: Vec<String> = Vec::with_capacity(entries.len());
    for entry in entries {
        let key = answer_key_in(answer_space, &entry.candidate);
        match keys.iter().position(|k| *k == key) {
            Some(i) => merged[i].probability += entry.probability,
            None => {
                keys.push(key);
                merged.push(entry);
            }
        }
    }

    match answer_space {
        AnswerSpace::Open => {
            if !keys.iter().any(|k| k == NOTA_CANONICAL) {
                return ParseOutcome::FormatError(FailureReason::MissingNota);
            }
        }
        AnswerSpace::Known(options) => {
            let valid: Vec<String> = options.iter().map(|o| o.label.to_lowercase()).collect();
            if keys.iter().any(|k| !valid.contains(k)) {
                return ParseOutcome::FormatError(FailureReason::BadSchema);
            }
        }
    }

    let sum: f64 = merged.iter().map(|e| e.probability).sum();
    if !sum.is_finite() || (sum - 1.0).abs() > tolerance {
        return ParseOutcome::FormatError(FailureReason::SumViolation);
    }
    for entry in &mut merged {
        entry.probability /= sum;
    }
    let distribution = match CandidateDistribution::validated(merged, tolerance) {
        Ok(d) => d,
        Err(_) => return ParseOutcome::FormatError(FailureReason::BadSchema),
    };
    let argmax = distribution.argmax();
    ParseOutcome::Ok(ParsedPrediction {
        answer: argmax.candidate.clone(),
        confidence: argmax.probability,
        distribution: Some(distribution),
    })
}

/// Probability mass the model put on answering "True", summed over the
/// first generated token's alternatives whose text, case-folded and
/// trimmed, equals "true". Clamped to [0, 1].
pub fn parse_ptrue_logprobs(response: &ModelResponse) -> Result<f64, ParseError> {
    let logprobs = response
        .token_logprobs()
        .filter(|l| !l.is_empty())
        .ok_or(ParseError::MissingLogprobs)?;
    let alternatives = &logprobs[0].top_alternatives;
    if alternatives.is_empty() {
        return Err(ParseError::MissingLogprobs);
    }
    let mass: f64 = alternatives
        .iter()
        .filter(|alt| alt.token.trim().to_lowercase() == "true")
        .map(|alt| alt.logprob.exp())
        .sum();
    Ok(mass.clamp(0.0, 1.0))
}

/// Locates the answer text after the last (case-insensitive) occurrence
/// of the final-answer marker: the byte range of the trimmed answer on
/// that line. Returns `None` when the marker is absent or the answer is
/// empty.
pub fn final_answer_span(text: &str) -> Option<(Range<usize>, &str)> {
    let bytes = text.as_bytes();
    let marker = FINAL_ANSWER_MARKER.as_bytes();
    if bytes.len() < marker.len() {
        return None;
    }
    let mut marker_end = None;
    for i in 0..=bytes.len() - marker.len() {
        if bytes[i..i + marker.len()].eq_ignore_ascii_case(marker) {
            marker_end = Some(i + marker.len());
        }
    }
    let after = marker_end?;
    let line_end = text[after..]
        .find('\n')
        .map(|i| after + i)
        .unwrap_or(text.len());
    let line = &text[after..line_end];
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return None;
    }
    let start = after + (trimmed.as_ptr() as usize - line.as_ptr() as usize);
    Some((start..start + trimmed.len(), trimmed))
}

/// Confidence of the final answer as the product of its tokens'
/// probabilities: `exp` of the summed logprobs over every token whose
/// character extent intersects `answer_span`.
pub fn parse_logit_confidence(
    response: &ModelResponse,
    answer_span: Range<usize>,
) -> Result<f64, ParseError> {
    let logprobs = response
        .token_logprobs()
        .filter(|l| !l.is_empty())
        .ok_or(ParseError::MissingLogprobs)?;
    let mut sum = 0.0;
    let mut intersected = false;
    for entry in logprobs {
        let start = entry.offset;
        let end = entry.offset + entry.token.len();
        if start < answer_span.end && end > answer_span.start {
            sum += entry.logprob;
            intersected = true;
        }
    }
    if !intersected {
        return Err(ParseError::SpanNotFound);
    }
    Ok(sum.exp())
}

/// Reads a yes/no verdict: a case-insensitive leading "yes" or "no" word,
/// ignoring leading quotes or markdown.
pub fn parse_judge_reply(raw_text: &str) -> Result<bool, ParseError> {
    let stripped = raw_text.trim_start_matches(|c: char| !c.is_alphanumeric());
    let word: String = stripped
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    if word.eq_ignore_ascii_case("yes") {
        Ok(true)
    } else if word.eq_ignore_ascii_case("no") {
        Ok(false)
    } else {
        let snippet: String = raw_text.chars().take(80).collect();
        Err(ParseError::UnparseableVerdict(snippet))
    }
}

fn integer_score(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Some(i)
            } else {
                n.as_f64()
                    .filter(|f| f.fract() == 0.0)
                    .map(|f| f as i64)
            }
        }
        Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    }
}

/// Parses the rubric judge's score dictionary: all nine scores must be
/// present and integers in 1..=5.
pub fn parse_rubric_reply(raw_text: &str) -> Result<RubricReply, ParseError> {
    let value = extract_json(raw_text).ok_or(ParseError::Format(FailureReason::NoJson))?;
    let obj = value
        .as_object()
        .ok_or(ParseError::Format(FailureReason::BadSchema))?;
    let mut reply = RubricReply::new();
    for label in RubricLabel::ALL {
        let section = obj
            .get(label.title())
            .and_then(Value::as_object)
            .ok_or(ParseError::Format(FailureReason::BadSchema))?;
        let mut scores = [0u8; 3];
        for (slot, key) in [
            "Evidential Strength",
            "Uncertainty Awareness",
            "Logical Calibration",
        ]
        .iter()
        .enumerate()
        {
            let raw = section
                .get(*key)
                .and_then(integer_score)
                .ok_or(ParseError::Format(FailureReason::BadSchema))?;
            if !(1..=5).contains(&raw) {
                return Err(ParseError::Format(FailureReason::OutOfRange));
            }
            scores[slot] = raw as u8;
        }
        reply.insert(
            label,
            RubricScores {
                evidential_strength: scores[0],
                uncertainty_awareness: scores[1],
                logical_calibration: scores[2],
            },
        );
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{QuestionInstance, TokenAlternative, TokenLogprob};
    use proptest::prelude::*;

    fn open_space() -> AnswerSpace {
        AnswerSpace::Open
    }

    fn known_space(n: usize) -> AnswerSpace {
        let options = (0..n).map(|i| format!("text {i}")).collect();
        QuestionInstance::multiple_choice("q", "pick", options, "A")
            .unwrap()
            .answer_space()
            .clone()
    }

    #[test]
    fn extract_json_finds_fenced_and_last_value() {
        let fenced = "blah ```json\n{\"final_answer\":\"B\",\"confidence\":0.7}\n```";
        let value = extract_json(fenced).unwrap();
        assert_eq!(value["final_answer"], "B");

        assert!(extract_json("no structure here").is_none());

        let two = "{\"a\": 1} and later {\"b\": 2}";
        assert_eq!(extract_json(two).unwrap()["b"], 2);

        // nested objects are one top-level value
        let nested = "{\"outer\": {\"inner\": 1}}";
        assert_eq!(extract_json(nested).unwrap()["outer"]["inner"], 1);

        // a broken opener does not hide a later valid value
        let broken = "{ not json {\"x\": 1}";
        assert_eq!(extract_json(broken).unwrap()["x"], 1);

        // brackets inside strings do not confuse the scanner
        let tricky = r#"{"text": "a } in a string", "n": 3}"#;
        assert_eq!(extract_json(tricky).unwrap()["n"], 3);
    }

    #[test]
    fn verbalized_confidence_examples() {
        let ok = parse_verbalized_confidence(r#"{"final_answer":"B","confidence":"0.7"}"#);
        match ok {
            ParseOutcome::Ok(p) => {
                assert_eq!(p.answer, "B");
                assert!((p.confidence - 0.7).abs() < 1e-12);
                assert!(p.distribution.is_none());
            }
            other => panic!("expected ok, got {other:?}"),
        }

        assert_eq!(
            parse_verbalized_confidence(r#"{"final_answer":"B","confidence":1.4}"#),
            ParseOutcome::FormatError(FailureReason::OutOfRange)
        );
        assert_eq!(
            parse_verbalized_confidence(r#"{"answer":"B"}"#),
            ParseOutcome::FormatError(FailureReason::BadSchema)
        );
        assert_eq!(
            parse_verbalized_confidence("nothing here"),
            ParseOutcome::FormatError(FailureReason::NoJson)
        );
    }

    #[test]
    fn topk_examples() {
        let raw = r#"[{"candidate":"paris","confidence":0.8},{"candidate":"lyon","confidence":0.3}]"#;
        match parse_topk(raw, 2) {
            ParseOutcome::Ok(p) => {
                assert_eq!(p.answer, "paris");
                assert!((p.confidence - 0.8).abs() < 1e-12);
                assert_eq!(p.distribution.unwrap().entries().len(), 2);
            }
            other => panic!("{other:?}"),
        }

        // tie goes to the first entry
        let tie = r#"[{"candidate":"a","confidence":0.5},{"candidate":"b","confidence":0.5}]"#;
        match parse_topk(tie, 2) {
            ParseOutcome::Ok(p) => assert_eq!(p.answer, "a"),
            other => panic!("{other:?}"),
        }

        assert_eq!(
            parse_topk(r#"[{"candidate":"a","confidence":0.5}]"#, 2),
            ParseOutcome::FormatError(FailureReason::BadSchema)
        );
        assert_eq!(
            parse_topk(
                r#"[{"candidate":"a","confidence":1.5},{"candidate":"b","confidence":0.5}]"#,
                2
            ),
            ParseOutcome::FormatError(FailureReason::OutOfRange)
        );
    }

    #[test]
    fn distribution_well_formed_open() {
        let raw = r#"[
            {"candidate":"paris","confidence":0.6},
            {"candidate":"lyon","confidence":0.3},
            {"candidate":"None of the above","confidence":0.1}
        ]"#;
        match parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => {
                assert_eq!(p.answer, "paris");
                assert!((p.confidence - 0.6).abs() < 1e-9);
                let dist = p.distribution.unwrap();
                assert_eq!(dist.nota_index(), Some(2));
                assert!((dist.sum() - 1.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distribution_sum_violation() {
        let raw = r#"[
            {"candidate":"a","confidence":0.9},
            {"candidate":"None of the above","confidence":0.25}
        ]"#;
        assert_eq!(
            parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE),
            ParseOutcome::FormatError(FailureReason::SumViolation)
        );
    }

    #[test]
    fn distribution_within_tolerance_renormalizes() {
        let raw = r#"[
            {"candidate":"a","confidence":0.62},
            {"candidate":"None of the above","confidence":0.42}
        ]"#;
        match parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => {
                assert!((p.confidence - 0.62 / 1.04).abs() < 1e-12);
                assert!((p.distribution.unwrap().sum() - 1.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distribution_nine_option_case() {
        // a nine-option multiple-choice reply using the "option" key
        let raw = r#"Final Answer:
[
  {"option": "A", "confidence": "0.02"},
  {"option": "B", "confidence": "0.05"},
  {"option": "C", "confidence": "0.02"},
  {"option": "D", "confidence": "0.02"},
  {"option": "E", "confidence": "0.15"},
  {"option": "F", "confidence": "0.02"},
  {"option": "G", "confidence": "0.02"},
  {"option": "H", "confidence": "0.10"},
  {"option": "I", "confidence": "0.60"}
]"#;
        match parse_distribution(raw, &known_space(9), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => {
                assert_eq!(p.answer, "I");
                assert!((p.confidence - 0.60).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distribution_space_validation() {
        // open space without the none-of-the-above entry
        let raw = r#"[{"candidate":"a","confidence":0.5},{"candidate":"b","confidence":0.5}]"#;
        assert_eq!(
            parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE),
            ParseOutcome::FormatError(FailureReason::MissingNota)
        );

        // known space with a candidate that is no option
        let raw = r#"[{"option":"A","confidence":0.5},{"option":"Z","confidence":0.5}]"#;
        assert_eq!(
            parse_distribution(raw, &known_space(3), DEFAULT_SUM_TOLERANCE),
            ParseOutcome::FormatError(FailureReason::BadSchema)
        );

        // option text is as valid as its letter
        let raw = r#"[{"option":"text 0","confidence":0.7},{"option":"B","confidence":0.3}]"#;
        match parse_distribution(raw, &known_space(3), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => assert_eq!(p.answer, "text 0"),
            other => panic!("{other:?}"),
        }

        assert_eq!(
            parse_distribution("[]", &open_space(), DEFAULT_SUM_TOLERANCE),
            ParseOutcome::FormatError(FailureReason::EmptyCandidates)
        );
    }

    #[test]
    fn distribution_duplicates_merge_by_mass() {
        let raw = r#"[
            {"candidate":"Paris","confidence":0.3},
            {"candidate":"paris.","confidence":0.4},
            {"candidate":"None of the above","confidence":0.3}
        ]"#;
        match parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => {
                assert_eq!(p.answer, "Paris");
                assert!((p.confidence - 0.7).abs() < 1e-9);
                assert_eq!(p.distribution.unwrap().entries().len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nota_can_win_the_argmax() {
        let raw = r#"[
            {"candidate":"maybe","confidence":0.2},
            {"candidate":"None of the above","confidence":0.8}
        ]"#;
        match parse_distribution(raw, &open_space(), DEFAULT_SUM_TOLERANCE) {
            ParseOutcome::Ok(p) => assert_eq!(p.answer, "None of the above"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ptrue_logprob_mass() {
        let response = ModelResponse::new(
            "True",
            1,
            Some(vec![TokenLogprob {
                token: "True".into(),
                logprob: 0.9f64.ln(),
                offset: 0,
                top_alternatives: vec![
                    TokenAlternative {
                        token: "True".into(),
                        logprob: 0.9f64.ln(),
                    },
                    TokenAlternative {
                        token: " true".into(),
                        logprob: 0.05f64.ln(),
                    },
                    TokenAlternative {
                        token: "False".into(),
                        logprob: 0.05f64.ln(),
                    },
                ],
            }]),
        )
        .unwrap();
        let conf = parse_ptrue_logprobs(&response).unwrap();
        assert!((conf - 0.95).abs() < 1e-12);

        let no_true = ModelResponse::new(
            "False",
            1,
            Some(vec![TokenLogprob {
                token: "False".into(),
                logprob: -0.01,
                offset: 0,
                top_alternatives: vec![TokenAlternative {
                    token: "False".into(),
                    logprob: -0.01,
                }],
            }]),
        )
        .unwrap();
        assert_eq!(parse_ptrue_logprobs(&no_true).unwrap(), 0.0);

        let bare = ModelResponse::new("x", 1, None).unwrap();
        assert_eq!(
            parse_ptrue_logprobs(&bare),
            Err(ParseError::MissingLogprobs)
        );
    }

    #[test]
    fn logit_confidence_is_token_probability_product() {
        let text = "Final answer: Paris";
        let (span, answer) = final_answer_span(text).unwrap();
        assert_eq!(answer, "Paris");
        let response = ModelResponse::new(
            text,
            4,
            Some(vec![
                TokenLogprob {
                    token: "Final answer:".into(),
                    logprob: -0.5,
                    offset: 0,
                    top_alternatives: vec![],
                },
                TokenLogprob {
                    token: " Pa".into(),
                    logprob: 0.8f64.ln(),
                    offset: 13,
                    top_alternatives: vec![],
                },
                TokenLogprob {
                    token: "ris".into(),
                    logprob: 0.9f64.ln(),
                    offset: 16,
                    top_alternatives: vec![],
                },
            ]),
        )
        .unwrap();
        let conf = parse_logit_confidence(&response, span).unwrap();
        assert!((conf - 0.72).abs() < 1e-12);
    }

    #[test]
    fn logit_single_certain_token() {
        let text = "Final answer: B";
        let (span, _) = final_answer_span(text).unwrap();
        let response = ModelResponse::new(
            text,
            1,
            Some(vec![TokenLogprob {
                token: "B".into(),
                logprob: 0.0,
                offset: 14,
                top_alternatives: vec![],
            }]),
        )
        .unwrap();
        assert_eq!(parse_logit_confidence(&response, span).unwrap(), 1.0);
    }

    #[test]
    fn final_answer_marker_rules() {
        assert!(final_answer_span("no marker at all").is_none());
        assert!(final_answer_span("Final answer:   \n").is_none());

        // last occurrence wins, case-insensitively
        let text = "final answer: draft\nmore text\nFINAL ANSWER: Paris  ";
        let (_, answer) = final_answer_span(text).unwrap();
        assert_eq!(answer, "Paris");
    }

    #[test]
    fn judge_reply_rules() {
        assert_eq!(parse_judge_reply("Yes").unwrap(), true);
        assert_eq!(parse_judge_reply("no.").unwrap(), false);
        assert_eq!(parse_judge_reply("  \"YES\", definitely").unwrap(), true);
        assert!(parse_judge_reply("maybe").is_err());
        assert!(parse_judge_reply("none of these").is_err());
        assert!(parse_judge_reply("").is_err());
    }

    #[test]
    fn rubric_reply_examples() {
        let raw = r#"{
            "Method A": {"Evidential Strength": 4, "Uncertainty Awareness": 2, "Logical Calibration": 2},
            "Method B": {"Evidential Strength": 4, "Uncertainty Awareness": 3, "Logical Calibration": 2},
            "Method C": {"Evidential Strength": 5, "Uncertainty Awareness": 3, "Logical Calibration": 3}
        }"#;
        let reply = parse_rubric_reply(raw).unwrap();
        assert_eq!(reply[&RubricLabel::A].evidential_strength, 4);
        assert_eq!(reply[&RubricLabel::B].uncertainty_awareness, 3);
        assert_eq!(reply[&RubricLabel::C].logical_calibration, 3);

        let missing = r#"{
            "Method A": {"Evidential Strength": 3, "Uncertainty Awareness": 3, "Logical Calibration": 3},
            "Method B": {"Evidential Strength": 3, "Uncertainty Awareness": 3, "Logical Calibration": 3}
        }"#;
        assert_eq!(
            parse_rubric_reply(missing),
            Err(ParseError::Format(FailureReason::BadSchema))
        );

        let off_scale = raw.replace(": 5", ": 6");
        assert_eq!(
            parse_rubric_reply(&off_scale),
            Err(ParseError::Format(FailureReason::OutOfRange))
        );
    }

    proptest! {
        // parsers classify arbitrary bytes without panicking
        #[test]
        fn parsers_never_panic(raw in ".*") {
            let _ = parse_verbalized_confidence(&raw);
            let _ = parse_topk(&raw, 2);
            let _ = parse_distribution(&raw, &AnswerSpace::Open, DEFAULT_SUM_TOLERANCE);
            let _ = parse_judge_reply(&raw);
            let _ = parse_rubric_reply(&raw);
            let _ = final_answer_span(&raw);
        }

        // any well-formed distribution serialized into the prompt's JSON
        // shape parses back to an equal distribution
        #[test]
        fn distribution_round_trip(probs in proptest::collection::vec(0.01f64..1.0, 1..4)) {
            let mut entries: Vec<CandidateEntry> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| CandidateEntry { candidate: format!("candidate {i}"), probability: *p })
                .collect();
            entries.push(CandidateEntry { candidate: "None of the above".into(), probability: 0.5 });
            let total: f64 = entries.iter().map(|e| e.probability).sum();
            for e in &mut entries {
                e.probability /= total;
            }
            let dist = CandidateDistribution::validated(entries, 1e-9).unwrap();

            let json = serde_json::Value::Array(
                dist.entries()
                    .iter()
                    .map(|e| serde_json::json!({"candidate": e.candidate, "confidence": e.probability}))
                    .collect(),
            );
            let raw = format!("Reasoning first.\n{}", serde_json::to_string_pretty(&json).unwrap());
            match parse_distribution(&raw, &AnswerSpace::Open, DEFAULT_SUM_TOLERANCE) {
                ParseOutcome::Ok(p) => {
                    let parsed = p.distribution.unwrap();
                    prop_assert_eq!(parsed.entries().len(), dist.entries().len());
                    for (a, b) in parsed.entries().iter().zip(dist.entries()) {
                        prop_assert_eq!(&a.candidate, &b.candidate);
                        prop_assert!((a.probability - b.probability).abs() < 1e-9);
                    }
                    prop_assert_eq!(parsed.nota_index(), dist.nota_index());
                }
                other => prop_assert!(false, "round trip failed: {:?}", other),
            }
        }

        // the top-k answer carries the maximal confidence
        #[test]
        fn topk_answer_is_argmax(confs in proptest::collection::vec(0.0f64..=1.0, 2..6)) {
            let json = serde_json::Value::Array(
                confs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| serde_json::json!({"candidate": format!("c{i}"), "confidence": c}))
                    .collect(),
            );
            let raw = serde_json::to_string(&json).unwrap();
            if let ParseOutcome::Ok(p) = parse_topk(&raw, 2) {
                for entry in p.distribution.unwrap().entries() {
                    prop_assert!(p.confidence >= entry.probability);
                }
            } else {
                prop_assert!(false, "should parse");
            }
        }
    }
}
