//! Self-consistency aggregation: combining N sampled predictions per
//! question into one, either by answer frequency or by summing verbalized
//! confidences.

use crate::model::{canonicalize_answer, AggregationMode, AggregationTag, PredictionRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no samples parsed ok for this question")]
    NoValidSamples,
}

/// How multi-sample runs are collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub mode: AggregationMode,
    /// Samples drawn per question.
    pub n: usize,
    /// Sampling temperature used upstream when drawing the trajectories.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    0.8
}

/// Aggregated choice for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub answer: String,
    pub confidence: f64,
    /// Samples that were dropped because they failed to parse.
    pub dropped: usize,
}

struct AnswerGroup {
    /// Original text of the first occurrence.
    answer: String,
    count: usize,
    weight: f64,
}

fn group_answers(samples: &[&PredictionRecord]) -> Vec<AnswerGroup> {
    let mut groups: Vec<AnswerGroup> = Vec::new();
    let mut keys: Vec<String> = Vec::new();
    for sample in samples {
        let answer = sample.answer().expect("ok samples carry answers");
        let confidence = sample.confidence().expect("ok samples carry confidences");
        let key = canonicalize_answer(answer);
        match keys.iter().position(|k| *k == key) {
            Some(i) => {
                groups[i].count += 1;
                groups[i].weight += confidence;
            }
            None => {
                keys.push(key);
                groups.push(AnswerGroup {
                    answer: answer.to_string(),
                    count: 1,
                    weight: confidence,
                });
            }
        }
    }
    groups
}

fn ok_samples<'a>(samples: &'a [PredictionRecord]) -> (Vec<&'a PredictionRecord>, usize) {
    let ok: Vec<&PredictionRecord> = samples.iter().filter(|s| s.is_ok()).collect();
    let dropped = samples.len() - ok.len();
    (ok, dropped)
}

/// Majority vote: the modal canonicalized answer wins (ties break toward
/// the answer sampled first) with confidence = its share of the valid
/// samples.
pub fn aggregate_frequency(samples: &[PredictionRecord]) -> Result<Aggregated, AggregateError> {
    let (ok, dropped) = ok_samples(samples);
    if ok.is_empty() {
        return Err(AggregateError::NoValidSamples);
    }
    let groups = group_answers(&ok);
    let best = groups
        .iter()
        .max_by(|a, b| a.count.cmp(&b.count))
        .expect("non-empty");
    // max_by returns the last maximum; scan for the earliest instead
    let best = groups
        .iter()
        .find(|g| g.count == best.count)
        .expect("non-empty");
    Ok(Aggregated {
        answer: best.answer.clone(),
        confidence: best.count as f64 / ok.len() as f64,
        dropped,
    })
}

/// Confidence-weighted vote: each unique answer's weight is the sum of
/// its samples' confidences; the heaviest answer wins and its weight is
/// normalized by the total weight over all answers. Falls back to the
/// frequency rule when every confidence is zero.
pub fn aggregate_weighted(samples: &[PredictionRecord]) -> Result<Aggregated, AggregateError> {
    let (ok, dropped) = ok_samples(samples);
    if ok.is_empty() {
        return Err(AggregateError::NoValidSamples);
    }
    let groups = group_answers(&ok);
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    if total == 0.0 {
        return aggregate_frequency(samples);
    }
    let best_weight = groups
        .iter()
        .map(|g| g.weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let best = groups
        .iter()
        .find(|g| g.weight == best_weight)
        .expect("non-empty");
    Ok(Aggregated {
        answer: best.answer.clone(),
        confidence: best.weight / total,
        dropped,
    })
}

/// Aggregates one question's samples into a single tagged record.
///
/// The record keeps the samples' method and question, sums their token
/// usage, and reuses the correctness verdict already assigned to the
/// winning answer among the samples (identical canonicalized answers
/// share a verdict).
pub fn aggregate_records(
    samples: &[PredictionRecord],
    spec: &AggregationSpec,
) -> Result<PredictionRecord, AggregateError> {
    let aggregated = match spec.mode {
        AggregationMode::Frequency => aggregate_frequency(samples)?,
        AggregationMode::WeightedConfidence => aggregate_weighted(samples)?,
    };
    let first_ok = samples.iter().find(|s| s.is_ok()).expect("checked above");
    let question_id = first_ok.question_id().to_string();
    let method = first_ok.method();
    let token_usage: u64 = samples.iter().map(|s| s.token_usage()).sum();

    let winner_key = canonicalize_answer(&aggregated.answer);
    let correct = samples
        .iter()
        .filter(|s| s.is_ok())
        .find(|s| canonicalize_answer(s.answer().unwrap()) == winner_key)
        .and_then(|s| s.correct());

    let mut record = PredictionRecord::aggregated(
        question_id,
        method,
        aggregated.answer,
        aggregated.confidence,
        token_usage,
        AggregationTag {
            mode: spec.mode,
            n: spec.n,
        },
    )
    .expect("aggregated confidence is a valid probability");
    record.set_correct(correct);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FailureReason, Method};
    use proptest::prelude::*;

    fn sample(answer: &str, confidence: f64) -> PredictionRecord {
        PredictionRecord::parsed("q", Method::VerbConf, "", answer, confidence, None, 10).unwrap()
    }

    #[test]
    fn frequency_examples() {
        let samples = vec![sample("a", 0.5), sample("a", 0.5), sample("b", 0.5)];
        let agg = aggregate_frequency(&samples).unwrap();
        assert_eq!(agg.answer, "a");
        assert!((agg.confidence - 2.0 / 3.0).abs() < 1e-12);

        let single = vec![sample("a", 0.4)];
        let agg = aggregate_frequency(&single).unwrap();
        assert_eq!((agg.answer.as_str(), agg.confidence), ("a", 1.0));

        // tie goes to the first-sampled answer
        let tied = vec![sample("a", 0.5), sample("b", 0.5)];
        let agg = aggregate_frequency(&tied).unwrap();
        assert_eq!(agg.answer, "a");
        assert_eq!(agg.confidence, 0.5);
    }

    #[test]
    fn weighted_examples() {
        let samples = vec![sample("A", 0.8), sample("B", 0.6), sample("A", 0.7)];
        let agg = aggregate_weighted(&samples).unwrap();
        assert_eq!(agg.answer, "A");
        assert!((agg.confidence - 1.5 / 2.1).abs() < 1e-12);

        let single = vec![sample("A", 0.8)];
        let agg = aggregate_weighted(&single).unwrap();
        assert_eq!(agg.confidence, 1.0);

        let tied = vec![sample("A", 0.5), sample("B", 0.5)];
        let agg = aggregate_weighted(&tied).unwrap();
        assert_eq!(agg.answer, "A");
        assert_eq!(agg.confidence, 0.5);
    }

    #[test]
    fn weighted_zero_mass_falls_back_to_frequency() {
        let samples = vec![sample("a", 0.0), sample("b", 0.0), sample("b", 0.0)];
        let agg = aggregate_weighted(&samples).unwrap();
        assert_eq!(agg.answer, "b");
        assert!((agg.confidence - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn format_errors_are_dropped_and_counted() {
        let samples = vec![
            sample("a", 0.9),
            PredictionRecord::format_error("q", Method::VerbConf, "", FailureReason::NoJson, 5),
        ];
        let agg = aggregate_weighted(&samples).unwrap();
        assert_eq!(agg.dropped, 1);
        assert_eq!(agg.answer, "a");

        let none = vec![PredictionRecord::format_error(
            "q",
            Method::VerbConf,
            "",
            FailureReason::NoJson,
            5,
        )];
        assert_eq!(
            aggregate_weighted(&none).unwrap_err(),
            AggregateError::NoValidSamples
        );
    }

    #[test]
    fn answers_group_by_canonical_form() {
        let samples = vec![sample("Paris.", 0.4), sample("  paris", 0.4), sample("Lyon", 0.5)];
        let agg = aggregate_weighted(&samples).unwrap();
        assert_eq!(agg.answer, "Paris.");
        assert!((agg.confidence - 0.8 / 1.3).abs() < 1e-12);
    }

    #[test]
    fn aggregated_record_is_tagged_and_reuses_verdicts() {
        let spec = AggregationSpec {
            mode: AggregationMode::WeightedConfidence,
            n: 3,
            temperature: 0.8,
        };
        let samples = vec![
            sample("a", 0.8).with_correct(true),
            sample("b", 0.3).with_correct(false),
            sample("a", 0.6).with_correct(true),
        ];
        let record = aggregate_records(&samples, &spec).unwrap();
        assert_eq!(record.answer(), Some("a"));
        assert_eq!(record.correct(), Some(true));
        assert_eq!(record.token_usage(), 30);
        let tag = record.aggregation().unwrap();
        assert_eq!(tag.mode, AggregationMode::WeightedConfidence);
        assert_eq!(tag.n, 3);
    }

    prop_compose! {
        fn arb_samples()(raw in proptest::collection::vec((0u8..4, 0.0f64..=1.0), 1..20)) -> Vec<PredictionRecord> {
            raw.into_iter()
                .map(|(a, c)| sample(&format!("answer {a}"), c))
                .collect()
        }
    }

    proptest! {
        // normalized weights form a distribution, so the winning share is in (0, 1]
        #[test]
        fn weighted_confidence_is_normalized(samples in arb_samples()) {
            prop_assume!(samples.iter().any(|s| s.confidence().unwrap() > 0.0));
            let agg = aggregate_weighted(&samples).unwrap();
            prop_assert!(agg.confidence > 0.0 && agg.confidence <= 1.0 + 1e-12);

            // shares over all unique answers sum to 1
            let ok: Vec<&PredictionRecord> = samples.iter().collect();
            let groups = group_answers(&ok);
            let total: f64 = groups.iter().map(|g| g.weight).sum();
            let share_sum: f64 = groups.iter().map(|g| g.weight / total).sum();
            prop_assert!((share_sum - 1.0).abs() < 1e-9);
        }

        // equal confidences make the weighted vote agree with the frequency vote
        #[test]
        fn equal_weights_match_frequency(answers in proptest::collection::vec(0u8..4, 1..20)) {
            let samples: Vec<PredictionRecord> = answers
                .iter()
                .map(|a| sample(&format!("answer {a}"), 0.5))
                .collect();
            let w = aggregate_weighted(&samples).unwrap();
            let f = aggregate_frequency(&samples).unwrap();
            prop_assert_eq!(w.answer, f.answer);
        }

        // permuting samples does not change a tie-free outcome
        #[test]
        fn permutation_stable_without_ties(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let samples = vec![
                sample("a", 0.9),
                sample("b", 0.7),
                sample("a", 0.3),
                sample("c", 0.5),
            ];
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_weighted(&samples).unwrap();
            let b = aggregate_weighted(&shuffled).unwrap();
            prop_assert_eq!(a.answer, b.answer);
            prop_assert!((a.confidence - b.confidence).abs() < 1e-12);
        }
    }
}
