//! Accuracy, AUROC, ECE, Brier, multi-label Brier, calibration bins, and
//! token statistics over sets of prediction records.
//!
//! Format-error records count as incorrect for accuracy but carry no
//! confidence, so every confidence-based metric skips them; the report
//! carries the exclusion count. All functions are pure and order
//! independent.

use crate::model::{
    answer_key_in, canonicalize_answer, CalibrationBin, CandidateDistribution, MetricsReport,
    Method, PredictionRecord, QuestionInstance, NOTA_CANONICAL,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric computed over an empty record set")]
    EmptyInput,
    #[error("record for question {0:?} parsed ok but has no correctness verdict")]
    MissingVerdict(String),
}

/// Equal-width confidence binning on [0, 1]: `bins` intervals
/// `(lower, upper]`, with the first bin closed at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub bins: usize,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { bins: 10 }
    }
}

impl BinningSpec {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 1, "binning needs at least one bin");
        Self { bins }
    }

    /// Bin index for a confidence in [0, 1].
    pub fn index(&self, confidence: f64) -> usize {
        let idx = (confidence * self.bins as f64).ceil() as isize - 1;
        idx.clamp(0, self.bins as isize - 1) as usize
    }
}

/// How tied confidence pairs count in the AUROC.
///
/// `Average` gives ties half credit (the Mann-Whitney convention);
/// `Strict` follows the literal strict inequality, counting ties as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    #[default]
    Average,
    Strict,
}

/// Index of questions by id, used to resolve gold answers for the
/// multi-label Brier score.
pub type QuestionIndex = HashMap<String, QuestionInstance>;

pub fn question_index(questions: &[QuestionInstance]) -> QuestionIndex {
    questions
        .iter()
        .map(|q| (q.id().to_string(), q.clone()))
        .collect()
}

/// (confidence, correct) pairs of the scored records, i.e. records that
/// parsed ok. Errors if a scored record was never judged.
fn scored(records: &[PredictionRecord]) -> Result<Vec<(f64, bool)>, MetricsError> {
    let mut pairs = Vec::with_capacity(records.len());
    for record in records {
        if !record.is_ok() {
            continue;
        }
        let confidence = record
            .confidence()
            .expect("ok records always carry a confidence");
        let correct = record
            .correct()
            .ok_or_else(|| MetricsError::MissingVerdict(record.question_id().to_string()))?;
        pairs.push((confidence, correct));
    }
    Ok(pairs)
}

/// Fraction of correct records. Format errors count as incorrect.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let pairs = scored(records)?;
    let correct = pairs.iter().filter(|(_, y)| *y).count();
    Ok(correct as f64 / records.len() as f64)
}

/// AUROC over (confidence, correct) pairs via the rank-sum formulation.
/// Returns `None` when either class is empty.
pub fn auroc_pairs(pairs: &[(f64, bool)], tie: TieMode) -> Option<f64> {
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("confidences are finite"));

    let mut rank_sum_pos = 0.0f64;
    let mut tied_pairs = 0.0f64;
    let mut i = 0usize;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks are 1-based; a tie group spanning i..j shares the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|(_, y)| *y).count();
        let neg_in_group = (j - i) - pos_in_group;
        rank_sum_pos += pos_in_group as f64 * avg_rank;
        tied_pairs += pos_in_group as f64 * neg_in_group as f64;
        i = j;
    }

    let u_average = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let u = match tie {
        TieMode::Average => u_average,
        TieMode::Strict => u_average - 0.5 * tied_pairs,
    };
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC of the scored records; `None` when all records share one class.
pub fn auroc(records: &[PredictionRecord], tie: TieMode) -> Result<Option<f64>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(auroc_pairs(&scored(records)?, tie))
}

/// Brier score: mean squared error between confidence and correctness.
pub fn brier_pairs(pairs: &[(f64, bool)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(p, y)| {
            let target = if *y { 1.0 } else { 0.0 };
            (p - target) * (p - target)
        })
        .sum();
    Some(sum / pairs.len() as f64)
}

pub fn brier(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    brier_pairs(&scored(records)?).ok_or(MetricsError::EmptyInput)
}

fn bins_of_pairs(pairs: &[(f64, bool)], binning: &BinningSpec) -> Vec<CalibrationBin> {
    let m = binning.bins;
    let mut counts = vec![0usize; m];
    let mut conf_sums = vec![0.0f64; m];
    let mut correct_sums = vec![0.0f64; m];
    for (confidence, correct) in pairs {
        let idx = binning.index(*confidence);
        counts[idx] += 1;
        conf_sums[idx] += confidence;
        correct_sums[idx] += if *correct { 1.0 } else { 0.0 };
    }
    (0..m)
        .map(|i| {
            let count = counts[i];
            CalibrationBin {
                lower: i as f64 / m as f64,
                upper: (i + 1) as f64 / m as f64,
                count,
                mean_confidence: if count > 0 {
                    conf_sums[i] / count as f64
                } else {
                    0.0
                },
                accuracy: if count > 0 {
                    correct_sums[i] / count as f64
                } else {
                    0.0
                },
            }
        })
        .collect()
}

/// ECE = sum over bins of (|B_m| / n) * |acc(B_m) - conf(B_m)|.
/// Empty bins contribute nothing.
pub fn ece_pairs(pairs: &[(f64, bool)], binning: &BinningSpec) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let total = bins_of_pairs(pairs, binning)
        .iter()
        .filter(|bin| bin.count > 0)
        .map(|bin| (bin.count as f64 / n) * (bin.accuracy - bin.mean_confidence).abs())
        .sum();
    Some(total)
}

pub fn ece(records: &[PredictionRecord], binning: &BinningSpec) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    ece_pairs(&scored(records)?, binning).ok_or(MetricsError::EmptyInput)
}

/// Per-bin rows of the reliability diagram. Rows for empty bins are kept
/// with count 0 so the diagram always has `bins` rows.
pub fn calibration_curve(
    records: &[PredictionRecord],
    binning: &BinningSpec,
) -> Result<Vec<CalibrationBin>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(bins_of_pairs(&scored(records)?, binning))
}

/// Multi-label Brier of one distribution against a question's gold:
/// squared distance to the one-hot gold vector over the candidate set,
/// with the gold added at probability 0 when the model omitted it.
/// Ranges over [0, 2].
pub fn multi_brier_single(distribution: &CandidateDistribution, question: &QuestionInstance) -> f64 {
    let gold_key = question.gold_key();
    let mut score = 0.0;
    let mut gold_seen = false;
    for entry in distribution.entries() {
        let is_gold = answer_key_in(question.answer_space(), &entry.candidate) == gold_key;
        let target = if is_gold { 1.0 } else { 0.0 };
        score += (entry.probability - target) * (entry.probability - target);
        gold_seen = gold_seen || is_gold;
    }
    if !gold_seen {
        score += 1.0;
    }
    score
}

/// Mean multi-label Brier over the verb_distrib records whose questions
/// are known. `None` when no record is eligible.
pub fn multi_brier(records: &[PredictionRecord], questions: &QuestionIndex) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for record in records {
        if record.method() != Method::VerbDistrib || !record.is_ok() {
            continue;
        }
        let (Some(dist), Some(question)) =
            (record.distribution(), questions.get(record.question_id()))
        else {
            continue;
        };
        sum += multi_brier_single(dist, question);
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Arithmetic mean of completion token usage.
pub fn token_stats(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: u64 = records.iter().map(|r| r.token_usage()).sum();
    Ok(total as f64 / records.len() as f64)
}

/// Assembles the full metric suite for one record set.
///
/// `questions` is only needed for the multi-label Brier score; without it
/// that field stays absent. A set consisting solely of format errors
/// yields zeroed confidence metrics and all-empty bins.
pub fn compute_report(
    records: &[PredictionRecord],
    questions: Option<&QuestionIndex>,
    binning: &BinningSpec,
    tie: TieMode,
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let pairs = scored(records)?;
    let n = records.len();
    let format_errors = n - pairs.len();
    let correct = pairs.iter().filter(|(_, y)| *y).count();
    let nota_answers = records
        .iter()
        .filter(|r| {
            r.answer()
                .map(|a| canonicalize_answer(a) == NOTA_CANONICAL)
                .unwrap_or(false)
        })
        .count();

    Ok(MetricsReport {
        n,
        accuracy: correct as f64 / n as f64,
        auroc: auroc_pairs(&pairs, tie),
        brier: brier_pairs(&pairs).unwrap_or(0.0),
        ece: ece_pairs(&pairs, binning).unwrap_or(0.0),
        multi_brier: questions.and_then(|qs| multi_brier(records, qs)),
        calibration_bins: bins_of_pairs(&pairs, binning),
        mean_tokens: token_stats(records)?,
        format_errors,
        nota_answers,
    })
}

/// Renders the report as an aligned plain-text table.
pub fn render_table(report: &MetricsReport) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
    }
    let mut out = String::new();
    let rows = [
        ("n", report.n.to_string()),
        ("accuracy", format!("{:.4}", report.accuracy)),
        ("auroc", opt(report.auroc)),
        ("brier", format!("{:.4}", report.brier)),
        ("ece", format!("{:.4}", report.ece)),
        ("multi_brier", opt(report.multi_brier)),
        ("mean_tokens", format!("{:.1}", report.mean_tokens)),
        ("format_errors", report.format_errors.to_string()),
        ("nota_answers", report.nota_answers.to_string()),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, value) in rows {
        out.push_str(&format!("{key:<width$}  {value}\n"));
    }
    out.push('\n');
    out.push_str("bin            count  confidence  accuracy\n");
    for bin in &report.calibration_bins {
        out.push_str(&format!(
            "({:.2}, {:.2}]  {:>7}  {:>10.4}  {:>8.4}\n",
            bin.lower, bin.upper, bin.count, bin.mean_confidence, bin.accuracy
        ));
    }
    out
}

/// Calibration bins as CSV, for plotting.
pub fn calibration_csv(report: &MetricsReport) -> String {
    let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
    for bin in &report.calibration_bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            bin.lower, bin.upper, bin.count, bin.mean_confidence, bin.accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CandidateEntry, FailureReason};
    use proptest::prelude::*;

    fn record(confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord::parsed("q", Method::VerbConf, "", "a", confidence, None, 100)
            .unwrap()
            .with_correct(correct)
    }

    fn failure() -> PredictionRecord {
        PredictionRecord::format_error("q", Method::VerbConf, "", FailureReason::NoJson, 50)
    }

    #[test]
    fn accuracy_counts_format_errors_as_incorrect() {
        let records = vec![record(0.9, true), record(0.8, false)];
        assert_eq!(accuracy(&records).unwrap(), 0.5);

        let all_failed = vec![failure(), failure()];
        assert_eq!(accuracy(&all_failed).unwrap(), 0.0);

        assert_eq!(accuracy(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn auroc_hand_computed_pairs() {
        // positives {0.9, 0.4}, negatives {0.5, 0.1}: 3 of 4 ordered pairs
        let records = vec![
            record(0.9, true),
            record(0.4, true),
            record(0.5, false),
            record(0.1, false),
        ];
        let value = auroc(&records, TieMode::Average).unwrap().unwrap();
        assert!((value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_tie_handling() {
        let records = vec![record(0.5, true), record(0.5, false)];
        assert_eq!(
            auroc(&records, TieMode::Average).unwrap().unwrap(),
            0.5
        );
        assert_eq!(auroc(&records, TieMode::Strict).unwrap().unwrap(), 0.0);

        // perfect separation
        let records = vec![record(0.9, true), record(0.8, true), record(0.2, false)];
        assert_eq!(auroc(&records, TieMode::Average).unwrap().unwrap(), 1.0);

        // single class has no ranking
        let records = vec![record(0.9, true)];
        assert_eq!(auroc(&records, TieMode::Average).unwrap(), None);
    }

    #[test]
    fn ece_hand_computed() {
        let binning = BinningSpec::default();
        // single record: |1 - 0.7| over the one occupied bin
        let one = vec![record(0.7, true)];
        assert!((ece(&one, &binning).unwrap() - 0.3).abs() < 1e-12);

        // two records in two bins, each half the mass with error 0.9
        let two = vec![record(0.9, false), record(0.1, true)];
        assert!((ece(&two, &binning).unwrap() - 0.9).abs() < 1e-12);

        // perfectly calibrated bins
        let calibrated = vec![
            record(0.75, true),
            record(0.75, true),
            record(0.75, true),
            record(0.75, false),
        ];
        assert!(ece(&calibrated, &binning).unwrap() < 1e-12);
    }

    #[test]
    fn brier_hand_computed() {
        assert_eq!(brier(&[record(1.0, true)]).unwrap(), 0.0);
        assert_eq!(brier(&[record(0.0, true)]).unwrap(), 1.0);
        let records = vec![record(0.7, true), record(0.2, false)];
        assert!((brier(&records).unwrap() - 0.065).abs() < 1e-12);
    }

    fn distrib_record(entries: Vec<(&str, f64)>) -> PredictionRecord {
        let entries: Vec<CandidateEntry> = entries
            .into_iter()
            .map(|(c, p)| CandidateEntry {
                candidate: c.into(),
                probability: p,
            })
            .collect();
        let dist = CandidateDistribution::validated(entries, 1e-9).unwrap();
        let argmax = dist.argmax().clone();
        PredictionRecord::parsed(
            "mb",
            Method::VerbDistrib,
            "",
            argmax.candidate,
            argmax.probability,
            Some(dist),
            10,
        )
        .unwrap()
        .with_correct(true)
    }

    #[test]
    fn multi_brier_examples() {
        let question = QuestionInstance::open("mb", "q?", "gold").unwrap();
        let questions = question_index(&[question.clone()]);

        let perfect = distrib_record(vec![("gold", 1.0)]);
        assert_eq!(multi_brier(&[perfect], &questions).unwrap(), 0.0);

        let wrong = distrib_record(vec![("not it", 1.0)]);
        assert_eq!(multi_brier(&[wrong], &questions).unwrap(), 2.0);

        let half = distrib_record(vec![("gold", 0.5), ("other", 0.5)]);
        assert!((multi_brier(&[half], &questions).unwrap() - 0.5).abs() < 1e-12);

        // non-distribution records are not eligible
        assert_eq!(multi_brier(&[record(0.9, true)], &questions), None);
    }

    #[test]
    fn multi_brier_matches_option_text_to_gold_letter() {
        let question = QuestionInstance::multiple_choice(
            "mb",
            "capital?",
            vec!["Lyon".into(), "Paris".into()],
            "B",
        )
        .unwrap();
        let questions = question_index(&[question]);
        let dist = distrib_record(vec![("Paris", 0.9), ("A", 0.1)]);
        let expected = (0.9 - 1.0f64).powi(2) + 0.1f64.powi(2);
        assert!((multi_brier(&[dist], &questions).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn calibration_bins_boundaries() {
        let binning = BinningSpec::default();
        let rows = calibration_curve(&[record(0.95, true)], &binning).unwrap();
        assert_eq!(rows.len(), 10);
        let occupied: Vec<_> = rows.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].lower, 0.9);
        assert_eq!(occupied[0].upper, 1.0);

        // confidence exactly 0 lands in the first bin
        let rows = calibration_curve(&[record(0.0, false)], &binning).unwrap();
        assert_eq!(rows[0].count, 1);

        // upper boundary belongs to the bin below
        assert_eq!(binning.index(0.7), 6);
        assert_eq!(binning.index(0.1), 0);
        assert_eq!(binning.index(1.0), 9);
    }

    #[test]
    fn token_stats_examples() {
        let a = PredictionRecord::parsed("q", Method::VerbConf, "", "a", 0.5, None, 100)
            .unwrap()
            .with_correct(true);
        let b = PredictionRecord::parsed("q", Method::VerbConf, "", "a", 0.5, None, 200)
            .unwrap()
            .with_correct(false);
        assert_eq!(token_stats(&[a, b]).unwrap(), 150.0);
        let zero = PredictionRecord::parsed("q", Method::VerbConf, "", "a", 0.5, None, 0).unwrap();
        assert_eq!(token_stats(&[zero]).unwrap(), 0.0);
        assert_eq!(token_stats(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn report_excludes_format_errors_from_bins() {
        let records = vec![record(0.9, true), failure()];
        let report = compute_report(
            &records,
            None,
            &BinningSpec::default(),
            TieMode::Average,
        )
        .unwrap();
        assert_eq!(report.n, 2);
        assert_eq!(report.format_errors, 1);
        assert_eq!(report.accuracy, 0.5);
        let binned: usize = report.calibration_bins.iter().map(|b| b.count).sum();
        assert_eq!(binned, report.n - report.format_errors);
    }

    #[test]
    fn missing_verdict_is_an_error() {
        let unjudged =
            PredictionRecord::parsed("q9", Method::VerbConf, "", "a", 0.5, None, 1).unwrap();
        assert_eq!(
            accuracy(&[unjudged]),
            Err(MetricsError::MissingVerdict("q9".into()))
        );
    }

    #[test]
    fn table_and_csv_render() {
        let report = compute_report(
            &[record(0.7, true), record(0.2, false)],
            None,
            &BinningSpec::default(),
            TieMode::Average,
        )
        .unwrap();
        let table = render_table(&report);
        assert!(table.contains("accuracy"));
        assert!(table.contains("brier"));
        let csv = calibration_csv(&report);
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("lower,upper,count,mean_confidence,accuracy"));
    }

    prop_compose! {
        fn arb_records()(pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 2..40)) -> Vec<PredictionRecord> {
            pairs.into_iter().map(|(c, y)| record(c, y)).collect()
        }
    }

    proptest! {
        // AUROC is a rank statistic: any strictly increasing transform of
        // the confidences leaves it unchanged
        #[test]
        fn auroc_invariant_under_monotone_transform(records in arb_records()) {
            let transformed: Vec<PredictionRecord> = records
                .iter()
                .map(|r| {
                    let c = r.confidence().unwrap();
                    // strictly increasing map of [0,1] into [0,1]
                    let t = 0.25 + 0.5 * (c * c + c) / 2.0;
                    record(t, r.correct().unwrap())
                })
                .collect();
            for tie in [TieMode::Average, TieMode::Strict] {
                let a = auroc(&records, tie).unwrap();
                let b = auroc(&transformed, tie).unwrap();
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => prop_assert!(false, "mismatch: {:?}", other),
                }
            }
        }

        // with a single bin the ECE collapses to |accuracy - mean confidence|
        #[test]
        fn ece_single_bin_identity(records in arb_records()) {
            let ece_one = ece(&records, &BinningSpec::new(1)).unwrap();
            let acc = accuracy(&records).unwrap();
            let mean_conf: f64 = records.iter().map(|r| r.confidence().unwrap()).sum::<f64>()
                / records.len() as f64;
            prop_assert!((ece_one - (acc - mean_conf).abs()) < 1e-12);
        }

        // brier is non-negative and zero for perfectly confident, correct records
        #[test]
        fn brier_bounds(records in arb_records()) {
            let b = brier(&records).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            let perfect: Vec<PredictionRecord> =
                records.iter().map(|_| record(1.0, true)).collect();
            prop_assert_eq!(brier(&perfect).unwrap(), 0.0);
        }

        // per-record multi-brier stays in [0, 2]
        #[test]
        fn multi_brier_range(probs in proptest::collection::vec(0.0f64..=1.0, 1..5)) {
            let total: f64 = probs.iter().sum();
            prop_assume!(total > 0.0);
            let entries: Vec<CandidateEntry> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| CandidateEntry { candidate: format!("c{i}"), probability: p / total })
                .collect();
            let dist = CandidateDistribution::validated(entries, 1e-6).unwrap();
            let question = QuestionInstance::open("q", "q?", "c0").unwrap();
            let score = multi_brier_single(&dist, &question);
            prop_assert!((0.0..=2.0).contains(&score));
        }
    }
}
