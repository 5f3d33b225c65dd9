//! Reward shaping for calibrated RL: the RLCR reward `y - (p - y)^2`, the
//! accuracy-only RLVR baseline, and group-relative advantages without the
//! standard-deviation division.
//!
//! The module also speaks a line-oriented reward-server protocol so an
//! external trainer can score rollouts over stdin/stdout.

use crate::model::{
    answer_key_in, AnswerSpace, FailureReason, Method, QuestionInstance, RewardOutcome,
};
use crate::parse::{
    final_answer_span, parse_distribution, parse_topk, parse_verbalized_confidence, ParseOutcome,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};

/// Group size the rollout phase uses by default.
pub const DEFAULT_GROUP_SIZE: usize = 8;

/// Calibration reward: -1 on any format error, otherwise
/// `y - (p - y)^2` with `y` the 0/1 correctness, which lands in
/// [0, 1] for correct answers and [-1, 0] for incorrect ones.
pub fn rlcr_reward(outcome: &ParseOutcome, correct: bool) -> RewardOutcome {
    match outcome {
        ParseOutcome::FormatError(_) => RewardOutcome {
            reward: -1.0,
            format_ok: false,
            correct: false,
        },
        ParseOutcome::Ok(payload) => {
            let y = if correct { 1.0 } else { 0.0 };
            let gap = payload.confidence - y;
            RewardOutcome {
                reward: y - gap * gap,
                format_ok: true,
                correct,
            }
        }
    }
}

/// Accuracy-only baseline reward: -1 on format errors, otherwise the 0/1
/// correctness. The format penalty mirrors the calibration reward so the
/// two are comparable.
pub fn rlvr_reward(outcome: &ParseOutcome, correct: bool) -> f64 {
    match outcome {
        ParseOutcome::FormatError(_) => -1.0,
        ParseOutcome::Ok(_) => {
            if correct {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// A question's rollouts with their parse outcomes and correctness.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub question_id: String,
    pub rollouts: Vec<(ParseOutcome, bool)>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts
            .iter()
            .map(|(outcome, correct)| rlcr_reward(outcome, *correct).reward)
            .collect()
    }
}

/// Mean-centered advantages: `a_i = r_i - mean(r)`, with no division by
/// the standard deviation. They always sum to zero.
pub fn advantages_from_rewards(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Advantages of a rollout group under the calibration reward.
pub fn group_advantages(group: &RolloutGroup) -> Vec<f64> {
    advantages_from_rewards(&group.rewards())
}

/// One reward request, keyed to a question and carrying the raw rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardRequest {
    pub question_id: String,
    pub raw_text: String,
    pub gold: String,
    pub method: Method,
}

/// Which reward function the server applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Rlcr,
    Rlvr,
}

/// Scoring context for the reward server: known questions (for answer
/// spaces and gold letters), the distribution sum tolerance, and the
/// reward flavor.
pub struct RewardContext {
    pub questions: HashMap<String, QuestionInstance>,
    pub tolerance: f64,
    pub kind: RewardKind,
}

impl RewardContext {
    pub fn new(questions: HashMap<String, QuestionInstance>, tolerance: f64, kind: RewardKind) -> Self {
        Self {
            questions,
            tolerance,
            kind,
        }
    }

    /// Parses and scores one rollout. Unknown question ids fall back to an
    /// open answer space with the request's gold text; correctness is a
    /// canonicalized exact match (an external judge can overwrite verdicts
    /// out of band, but RL training loops need a verifiable signal).
    pub fn score(&self, request: &RewardRequest) -> RewardOutcome {
        let question = self.questions.get(&request.question_id);
        let (space, gold_key) = match question {
            Some(q) => (q.answer_space().clone(), q.gold_key()),
            None => (
                AnswerSpace::Open,
                answer_key_in(&AnswerSpace::Open, &request.gold),
            ),
        };
        let outcome = match request.method {
            Method::VerbConf => parse_verbalized_confidence(&request.raw_text),
            Method::VerbTopK { k } => parse_topk(&request.raw_text, k.max(2)),
            Method::VerbDistrib => parse_distribution(&request.raw_text, &space, self.tolerance),
            // logit/ptrue rollouts carry no verbalized confidence; score
            // the final-answer line with full confidence
            Method::Logit | Method::PTrue => match final_answer_span(&request.raw_text) {
                Some((_, answer)) => ParseOutcome::Ok(crate::parse::ParsedPrediction {
                    answer: answer.to_string(),
                    confidence: 1.0,
                    distribution: None,
                }),
                None => ParseOutcome::FormatError(FailureReason::SpanNotFound),
            },
        };
        let correct = outcome
            .payload()
            .map(|p| answer_key_in(&space, &p.answer) == gold_key)
            .unwrap_or(false);
        match self.kind {
            RewardKind::Rlcr => rlcr_reward(&outcome, correct),
            RewardKind::Rlvr => {
                let reward = rlvr_reward(&outcome, correct);
                RewardOutcome {
                    reward,
                    format_ok: outcome.is_ok(),
                    correct,
                }
            }
        }
    }
}

/// Serves reward requests as JSONL: one request object per input line,
/// one `{"reward": ..., "format_ok": ..., "correct": ...}` object per
/// output line. Malformed request lines get an `{"error": ...}` object so
/// the stream stays aligned.
pub fn serve_jsonl<R: BufRead, W: Write>(
    ctx: &RewardContext,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RewardRequest>(&line) {
            Ok(request) => {
                let outcome = ctx.score(&request);
                serde_json::to_writer(&mut output, &outcome)?;
            }
            Err(err) => {
                let error = serde_json::json!({ "error": err.to_string() });
                serde_json::to_writer(&mut output, &error)?;
            }
        }
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
