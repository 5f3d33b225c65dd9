//! Elicit: confidence elicitation and calibration evaluation for
//! chat-completion language models.
//!
//! The library covers the full loop: building elicitation prompts
//! (verbalized confidence, top-k guesses, probability distributions, and
//! the logprob-based logit and p(True) readers), parsing and validating
//! the completions, judging correctness (exact match or LLM-as-a-judge),
//! aggregating repeated samples, scoring calibration (accuracy, AUROC,
//! ECE, Brier, multi-label Brier, reliability bins), and computing
//! calibration-shaped RL rewards. A deterministic simulated backend makes
//! the whole pipeline runnable and verifiable offline.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run -p elicit --example simulated_run
//! cargo run -p elicit --example calibration_metrics
//! cargo run -p elicit --example consistency_sweep
//! cargo run -p elicit --example reward_surface
//! ```

pub mod aggregate;
pub mod client;
pub mod dataset;
pub mod judge;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod prompt;
pub mod reward;
pub mod runner;

pub use model::{
    canonicalize_answer, AnswerOption, AnswerSpace, CandidateDistribution, CandidateEntry,
    FailureReason, Method, MetricsReport, ModelResponse, ParseStatus, PredictionRecord,
    QuestionInstance, RewardOutcome,
};
pub use parse::{ParseOutcome, DEFAULT_SUM_TOLERANCE};
