//! Answer correctness: exact match for known answer spaces, an
//! LLM-as-a-judge for open-ended ones (with a persistent verdict cache),
//! and rubric scoring of reasoning traces.

use crate::client::{derive_seed, Backend, ClientError, RequestContext};
use crate::model::{
    canonicalize_answer, is_nota, Method, PredictionRecord, QuestionInstance, RubricScores,
};
use crate::parse::{parse_judge_reply, parse_rubric_reply, ParseError};
use crate::prompt::{PromptError, PromptTemplates, RubricAssignment};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge backend failed on question {question_id}: {source}")]
    Client {
        question_id: String,
        source: ClientError,
    },
    #[error("judge verdict unusable for question {question_id}: {source}")]
    Verdict {
        question_id: String,
        source: ParseError,
    },
    #[error("rubric scoring failed for question {question_id}: {source}")]
    Rubric {
        question_id: String,
        source: ParseError,
    },
    #[error("prompt construction failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("record has no answer to judge")]
    NoAnswer,
    #[error("cache file error: {0}")]
    Cache(std::io::Error),
}

/// Exact-match correctness for known answer spaces: the canonicalized
/// answer equals the gold letter, or the gold option's full text.
pub fn judge_exact(question: &QuestionInstance, record: &PredictionRecord) -> bool {
    match record.answer() {
        Some(answer) => question.answer_key(answer) == question.gold_key(),
        None => false,
    }
}

/// Hash used to key persisted verdicts without storing answer text.
fn answer_hash(answer: &str) -> String {
    let canonical = canonicalize_answer(answer);
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(32);
    for byte in &digest[..16] {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    question_id: String,
    answer_hash: String,
    verdict: bool,
}

/// LLM-as-a-judge with an insert-once verdict cache. Judge calls run at
/// whatever temperature the backend is configured with; callers should
/// pass a temperature-0 backend for determinism.
pub struct Judge {
    backend: Arc<dyn Backend>,
    templates: PromptTemplates,
    cache: Mutex<HashMap<(String, String), bool>>,
    cache_file: Option<Mutex<File>>,
    client_calls: AtomicUsize,
}

impl Judge {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            templates: PromptTemplates::default(),
            cache: Mutex::new(HashMap::new()),
            cache_file: None,
            client_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    /// Loads previously persisted verdicts and appends new ones to the
    /// same file, so reruns skip every already-judged answer.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, JudgeError> {
        if path.exists() {
            let file = File::open(path).map_err(JudgeError::Cache)?;
            let mut cache = self.cache.lock().expect("cache poisoned");
            for line in BufReader::new(file).lines() {
                let line = line.map_err(JudgeError::Cache)?;
                if line.trim().is_empty() {
                    continue;
                }
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    cache.insert((entry.question_id, entry.answer_hash), entry.verdict);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(JudgeError::Cache)?;
        self.cache_file = Some(Mutex::new(file));
        Ok(self)
    }

    /// Number of completions actually requested (cache hits excluded).
    pub fn client_calls(&self) -> usize {
        self.client_calls.load(Ordering::SeqCst)
    }

    /// Judges one parsed answer against the question's gold. A
    /// none-of-the-above answer is incorrect by definition whenever a
    /// gold answer exists, without consulting the judge.
    pub fn judge_answer(
        &self,
        question: &QuestionInstance,
        answer: &str,
    ) -> Result<bool, JudgeError> {
        if is_nota(answer) {
            return Ok(false);
        }
        let key = (question.id().to_string(), answer_hash(answer));
        if let Some(verdict) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(*verdict);
        }

        let bundle = self.templates.judge(question, answer)?;
        let seed = derive_seed(&[question.id().as_bytes(), key.1.as_bytes(), b"judge"]);
        let ctx = RequestContext {
            question: Some(question),
            method: None,
            sample_index: 0,
            seed,
        };

        // one reprompt retry on an unusable verdict
        let mut verdict = None;
        let mut last_parse_error = None;
        for _ in 0..2 {
            self.client_calls.fetch_add(1, Ordering::SeqCst);
            let response =
                self.backend
                    .complete(&bundle, &ctx)
                    .map_err(|source| JudgeError::Client {
                        question_id: question.id().to_string(),
                        source,
                    })?;
            match parse_judge_reply(response.raw_text()) {
                Ok(v) => {
                    verdict = Some(v);
                    break;
                }
                Err(e) => last_parse_error = Some(e),
            }
        }
        let verdict = match verdict {
            Some(v) => v,
            None => {
                return Err(JudgeError::Verdict {
                    question_id: question.id().to_string(),
                    source: last_parse_error.expect("retried at least once"),
                })
            }
        };

        let mut cache = self.cache.lock().expect("cache poisoned");
        if cache.insert(key.clone(), verdict).is_none() {
            if let Some(file) = &self.cache_file {
                let line = CacheLine {
                    question_id: key.0,
                    answer_hash: key.1,
                    verdict,
                };
                let mut file = file.lock().expect("cache file poisoned");
                let _ = writeln!(file, "{}", serde_json::to_string(&line).expect("serializable"));
            }
        }
        Ok(verdict)
    }

    /// Judges a parsed record: exact match for known spaces, the judge
    /// model for open ones.
    pub fn judge_correctness(
        &self,
        question: &QuestionInstance,
        record: &PredictionRecord,
    ) -> Result<bool, JudgeError> {
        if !question.is_open() {
            return Ok(judge_exact(question, record));
        }
        let answer = record.answer().ok_or(JudgeError::NoAnswer)?;
        self.judge_answer(question, answer)
    }

    /// Scores three reasoning traces (one per method) on the three-axis
    /// rubric. Label assignment is shuffled per call from `seed` and
    /// recorded in the outcome; scores come back keyed by method.
    pub fn score_rubric(
        &self,
        question_id: &str,
        traces: &[(Method, String); 3],
        seed: u64,
    ) -> Result<RubricOutcome, JudgeError> {
        let methods = [traces[0].0, traces[1].0, traces[2].0];
        let assignment = RubricAssignment::shuffled(methods, seed);
        let ordered: Vec<&str> = assignment
            .slots
            .iter()
            .map(|slot| {
                traces
                    .iter()
                    .find(|(m, _)| m == slot)
                    .map(|(_, text)| text.as_str())
                    .expect("slots permute the given methods")
            })
            .collect();
        let bundle = self.templates.rubric(&ordered)?;
        let ctx = RequestContext {
            question: None,
            method: None,
            sample_index: 0,
            seed: derive_seed(&[question_id.as_bytes(), &seed.to_le_bytes(), b"rubric"]),
        };

        let mut reply = None;
        let mut last_error = None;
        for _ in 0..2 {
            self.client_calls.fetch_add(1, Ordering::SeqCst);
            let response =
                self.backend
                    .complete(&bundle, &ctx)
                    .map_err(|source| JudgeError::Client {
                        question_id: question_id.to_string(),
                        source,
                    })?;
            match parse_rubric_reply(response.raw_text()) {
                Ok(r) => {
                    reply = Some(r);
                    break;
                }
                Err(e) => last_error = Some(e),
            }
        }
        let reply = reply.ok_or_else(|| JudgeError::Rubric {
            question_id: question_id.to_string(),
            source: last_error.expect("retried at least once"),
        })?;

        let scores = methods
            .iter()
            .map(|method| {
                let label = assignment
                    .label_for(*method)
                    .expect("assignment covers all methods");
                (*method, reply[&label])
            })
            .collect();
        Ok(RubricOutcome {
            question_id: question_id.to_string(),
            assignment,
            scores,
        })
    }
}

/// De-anonymized rubric scores for one question.
#[derive(Debug, Clone, Serialize)]
pub struct RubricOutcome {
    pub question_id: String,
    pub assignment: RubricAssignment,
    pub scores: Vec<(Method, RubricScores)>,
}
