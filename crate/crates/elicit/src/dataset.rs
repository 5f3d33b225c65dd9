//! Benchmark dataset loading, sampling, and difficulty filtering.
//!
//! All datasets share one JSONL schema: each line is an object with `id`,
//! `question`, `answer`, and (for multiple choice) `options`. Options are
//! lettered A, B, ... in file order and the gold answer names a letter.
//! Per-dataset import adapters live outside the harness; this module never
//! embeds dataset-specific logic.

use crate::model::{ModelError, QuestionInstance};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("manifest says {expected} instances but the file has {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("cannot sample {n} from {available} instances")]
    NTooLarge { n: usize, available: usize },
    #[error("manifest is invalid: {0}")]
    BadManifest(String),
    #[error("probe failed on question {id}: {message}")]
    Probe { id: String, message: String },
}

/// Whether a dataset has an enumerable answer space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MultipleChoice,
    OpenEnded,
}

/// Describes one dataset: where it lives, its kind and size, and an
/// optional deterministic subsample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    pub kind: DatasetKind,
    pub size: usize,
    #[serde(default)]
    pub sample_seed: Option<u64>,
    #[serde(default)]
    pub sample_n: Option<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.size == 0 {
            return Err(DatasetError::BadManifest("size must be >= 1".into()));
        }
        if let Some(n) = self.sample_n {
            if n > self.size {
                return Err(DatasetError::BadManifest(format!(
                    "sample_n {n} exceeds size {}",
                    self.size
                )));
            }
        }
        Ok(())
    }

    /// Reads a manifest from a TOML file. A relative dataset path is
    /// resolved against the manifest's directory.
    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| DatasetError::BadManifest(e.to_string()))?;
        if manifest.path.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.path = dir.join(&manifest.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLine {
    id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    answer: String,
}

/// Loads and validates the manifest's instances, applying its subsample
/// when configured.
pub fn load(manifest: &DatasetManifest) -> Result<Vec<QuestionInstance>, DatasetError> {
    manifest.validate()?;
    let text = fs::read_to_string(&manifest.path).map_err(|source| DatasetError::Io {
        path: manifest.path.clone(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        if !ids.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId(raw.id));
        }
        let instance = build_instance(manifest.kind, raw).map_err(|e| DatasetError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        instances.push(instance);
    }
    if instances.len() != manifest.size {
        return Err(DatasetError::CountMismatch {
            expected: manifest.size,
            actual: instances.len(),
        });
    }
    match (manifest.sample_n, manifest.sample_seed) {
        (Some(n), seed) => sample(&instances, n, seed.unwrap_or(0)),
        (None, _) => Ok(instances),
    }
}

fn build_instance(kind: DatasetKind, raw: RawLine) -> Result<QuestionInstance, ModelError> {
    match kind {
        DatasetKind::MultipleChoice => {
            let options = raw.options.ok_or(ModelError::NoOptions)?;
            QuestionInstance::multiple_choice(raw.id, raw.question, options, &raw.answer)
        }
        DatasetKind::OpenEnded => QuestionInstance::open(raw.id, raw.question, raw.answer),
    }
}

/// Writes instances back out in the canonical JSONL schema.
pub fn save(instances: &[QuestionInstance], path: &Path) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    for q in instances {
        let raw = RawLine {
            id: q.id().to_string(),
            question: q.question().to_string(),
            options: q
                .answer_space()
                .options()
                .map(|opts| opts.iter().map(|o| o.text.clone()).collect()),
            answer: q.gold().to_string(),
        };
        serde_json::to_writer(&mut out, &raw).expect("serializable");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Uniform sample of `n` instances without replacement, deterministic in
/// `seed` and insensitive to the input order (instances are keyed by id
/// before drawing). The result is ordered by id.
pub fn sample(
    instances: &[QuestionInstance],
    n: usize,
    seed: u64,
) -> Result<Vec<QuestionInstance>, DatasetError> {
    if n > instances.len() {
        return Err(DatasetError::NTooLarge {
            n,
            available: instances.len(),
        });
    }
    let mut sorted: Vec<&QuestionInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&QuestionInstance> =
        sorted.choose_multiple(&mut rng, n).copied().collect();
    chosen.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(chosen.into_iter().cloned().collect())
}

/// Which instances a difficulty filter keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyKeep {
    /// Keep instances the probe solved in at least one attempt.
    SolvedAtLeastOnce,
    /// Keep instances the probe failed in at least one attempt.
    FailedAtLeastOnce,
}

/// Filters instances by probing each one `attempts` times with a solver
/// and keeping those that satisfy the predicate. Every attempt runs; the
/// probe's per-attempt correctness drives the decision.
pub fn filter_by_difficulty<F, E>(
    instances: &[QuestionInstance],
    mut probe: F,
    attempts: usize,
    keep: DifficultyKeep,
) -> Result<Vec<QuestionInstance>, DatasetError>
where
    F: FnMut(&QuestionInstance, usize) -> Result<bool, E>,
    E: std::fmt::Display,
{
    assert!(attempts >= 1, "difficulty filtering needs >= 1 attempt");
    let mut kept = Vec::new();
    for instance in instances {
        let mut solved = 0usize;
        for attempt in 0..attempts {
            let correct = probe(instance, attempt).map_err(|e| DatasetError::Probe {
                id: instance.id().to_string(),
                message: e.to_string(),
            })?;
            if correct {
                solved += 1;
            }
        }
        let keep_it = match keep {
            DifficultyKeep::SolvedAtLeastOnce => solved >= 1,
            DifficultyKeep::FailedAtLeastOnce => solved < attempts,
        };
        if keep_it {
            kept.push(instance.clone());
        }
    }
    Ok(kept)
}

/// Kinds of synthetic questions for offline runs against the simulated
/// backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticSpec {
    MultipleChoice { n: usize, options: usize },
    OpenEnded { n: usize },
}

/// Deterministically generates a synthetic dataset. Gold answers are
/// seeded; questions carry no real content but exercise the full pipeline.
pub fn synthetic(spec: SyntheticSpec, seed: u64) -> Vec<QuestionInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        SyntheticSpec::MultipleChoice { n, options } => {
            let options = options.clamp(2, 26);
            (0..n)
                .map(|i| {
                    let texts: Vec<String> =
                        (0..options).map(|j| format!("choice {i}-{j}")).collect();
                    let gold_idx = rand::Rng::gen_range(&mut rng, 0..options);
                    let gold = char::from(b'A' + gold_idx as u8).to_string();
                    QuestionInstance::multiple_choice(
                        format!("syn-{i:05}"),
                        format!("Synthetic multiple-choice question #{i}"),
                        texts,
                        &gold,
                    )
                    .expect("synthetic instances are valid")
                })
                .collect()
        }
        SyntheticSpec::OpenEnded { n } => (0..n)
            .map(|i| {
                QuestionInstance::open(
                    format!("syn-{i:05}"),
                    format!("Synthetic open-ended question #{i}"),
                    format!("target {i}"),
                )
                .expect("synthetic instances are valid")
            })
            .collect(),
    }
}
