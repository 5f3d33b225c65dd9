//! End-to-end evaluation runs: for each (dataset, method) cell, elicit,
//! parse, judge, optionally aggregate repeated samples, then score.
//!
//! Runs are deterministic: every backend call gets a sub-seed derived
//! from (run seed, question id, method, sample index), and records are
//! written in task order through a reorder buffer, so two runs with the
//! same config produce byte-identical logs and reports regardless of
//! worker scheduling. Resume reads the existing log, validates it against
//! the task list, and continues where it stopped.

use crate::aggregate::{aggregate_records, AggregationSpec};
use crate::client::{
    sample_seed, Backend, ClientConfig, ClientError, HttpClient, RequestContext, SimulatedModel,
    SimulatedModelSpec,
};
use crate::dataset::{self, DatasetError, DatasetManifest, SyntheticSpec};
use crate::judge::{Judge, JudgeError, RubricOutcome};
use crate::metrics::{
    calibration_csv, compute_report, question_index, render_table, BinningSpec, MetricsError,
    QuestionIndex, TieMode,
};
use crate::model::{
    FailureReason, Method, MetricsReport, ModelError, PredictionRecord, QuestionInstance,
};
use crate::parse::{
    final_answer_span, parse_distribution, parse_logit_confidence, parse_ptrue_logprobs,
    parse_topk, parse_verbalized_confidence, ParseError, DEFAULT_SUM_TOLERANCE,
};
use crate::prompt::{PromptError, PromptTemplates};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad record log {path:?} line {line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the questions come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Manifest {
        path: PathBuf,
    },
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
}

/// Which model answers the prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    Simulated { spec: SimulatedModelSpec },
    Http { config: ClientConfig },
}

/// Which model judges open-ended correctness. `Same` reuses the run
/// backend; an explicit HTTP judge always runs at temperature 0.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeChoice {
    #[default]
    Same,
    Http {
        config: ClientConfig,
    },
}

fn default_samples() -> usize {
    1
}

/// Full description of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    #[serde(default = "default_samples")]
    pub samples_per_question: usize,
    #[serde(default)]
    pub resume: bool,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub binning: BinningSpec,
    #[serde(default)]
    pub aggregation: Option<AggregationSpec>,
    pub backend: BackendChoice,
    #[serde(default)]
    pub judge: JudgeChoice,
    /// Decoding temperature override. Unset, single-sample runs decode
    /// greedily (0) and multi-sample runs use 0.8.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub tie_mode: TieMode,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub judge_cache: Option<PathBuf>,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a TOML run config, resolving relative paths against the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
        if let Some(dir) = path.parent() {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            resolve(&mut config.output_dir);
            if let DatasetSource::Manifest { path } = &mut config.dataset {
                resolve(path);
            }
            if let Some(p) = &mut config.templates_dir {
                resolve(p);
            }
            if let Some(p) = &mut config.judge_cache {
                resolve(p);
            }
            if let Some(p) = &mut config.transcript {
                resolve(p);
            }
        }
        Ok(config)
    }

    /// Checks invariants and reconciles the sample count with the
    /// aggregation spec.
    pub fn normalize(&mut self) -> Result<(), RunError> {
        if self.methods.is_empty() {
            return Err(RunError::Config("methods must not be empty".into()));
        }
        if self.samples_per_question < 1 {
            return Err(RunError::Config("samples_per_question must be >= 1".into()));
        }
        if let Some(aggregation) = &self.aggregation {
            if aggregation.n < 2 {
                return Err(RunError::Config("aggregation requires n >= 2".into()));
            }
            if self.samples_per_question == 1 {
                self.samples_per_question = aggregation.n;
            } else if self.samples_per_question != aggregation.n {
                return Err(RunError::Config(format!(
                    "samples_per_question {} conflicts with aggregation n {}",
                    self.samples_per_question, aggregation.n
                )));
            }
        }
        Ok(())
    }

    /// The decoding temperature the run actually uses.
    pub fn effective_temperature(&self) -> f64 {
        self.temperature.unwrap_or(if self.samples_per_question > 1 {
            0.8
        } else {
            0.0
        })
    }
}

/// Result of one method's pass over the dataset.
#[derive(Debug, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub report: Option<MetricsReport>,
    /// Why the method was skipped, when it was.
    pub skipped: Option<String>,
    pub records_path: Option<PathBuf>,
    pub aggregated_path: Option<PathBuf>,
}

/// Filesystem-safe method name for run artifacts.
pub fn method_slug(method: Method) -> String {
    method.to_string().replace(':', "-")
}

struct Task<'a> {
    index: usize,
    question: &'a QuestionInstance,
    sample_index: usize,
}

struct MethodRun<'a> {
    templates: &'a PromptTemplates,
    backend: &'a dyn Backend,
    judge: &'a Judge,
    method: Method,
    run_seed: u64,
    tolerance: f64,
}

impl<'a> MethodRun<'a> {
    fn client_failure(
        &self,
        question: &QuestionInstance,
        reason: FailureReason,
    ) -> PredictionRecord {
        PredictionRecord::format_error(question.id(), self.method, "", reason, 0)
    }

    /// One elicitation: prompt, complete, parse, judge. Client failures
    /// become format-error records after the client's own retries; judge
    /// failures abort the run.
    fn process(&self, task: &Task<'_>) -> Result<PredictionRecord, RunError> {
        let question = task.question;
        let seed = sample_seed(self.run_seed, question.id(), self.method, task.sample_index);
        let ctx = RequestContext::new(question, self.method, task.sample_index, seed);

        let mut record = match self.method {
            Method::VerbConf | Method::VerbTopK { .. } | Method::VerbDistrib => {
                let bundle = self.templates.elicitation(question, self.method)?;
                match self.backend.complete(&bundle, &ctx) {
                    Ok(response) => {
                        let outcome = match self.method {
                            Method::VerbConf => parse_verbalized_confidence(response.raw_text()),
                            Method::VerbTopK { k } => parse_topk(response.raw_text(), k),
                            Method::VerbDistrib => parse_distribution(
                                response.raw_text(),
                                question.answer_space(),
                                self.tolerance,
                            ),
                            _ => unreachable!(),
                        };
                        outcome.into_record(
                            question.id(),
                            self.method,
                            response.raw_text(),
                            response.token_usage(),
                        )?
                    }
                    Err(error) => {
                        log::warn!("client failed on {}: {error}", question.id());
                        self.client_failure(question, FailureReason::ClientFailure)
                    }
                }
            }
            Method::Logit => {
                let bundle = self.templates.elicitation(question, Method::Logit)?;
                match self.backend.complete(&bundle, &ctx) {
                    Ok(response) => {
                        let raw = response.raw_text().to_string();
                        let usage = response.token_usage();
                        match final_answer_span(&raw) {
                            None => PredictionRecord::format_error(
                                question.id(),
                                self.method,
                                raw,
                                FailureReason::SpanNotFound,
                                usage,
                            ),
                            Some((span, answer)) => {
                                match parse_logit_confidence(&response, span) {
                                    Ok(confidence) => PredictionRecord::parsed(
                                        question.id(),
                                        self.method,
                                        raw.clone(),
                                        answer,
                                        confidence,
                                        None,
                                        usage,
                                    )?,
                                    Err(error) => PredictionRecord::format_error(
                                        question.id(),
                                        self.method,
                                        raw,
                                        parse_failure_reason(&error),
                                        usage,
                                    ),
                                }
                            }
                        }
                    }
                    Err(ClientError::LogprobsUnsupported) => {
                        self.client_failure(question, FailureReason::MissingLogprobs)
                    }
                    Err(error) => {
                        log::warn!("client failed on {}: {error}", question.id());
                        self.client_failure(question, FailureReason::ClientFailure)
                    }
                }
            }
            Method::PTrue => {
                let stage1 = self.templates.elicitation(question, Method::PTrue)?;
                let response1 = match self.backend.complete(&stage1, &ctx) {
                    Ok(r) => r,
                    Err(error) => {
                        log::warn!("client failed on {}: {error}", question.id());
                        return self
                            .judge_if_ok(question, self.client_failure(question, FailureReason::ClientFailure));
                    }
                };
                let stage2 = self.templates.ptrue_judgment(question, &response1)?;
                let ctx2 = RequestContext {
                    seed: crate::client::derive_seed(&[&seed.to_le_bytes(), b"ptrue-judgment"]),
                    ..ctx
                };
                let raw = response1.raw_text().to_string();
                match self.backend.complete(&stage2, &ctx2) {
                    Ok(response2) => {
                        let usage = response1.token_usage() + response2.token_usage();
                        match (final_answer_span(&raw), parse_ptrue_logprobs(&response2)) {
                            (None, _) => PredictionRecord::format_error(
                                question.id(),
                                self.method,
                                raw,
                                FailureReason::SpanNotFound,
                                usage,
                            ),
                            (_, Err(error)) => PredictionRecord::format_error(
                                question.id(),
                                self.method,
                                raw,
                                parse_failure_reason(&error),
                                usage,
                            ),
                            (Some((_, answer)), Ok(confidence)) => PredictionRecord::parsed(
                                question.id(),
                                self.method,
                                raw.clone(),
                                answer,
                                confidence,
                                None,
                                usage,
                            )?,
                        }
                    }
                    Err(ClientError::LogprobsUnsupported) => PredictionRecord::format_error(
                        question.id(),
                        self.method,
                        raw,
                        FailureReason::MissingLogprobs,
                        response1.token_usage(),
                    ),
                    Err(error) => {
                        log::warn!("client failed on {}: {error}", question.id());
                        self.client_failure(question, FailureReason::ClientFailure)
                    }
                }
            }
        };

        record = self.judge_if_ok(question, record)?;
        Ok(record)
    }

    fn judge_if_ok(
        &self,
        question: &QuestionInstance,
        mut record: PredictionRecord,
    ) -> Result<PredictionRecord, RunError> {
        if record.is_ok() {
            let verdict = self.judge.judge_correctness(question, &record)?;
            record.set_correct(Some(verdict));
        }
        Ok(record)
    }
}

fn parse_failure_reason(error: &ParseError) -> FailureReason {
    match error {
        ParseError::MissingLogprobs => FailureReason::MissingLogprobs,
        ParseError::SpanNotFound => FailureReason::SpanNotFound,
        ParseError::Format(reason) => *reason,
        ParseError::UnparseableVerdict(_) => FailureReason::BadSchema,
    }
}

/// Reads a record log. `tolerate_partial_tail` drops (and truncates away)
/// an incomplete final line, which an interrupted run can leave behind.
fn read_records_inner(
    path: &Path,
    tolerate_partial_tail: bool,
) -> Result<Vec<PredictionRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PredictionRecord>(line) {
            Ok(record) => records.push(record),
            Err(e) => {
                if tolerate_partial_tail && i == lines.len() - 1 {
                    let keep: String = lines[..i]
                        .iter()
                        .map(|l| format!("{l}\n"))
                        .collect();
                    fs::write(path, keep).map_err(io_err(path))?;
                    break;
                }
                return Err(RunError::Log {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(records)
}

/// Reads a completed record log.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, RunError> {
    read_records_inner(path, false)
}

/// Questions from either source.
pub fn load_questions(source: &DatasetSource) -> Result<Vec<QuestionInstance>, RunError> {
    match source {
        DatasetSource::Manifest { path } => {
            let manifest = DatasetManifest::from_file(path)?;
            Ok(dataset::load(&manifest)?)
        }
        DatasetSource::Synthetic { spec, seed } => Ok(dataset::synthetic(*spec, *seed)),
    }
}

fn build_backend(config: &RunConfig) -> Result<Arc<dyn Backend>, RunError> {
    match &config.backend {
        BackendChoice::Simulated { spec } => Ok(Arc::new(SimulatedModel::new(spec.clone())?)),
        BackendChoice::Http { config: http } => {
            let mut http = http.clone();
            http.temperature = config.effective_temperature();
            let mut client = HttpClient::new(http)?;
            if let Some(path) = &config.transcript {
                client = client.with_transcript(path)?;
            }
            Ok(Arc::new(client))
        }
    }
}

fn build_judge(config: &RunConfig, run_backend: &Arc<dyn Backend>) -> Result<Judge, RunError> {
    let backend: Arc<dyn Backend> = match &config.judge {
        JudgeChoice::Same => Arc::clone(run_backend),
        JudgeChoice::Http { config: http } => {
            let mut http = http.clone();
            http.temperature = 0.0;
            Arc::new(HttpClient::new(http)?)
        }
    };
    let mut judge = Judge::new(backend);
    if let Some(templates_dir) = &config.templates_dir {
        judge = judge.with_templates(PromptTemplates::default().load_overrides(templates_dir)?);
    }
    if let Some(cache) = &config.judge_cache {
        judge = judge.with_cache_file(cache)?;
    }
    Ok(judge)
}

/// Builds the judge a config describes, without starting a run. Used by
/// the log-level judge and rubric commands.
pub fn judge_from_config(config: &RunConfig) -> Result<Judge, RunError> {
    let backend = build_backend(config)?;
    build_judge(config, &backend)
}

/// Runs the configured evaluation and writes, per method, the record log
/// (`<method>.records.jsonl`), an aggregated log when aggregation is on,
/// and the report as JSON, aligned table, and calibration CSV.
pub fn run(mut config: RunConfig) -> Result<Vec<MethodOutcome>, RunError> {
    config.normalize()?;
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let questions = load_questions(&config.dataset)?;
    if questions.is_empty() {
        return Err(RunError::Config("dataset has no questions".into()));
    }
    let index = question_index(&questions);

    let templates = match &config.templates_dir {
        Some(dir) => PromptTemplates::default().load_overrides(dir)?,
        None => PromptTemplates::default(),
    };
    let backend = build_backend(&config)?;
    let judge = build_judge(&config, &backend)?;

    let mut outcomes = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        if method.needs_logprobs() && !backend.supports_logprobs() {
            log::warn!(
                "skipping {method}: backend {} cannot return logprobs",
                backend.describe()
            );
            outcomes.push(MethodOutcome {
                method,
                report: None,
                skipped: Some("backend does not support logprobs".into()),
                records_path: None,
                aggregated_path: None,
            });
            continue;
        }
        let outcome = run_method(&config, &questions, &index, &templates, &*backend, &judge, method)?;
        outcomes.push(outcome);
    }

    let summary_path = config.output_dir.join("run_summary.json");
    let summary = serde_json::to_string_pretty(&outcomes).expect("serializable");
    fs::write(&summary_path, summary + "\n").map_err(io_err(&summary_path))?;
    Ok(outcomes)
}

fn run_method(
    config: &RunConfig,
    questions: &[QuestionInstance],
    index: &QuestionIndex,
    templates: &PromptTemplates,
    backend: &dyn Backend,
    judge: &Judge,
    method: Method,
) -> Result<MethodOutcome, RunError> {
    let slug = method_slug(method);
    let records_path = config.output_dir.join(format!("{slug}.records.jsonl"));

    let tasks: Vec<Task<'_>> = questions
        .iter()
        .flat_map(|question| (0..config.samples_per_question).map(move |s| (question, s)))
        .enumerate()
        .map(|(index, (question, sample_index))| Task {
            index,
            question,
            sample_index,
        })
        .collect();

    // resume: trust the validated prefix of the existing log
    let existing = if config.resume && records_path.exists() {
        let existing = read_records_inner(&records_path, true)?;
        if existing.len() > tasks.len() {
            return Err(RunError::Config(format!(
                "{records_path:?} holds {} records but the config only defines {} tasks",
                existing.len(),
                tasks.len()
            )));
        }
        for (record, task) in existing.iter().zip(&tasks) {
            if record.question_id() != task.question.id() || record.method() != method {
                return Err(RunError::Config(format!(
                    "{records_path:?} does not match this config at record {}; \
                     clear the output directory or fix the config",
                    task.index
                )));
            }
        }
        existing
    } else {
        Vec::new()
    };
    let start = existing.len();

    let file = if start > 0 {
        fs::OpenOptions::new()
            .append(true)
            .open(&records_path)
            .map_err(io_err(&records_path))?
    } else {
        fs::File::create(&records_path).map_err(io_err(&records_path))?
    };

    let run = MethodRun {
        templates,
        backend,
        judge,
        method,
        run_seed: config.seed,
        tolerance: DEFAULT_SUM_TOLERANCE,
    };
    let workers = config.workers.unwrap_or(4).max(1);
    let new_records = process_tasks(&run, &tasks[start..], start, file, workers)?;

    let mut records = existing;
    records.extend(new_records);

    // aggregation collapses each question's consecutive samples
    let aggregated = match &config.aggregation {
        Some(spec) => {
            let mut aggregated = Vec::with_capacity(questions.len());
            for chunk in records.chunks(config.samples_per_question) {
                match aggregate_records(chunk, spec) {
                    Ok(record) => aggregated.push(record),
                    Err(e) => log::warn!(
                        "skipping question {} in aggregation: {e}",
                        chunk.first().map(|r| r.question_id()).unwrap_or("?")
                    ),
                }
            }
            let path = config.output_dir.join(format!("{slug}.aggregated.jsonl"));
            write_records(&path, &aggregated)?;
            Some((path, aggregated))
        }
        None => None,
    };

    let scored = aggregated.as_ref().map(|(_, a)| a.as_slice()).unwrap_or(&records);
    let report = compute_report(scored, Some(index), &config.binning, config.tie_mode)?;
    write_report(&config.output_dir, &slug, &report)?;

    Ok(MethodOutcome {
        method,
        report: Some(report),
        skipped: None,
        records_path: Some(records_path),
        aggregated_path: aggregated.map(|(path, _)| path),
    })
}

fn process_tasks(
    run: &MethodRun<'_>,
    tasks: &[Task<'_>],
    seq_base: usize,
    file: fs::File,
    workers: usize,
) -> Result<Vec<PredictionRecord>, RunError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<RunError>> = Mutex::new(None);
    let (tx, rx) = mpsc::channel::<(usize, PredictionRecord)>();

    let mut writer = std::io::BufWriter::new(file);
    let mut records: Vec<PredictionRecord> = Vec::with_capacity(tasks.len());

    std::thread::scope(|scope| {
        for _ in 0..workers.min(tasks.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            let stop = &stop;
            let failure = &failure;
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                match run.process(&tasks[i]) {
                    Ok(record) => {
                        if tx.send((i, record)).is_err() {
                            break;
                        }
                    }
                    Err(error) => {
                        stop.store(true, Ordering::Relaxed);
                        let mut slot = failure.lock().expect("failure slot poisoned");
                        slot.get_or_insert(error);
                        break;
                    }
                }
            });
        }
        drop(tx);

        // reorder buffer: emit records in task order as they arrive
        let mut pending: BTreeMap<usize, PredictionRecord> = BTreeMap::new();
        let mut expected = 0usize;
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&expected) {
                if let Err(e) = write_record_line(&mut writer, seq_base + expected, &record) {
                    stop.store(true, Ordering::Relaxed);
                    failure
                        .lock()
                        .expect("failure slot poisoned")
                        .get_or_insert(e);
                    break;
                }
                records.push(record);
                expected += 1;
            }
        }
    });

    if let Some(error) = failure.into_inner().expect("failure slot poisoned") {
        // flush what we have so a resume can pick up from here
        let _ = writer.flush();
        return Err(error);
    }
    writer.flush().map_err(|source| RunError::Io {
        path: PathBuf::from("records log"),
        source,
    })?;
    Ok(records)
}

fn write_record_line<W: Write>(
    writer: &mut W,
    _seq: usize,
    record: &PredictionRecord,
) -> Result<(), RunError> {
    let line = serde_json::to_string(record).expect("records serialize");
    writer
        .write_all(line.as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .and_then(|_| writer.flush())
        .map_err(|source| RunError::Io {
            path: PathBuf::from("records log"),
            source,
        })
}

fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), RunError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_report(dir: &Path, slug: &str, report: &MetricsReport) -> Result<(), RunError> {
    let json_path = dir.join(format!("{slug}.report.json"));
    let json = serde_json::to_string_pretty(report).expect("serializable");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let table_path = dir.join(format!("{slug}.report.txt"));
    fs::write(&table_path, render_table(report)).map_err(io_err(&table_path))?;

    let csv_path = dir.join(format!("{slug}.calibration.csv"));
    fs::write(&csv_path, calibration_csv(report)).map_err(io_err(&csv_path))?;
    Ok(())
}

/// Recomputes the report from a record log. With a manifest the
/// multi-label Brier can be resolved against the gold answers; without
/// one it is omitted.
pub fn score_log(
    log: &Path,
    manifest: Option<&Path>,
    binning: &BinningSpec,
    tie: TieMode,
) -> Result<(Vec<PredictionRecord>, MetricsReport), RunError> {
    let records = read_records(log)?;
    let questions = match manifest {
        Some(path) => {
            let manifest = DatasetManifest::from_file(path)?;
            Some(question_index(&dataset::load(&manifest)?))
        }
        None => None,
    };
    let report = compute_report(&records, questions.as_ref(), binning, tie)?;
    Ok((records, report))
}

/// Fills in missing correctness verdicts on a log (exact match for known
/// spaces, the judge backend for open ones) and rewrites it atomically.
/// Returns how many records got a fresh verdict.
pub fn judge_log(log: &Path, manifest: &Path, judge: &Judge) -> Result<usize, RunError> {
    let manifest = DatasetManifest::from_file(manifest)?;
    let questions = question_index(&dataset::load(&manifest)?);
    let mut records = read_records(log)?;
    let mut judged = 0usize;
    for record in &mut records {
        if !record.is_ok() || record.correct().is_some() {
            continue;
        }
        let question = questions.get(record.question_id()).ok_or_else(|| {
            RunError::Config(format!(
                "log references question {:?} not present in the manifest",
                record.question_id()
            ))
        })?;
        let verdict = judge.judge_correctness(question, record)?;
        record.set_correct(Some(verdict));
        judged += 1;
    }
    let tmp = log.with_extension("jsonl.tmp");
    write_records(&tmp, &records)?;
    fs::rename(&tmp, log).map_err(io_err(log))?;
    Ok(judged)
}

/// Aggregates a multi-sample log: consecutive same-question records are
/// grouped (up to `spec.n` per question) and collapsed.
pub fn aggregate_log(
    log: &Path,
    spec: &AggregationSpec,
) -> Result<Vec<PredictionRecord>, RunError> {
    let records = read_records(log)?;
    let mut groups: Vec<(String, Vec<PredictionRecord>)> = Vec::new();
    for record in records {
        let id = record.question_id().to_string();
        match groups.iter_mut().find(|(gid, _)| *gid == id) {
            Some((_, group)) => group.push(record),
            None => groups.push((id, vec![record])),
        }
    }
    let mut aggregated = Vec::with_capacity(groups.len());
    for (id, group) in groups {
        let take: Vec<PredictionRecord> = group.into_iter().take(spec.n).collect();
        match aggregate_records(&take, spec) {
            Ok(record) => aggregated.push(record),
            Err(e) => log::warn!("skipping question {id} in aggregation: {e}"),
        }
    }
    Ok(aggregated)
}

/// Rubric-scores the reasoning traces of three logs (one per method),
/// joining records on question id. Only questions with an ok record in
/// all three logs are scored.
pub fn rubric_logs(
    logs: &[PathBuf; 3],
    judge: &Judge,
    seed: u64,
) -> Result<Vec<RubricOutcome>, RunError> {
    let mut per_log: Vec<Vec<PredictionRecord>> = Vec::with_capacity(3);
    for path in logs {
        per_log.push(read_records(path)?);
    }
    let methods: Vec<Method> = per_log
        .iter()
        .zip(logs)
        .map(|(records, path)| {
            records
                .first()
                .map(|r| r.method())
                .ok_or_else(|| RunError::Config(format!("{path:?} is empty")))
        })
        .collect::<Result<_, _>>()?;
    if methods[0] == methods[1] || methods[1] == methods[2] || methods[0] == methods[2] {
        return Err(RunError::Config(
            "rubric scoring needs three logs from three distinct methods".into(),
        ));
    }

    let find = |records: &[PredictionRecord], id: &str| -> Option<String> {
        records
            .iter()
            .find(|r| r.question_id() == id && r.is_ok() && !r.raw_text().is_empty())
            .map(|r| r.raw_text().to_string())
    };

    let mut outcomes = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for record in &per_log[0] {
        let id = record.question_id();
        if seen.iter().any(|s| s == id) {
            continue;
        }
        seen.push(id.to_string());
        let (Some(a), Some(b), Some(c)) = (
            find(&per_log[0], id),
            find(&per_log[1], id),
            find(&per_log[2], id),
        ) else {
            continue;
        };
        let traces = [
            (methods[0], a),
            (methods[1], b),
            (methods[2], c),
        ];
        let question_seed =
            crate::client::derive_seed(&[&seed.to_le_bytes(), id.as_bytes(), b"rubric-shuffle"]);
        outcomes.push(judge.score_rubric(id, &traces, question_seed)?);
    }
    Ok(outcomes)
}

/// Mean rubric scores per method, as an aligned table.
pub fn rubric_mean_table(outcomes: &[RubricOutcome]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for outcome in outcomes {
        for (method, _) in &outcome.scores {
            if !methods.contains(method) {
                methods.push(*method);
            }
        }
    }
    let mut out = String::from("method         n      ES      UA      LC     avg\n");
    for method in methods {
        let mut n = 0usize;
        let (mut es, mut ua, mut lc) = (0.0f64, 0.0f64, 0.0f64);
        for outcome in outcomes {
            if let Some((_, scores)) = outcome.scores.iter().find(|(m, _)| *m == method) {
                n += 1;
                es += scores.evidential_strength as f64;
                ua += scores.uncertainty_awareness as f64;
                lc += scores.logical_calibration as f64;
            }
        }
        if n == 0 {
            continue;
        }
        let (es, ua, lc) = (es / n as f64, ua / n as f64, lc / n as f64);
        out.push_str(&format!(
            "{:<13} {n:>3}  {es:>6.2}  {ua:>6.2}  {lc:>6.2}  {:>6.2}\n",
            method_slug(method),
            (es + ua + lc) / 3.0,
        ));
    }
    out
}
