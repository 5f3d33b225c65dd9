//! A deterministic simulated chat model with a controllable relationship
//! between stated confidence and actual accuracy.
//!
//! The simulator draws a confidence `c` from a configured sampler and
//! answers correctly with probability `accuracy(c)`. Every reply is
//! syntactically valid for the method implied by the prompt, so parsed
//! runs against the simulator measure exactly the configured calibration:
//! an identity accuracy curve yields a perfectly calibrated model, an
//! offset curve an overconfident one. All randomness derives from
//! `(spec seed, request seed)`, so identical requests produce
//! byte-identical responses regardless of concurrency.

use crate::client::{derive_seed, Backend, ClientError, RequestContext};
use crate::model::{
    canonicalize_answer, AnswerSpace, Method, ModelResponse, QuestionInstance,
    RubricLabel, TokenAlternative, TokenLogprob,
};
use crate::prompt::{JsonShape, PromptBundle};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Accuracy as a function of stated confidence, mapped into [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AccuracyCurve {
    /// accuracy(c) = c: a perfectly calibrated model.
    Identity,
    /// accuracy(c) = value, regardless of confidence.
    Constant { value: f64 },
    /// accuracy(c) = clamp(c + delta, 0, 1); negative delta makes the
    /// model overconfident.
    Offset { delta: f64 },
    /// Linear interpolation through (confidence, accuracy) knots sorted by
    /// confidence; clamped at the ends.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
}

impl AccuracyCurve {
    pub fn eval(&self, confidence: f64) -> f64 {
        let value = match self {
            AccuracyCurve::Identity => confidence,
            AccuracyCurve::Constant { value } => *value,
            AccuracyCurve::Offset { delta } => confidence + delta,
            AccuracyCurve::PiecewiseLinear { knots } => {
                if knots.is_empty() {
                    confidence
                } else if confidence <= knots[0].0 {
                    knots[0].1
                } else {
                    let mut result = knots[knots.len() - 1].1;
                    for window in knots.windows(2) {
                        let (x0, y0) = window[0];
                        let (x1, y1) = window[1];
                        if confidence <= x1 {
                            let t = if x1 > x0 { (confidence - x0) / (x1 - x0) } else { 1.0 };
                            result = y0 + t * (y1 - y0);
                            break;
                        }
                    }
                    result
                }
            }
        };
        value.clamp(0.0, 1.0)
    }
}

/// Distribution the stated confidence is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConfidenceSampler {
    Uniform,
    Constant { value: f64 },
    /// Uniform over a finite set of values.
    Grid { values: Vec<f64> },
}

impl ConfidenceSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ConfidenceSampler::Uniform => rng.gen::<f64>(),
            ConfidenceSampler::Constant { value } => *value,
            ConfidenceSampler::Grid { values } => {
                if values.is_empty() {
                    rng.gen::<f64>()
                } else {
                    values[rng.gen_range(0..values.len())]
                }
            }
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        let bad = |v: &f64| !(0.0..=1.0).contains(v);
        let invalid = match self {
            ConfidenceSampler::Uniform => false,
            ConfidenceSampler::Constant { value } => bad(value),
            ConfidenceSampler::Grid { values } => values.iter().any(bad),
        };
        if invalid {
            return Err(ClientError::Config(
                "confidence sampler values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Full description of a simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedModelSpec {
    pub seed: u64,
    pub accuracy: AccuracyCurve,
    pub confidence: ConfidenceSampler,
    /// Pool of wrong answers for open-ended questions. Falls back to
    /// fabricated distractors when exhausted or empty.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl SimulatedModelSpec {
    pub fn calibrated(seed: u64) -> Self {
        Self {
            seed,
            accuracy: AccuracyCurve::Identity,
            confidence: ConfidenceSampler::Uniform,
            vocabulary: Vec::new(),
        }
    }
}

pub struct SimulatedModel {
    spec: SimulatedModelSpec,
}

const FILLER_WORDS: [&str; 12] = [
    "considering",
    "the",
    "evidence",
    "suggests",
    "a",
    "likely",
    "interpretation",
    "while",
    "weighing",
    "plausible",
    "alternatives",
    "carefully",
];

impl SimulatedModel {
    pub fn new(spec: SimulatedModelSpec) -> Result<Self, ClientError> {
        spec.confidence.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SimulatedModelSpec {
        &self.spec
    }

    fn rng_for(&self, ctx: &RequestContext<'_>) -> ChaCha8Rng {
        let seed = derive_seed(&[&self.spec.seed.to_le_bytes(), &ctx.seed.to_le_bytes()]);
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Deterministic reasoning filler so completions look like prose and
    /// have method-dependent token footprints.
    fn filler(&self, rng: &mut ChaCha8Rng, sentences: usize) -> String {
        let mut out = String::new();
        for _ in 0..sentences {
            let words = rng.gen_range(8..16);
            let mut sentence: Vec<&str> = Vec::with_capacity(words);
            for _ in 0..words {
                sentence.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]);
            }
            out.push_str("Let me think: ");
            out.push_str(&sentence.join(" "));
            out.push_str(".\n");
        }
        out
    }

    /// Draws whether this sample answers correctly at confidence `c`, and
    /// the emitted answer text.
    fn draw_answer(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
        confidence: f64,
    ) -> (String, bool) {
        let correct = rng.gen_bool(self.spec.accuracy.eval(confidence));
        let answer = if correct {
            question.gold().to_string()
        } else {
            self.distractor(rng, question)
        };
        (answer, correct)
    }

    fn distractor(&self, rng: &mut ChaCha8Rng, question: &QuestionInstance) -> String {
        match question.answer_space() {
            AnswerSpace::Known(options) => {
                let gold = question.gold();
                let wrong: Vec<&str> = options
                    .iter()
                    .map(|o| o.label.as_str())
                    .filter(|label| *label != gold)
                    .collect();
                if wrong.is_empty() {
                    gold.to_string()
                } else {
                    wrong[rng.gen_range(0..wrong.len())].to_string()
                }
            }
            AnswerSpace::Open => {
                let gold_key = canonicalize_answer(question.gold());
                let pool: Vec<&String> = self
                    .spec
                    .vocabulary
                    .iter()
                    .filter(|w| canonicalize_answer(w) != gold_key)
                    .collect();
                if pool.is_empty() {
                    format!("alternative {}", rng.gen_range(0..1000))
                } else {
                    pool[rng.gen_range(0..pool.len())].clone()
                }
            }
        }
    }

    /// Wrong options/candidates besides the chosen answer.
    fn other_candidates(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
        chosen: &str,
        count: usize,
    ) -> Vec<String> {
        match question.answer_space() {
            AnswerSpace::Known(options) => options
                .iter()
                .map(|o| o.label.clone())
                .filter(|label| label != chosen)
                .take(count)
                .collect(),
            AnswerSpace::Open => {
                let chosen_key = canonicalize_answer(chosen);
                let mut seen = vec![chosen_key];
                let mut result = Vec::new();
                let mut guard = 0;
                while result.len() < count && guard < 100 {
                    guard += 1;
                    let candidate = self.distractor(rng, question);
                    let key = canonicalize_answer(&candidate);
                    if !seen.contains(&key) {
                        seen.push(key);
                        result.push(candidate);
                    }
                }
                let mut fill = 0;
                while result.len() < count {
                    result.push(format!("alternative {fill}"));
                    fill += 1;
                }
                result
            }
        }
    }

    fn respond_verb_conf(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
    ) -> ModelResponse {
        let confidence = self.spec.confidence.sample(rng);
        let (answer, _) = self.draw_answer(rng, question, confidence);
        let mut text = self.filler(rng, 2);
        text.push_str(&format!(
            "\n{}\n",
            serde_json::json!({ "final_answer": answer, "confidence": confidence })
        ));
        respond(text, None)
    }

    fn respond_topk(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
        k: usize,
    ) -> ModelResponse {
        let confidence = self.spec.confidence.sample(rng);
        let (answer, _) = self.draw_answer(rng, question, confidence);
        let others = self.other_candidates(rng, question, &answer, k.saturating_sub(1).max(1));
        let mut entries = vec![serde_json::json!({
            "candidate": answer,
            "confidence": confidence,
        })];
        let mut level = confidence;
        for other in others {
            // strictly below the previous guess, so the argmax is unambiguous
            level *= rng.gen_range(0.3..0.9);
            entries.push(serde_json::json!({
                "candidate": other,
                "confidence": level,
            }));
        }
        let mut text = self.filler(rng, 3);
        text.push_str(&format!(
            "\n{}\n",
            serde_json::Value::Array(entries)
        ));
        respond(text, None)
    }

    fn respond_distrib(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
    ) -> ModelResponse {
        // candidate list: every option for known spaces; the answer, two
        // distractors, and the mandatory fallback entry for open ones
        let open = question.is_open();
        let entry_count = match question.answer_space() {
            AnswerSpace::Known(options) => options.len(),
            AnswerSpace::Open => 4,
        };
        // an argmax probability below 1/n cannot top an n-entry
        // distribution, so lift the draw to the feasible floor
        let floor = 1.0 / entry_count as f64 + 1e-6;
        let confidence = self.spec.confidence.sample(rng).max(floor.min(1.0));
        let (answer, _) = self.draw_answer(rng, question, confidence);

        let others: Vec<String> = if open {
            let mut v = self.other_candidates(rng, question, &answer, 2);
            v.push("None of the above".to_string());
            v
        } else {
            self.other_candidates(rng, question, &answer, entry_count - 1)
        };
        let share = (1.0 - confidence) / others.len() as f64;

        // known spaces list options in letter order, as the prompt asks
        let mut entries: Vec<(String, f64)> = Vec::with_capacity(entry_count);
        entries.push((answer.clone(), confidence));
        for other in others {
            entries.push((other, share));
        }
        if !open {
            entries.sort_by(|a, b| a.0.cmp(&b.0));
        }

        let key = if open { "candidate" } else { "option" };
        let json = serde_json::Value::Array(
            entries
                .iter()
                .map(|(candidate, p)| serde_json::json!({ key: candidate, "confidence": p }))
                .collect(),
        );
        let mut text = self.filler(rng, 4);
        text.push_str(&format!("\n{json}\n"));
        respond(text, None)
    }

    fn respond_answer_line(
        &self,
        rng: &mut ChaCha8Rng,
        question: &QuestionInstance,
        with_logprobs: bool,
    ) -> ModelResponse {
        let confidence = self.spec.confidence.sample(rng).max(1e-12);
        let (answer, _) = self.draw_answer(rng, question, confidence);
        let prefix = format!("{}\nFinal answer: ", self.filler(rng, 2));
        let text = format!("{prefix}{answer}");
        if !with_logprobs {
            return respond(text, None);
        }

        // tokenize: filler tokens are certain, answer tokens carry ln(c)
        let mut tokens = tokenize(&prefix, 0, 0.0);
        let answer_logprob = confidence.ln() / answer_tokens(&answer).max(1) as f64;
        tokens.extend(tokenize_answer(&answer, prefix.len(), answer_logprob));
        respond(text, Some(tokens))
    }

    fn respond_ptrue(&self, rng: &mut ChaCha8Rng, bundle: &PromptBundle, ctx: &RequestContext<'_>) -> ModelResponse {
        // recover the embedded final answer from the judgment prompt and
        // compare it against the gold to know what is being judged
        let correct = match (crate::parse::final_answer_span(&bundle.user), ctx.question) {
            (Some((_, answer)), Some(question)) => {
                question.answer_key(answer) == question.gold_key()
            }
            _ => false,
        };
        // sample the stated True-probability from the conditional
        // distribution given correctness, so that the joint of
        // (confidence, correctness) matches the configured curves
        let mut confidence = 0.5;
        for _ in 0..1000 {
            let draw = self.spec.confidence.sample(rng);
            let accept = self.spec.accuracy.eval(draw);
            let accept = if correct { accept } else { 1.0 - accept };
            confidence = draw;
            if rng.gen_bool(accept.clamp(0.0, 1.0)) {
                break;
            }
        }
        let confidence = confidence.clamp(1e-9, 1.0 - 1e-9);
        let token = if confidence >= 0.5 { "True" } else { "False" };
        let own = confidence.max(1.0 - confidence);
        let logprobs = vec![TokenLogprob {
            token: token.to_string(),
            logprob: own.ln(),
            offset: 0,
            top_alternatives: vec![
                TokenAlternative {
                    token: "True".into(),
                    logprob: confidence.ln(),
                },
                TokenAlternative {
                    token: "False".into(),
                    logprob: (1.0 - confidence).ln(),
                },
            ],
        }];
        respond(token.to_string(), Some(logprobs))
    }

    fn respond_judge(&self, bundle: &PromptBundle, ctx: &RequestContext<'_>) -> ModelResponse {
        let verdict = judge_sections(&bundle.user)
            .map(|(gold, prediction)| match ctx.question {
                Some(q) => q.answer_key(&prediction) == q.answer_key(&gold),
                None => canonicalize_answer(&prediction) == canonicalize_answer(&gold),
            })
            .unwrap_or(false);
        respond(if verdict { "yes" } else { "no" }.to_string(), None)
    }

    fn respond_rubric(&self, rng: &mut ChaCha8Rng) -> ModelResponse {
        let mut sections = serde_json::Map::new();
        for label in RubricLabel::ALL {
            sections.insert(
                label.title().to_string(),
                serde_json::json!({
                    "Evidential Strength": rng.gen_range(1..=5),
                    "Uncertainty Awareness": rng.gen_range(1..=5),
                    "Logical Calibration": rng.gen_range(1..=5),
                }),
            );
        }
        let text = format!(
            "Considering each process in turn.\n{}",
            serde_json::Value::Object(sections)
        );
        respond(text, None)
    }
}

fn answer_tokens(answer: &str) -> usize {
    answer.split_whitespace().count()
}

/// Splits text into whitespace-delimited chunks (each carrying its
/// trailing spaces) with byte offsets.
fn tokenize(text: &str, base_offset: usize, logprob: f64) -> Vec<TokenLogprob> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        // advance through one word and its trailing whitespace
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        tokens.push(TokenLogprob {
            token: text[start..i].to_string(),
            logprob,
            offset: base_offset + start,
            top_alternatives: vec![],
        });
        start = i;
    }
    tokens
}

fn tokenize_answer(answer: &str, base_offset: usize, logprob: f64) -> Vec<TokenLogprob> {
    tokenize(answer, base_offset, logprob)
}

fn judge_sections(prompt: &str) -> Option<(String, String)> {
    let gold_start = prompt.find("Ground Truth:")? + "Ground Truth:".len();
    let pred_marker = prompt[gold_start..].find("Prediction:")?;
    let gold = prompt[gold_start..gold_start + pred_marker].trim().to_string();
    let pred_start = gold_start + pred_marker + "Prediction:".len();
    let tail = &prompt[pred_start..];
    let end = tail.find("Is the prediction correct").unwrap_or(tail.len());
    let prediction = tail[..end].trim().to_string();
    Some((gold, prediction))
}

fn respond(text: String, logprobs: Option<Vec<TokenLogprob>>) -> ModelResponse {
    let tokens = text.split_whitespace().count() as u64;
    ModelResponse::new(text, tokens, logprobs).expect("simulated logprobs are valid")
}

impl Backend for SimulatedModel {
    fn complete(
        &self,
        bundle: &PromptBundle,
        ctx: &RequestContext<'_>,
    ) -> Result<ModelResponse, ClientError> {
        let mut rng = self.rng_for(ctx);
        let response = match bundle.expects_json {
            JsonShape::YesNo => self.respond_judge(bundle, ctx),
            JsonShape::RubricObject => self.respond_rubric(&mut rng),
            JsonShape::SingleObject => {
                let question = ctx.question.ok_or_else(|| {
                    ClientError::BadPayload("simulator needs the question for elicitation".into())
                })?;
                self.respond_verb_conf(&mut rng, question)
            }
            JsonShape::Array => {
                let question = ctx.question.ok_or_else(|| {
                    ClientError::BadPayload("simulator needs the question for elicitation".into())
                })?;
                match ctx.method {
                    Some(Method::VerbTopK { k }) => self.respond_topk(&mut rng, question, k.max(2)),
                    _ => self.respond_distrib(&mut rng, question),
                }
            }
            JsonShape::FreeText => {
                if bundle.expects_logprobs && ctx.method == Some(Method::PTrue) {
                    self.respond_ptrue(&mut rng, bundle, ctx)
                } else {
                    let question = ctx.question.ok_or_else(|| {
                        ClientError::BadPayload(
                            "simulator needs the question for elicitation".into(),
                        )
                    })?;
                    self.respond_answer_line(&mut rng, question, bundle.expects_logprobs)
                }
            }
        };
        Ok(response)
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("simulated model (seed {})", self.spec.seed)
    }
}
