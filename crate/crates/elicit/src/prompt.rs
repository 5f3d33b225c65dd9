//! Prompt construction for the five elicitation methods, the p(True)
//! judgment, the correctness judge, and the reasoning rubric.
//!
//! Templates are plain-text files with `{name}` placeholders. The builtin
//! set lives under `templates/` and is compiled in; any template can be
//! overridden from a directory at runtime. Construction is deterministic:
//! identical inputs give byte-identical prompts.

use crate::model::{AnswerSpace, Method, ModelResponse, QuestionInstance, RubricLabel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("rubric prompts take exactly three traces, got {0}")]
    WrongArity(usize),
    #[error("top-k prompts require k >= 2, got {0}")]
    BadTopK(usize),
    #[error("template {template:?} references unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("failed to read template override {path:?}: {source}")]
    TemplateIo {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// The JSON payload a prompt asks the model to end with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsonShape {
    /// One object, e.g. `{"final_answer": ..., "confidence": ...}`.
    SingleObject,
    /// An array of candidate/confidence objects.
    Array,
    /// A bare yes/no verdict.
    YesNo,
    /// The rubric score dictionary.
    RubricObject,
    /// No JSON at all (chain of thought plus a final-answer line).
    FreeText,
}

/// A fully rendered prompt with its expected response characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system: Option<String>,
    pub user: String,
    pub expects_logprobs: bool,
    pub expects_json: JsonShape,
}

macro_rules! template_fields {
    ($($field:ident => $file:literal),+ $(,)?) => {
        /// The full template set, one entry per prompt kind.
        #[derive(Debug, Clone)]
        pub struct PromptTemplates {
            $(pub $field: String),+
        }

        impl Default for PromptTemplates {
            fn default() -> Self {
                Self {
                    $($field: include_str!(concat!("../templates/", $file)).to_string()),+
                }
            }
        }

        impl PromptTemplates {
            /// Replaces any template that has a same-named `.txt` file in
            /// `dir`, leaving the rest builtin.
            pub fn load_overrides(mut self, dir: &Path) -> Result<Self, PromptError> {
                $(
                    let path = dir.join($file);
                    if path.exists() {
                        self.$field = fs::read_to_string(&path)
                            .map_err(|source| PromptError::TemplateIo { path, source })?;
                    }
                )+
                Ok(self)
            }
        }
    };
}

template_fields! {
    verb_conf_open => "verb_conf_open.txt",
    verb_conf_known => "verb_conf_known.txt",
    verb_topk_open => "verb_topk_open.txt",
    verb_topk_known => "verb_topk_known.txt",
    verb_distrib_open => "verb_distrib_open.txt",
    verb_distrib_known => "verb_distrib_known.txt",
    answer_open => "answer_open.txt",
    answer_known => "answer_known.txt",
    ptrue => "ptrue.txt",
    judge => "judge.txt",
    rubric => "rubric.txt",
}

/// Single-pass placeholder substitution. A `{name}` token made of
/// lowercase letters and underscores is replaced from `values`; anything
/// else (JSON braces in particular) passes through verbatim. Substituted
/// values are never rescanned.
fn render(
    template_name: &str,
    template: &str,
    values: &[(&str, &str)],
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let token_len = after
            .bytes()
            .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
            .count();
        if token_len > 0 && after.as_bytes().get(token_len) == Some(&b'}') {
            let name = &after[..token_len];
            match values.iter().find(|(key, _)| *key == name) {
                Some((_, value)) => out.push_str(value),
                None => {
                    return Err(PromptError::UnknownPlaceholder {
                        template: template_name.to_string(),
                        name: name.to_string(),
                    })
                }
            }
            rest = &after[token_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn render_options(question: &QuestionInstance) -> String {
    match question.answer_space() {
        AnswerSpace::Known(options) => options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n"),
        AnswerSpace::Open => String::new(),
    }
}

fn ordinal(n: usize) -> String {
    const WORDS: [&str; 10] = [
        "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
        "tenth",
    ];
    match WORDS.get(n - 1) {
        Some(word) => (*word).to_string(),
        None => format!("{n}-th"),
    }
}

/// JSON array skeleton shown in the top-k prompt, one entry per guess.
fn topk_skeleton(k: usize, key: &str, noun: &str) -> String {
    let mut out = String::from("[\n");
    for i in 1..=k {
        out.push_str(&format!(
            "{{\n \"{key}\": \"{} most likely {noun}\",\n \"confidence\": \"0-1\"\n}}{}\n",
            ordinal(i),
            if i < k { "," } else { "" },
        ));
    }
    out.push(']');
    out
}

impl PromptTemplates {
    /// Renders the elicitation prompt for `method` against `question`.
    ///
    /// Known answer spaces get their options as lettered lines; the
    /// distribution prompt then asks for one probability per option. Open
    /// spaces use the free-form wording, and the distribution prompt
    /// additionally demands a "None of the above" candidate. Logit wants
    /// token logprobs; p(True)'s first stage is the same plain answer
    /// prompt without them.
    pub fn elicitation(
        &self,
        question: &QuestionInstance,
        method: Method,
    ) -> Result<PromptBundle, PromptError> {
        let open = question.is_open();
        let options = render_options(question);
        let base_values = [("question", question.question()), ("options", &*options)];

        let (template_name, template, expects_logprobs, expects_json, extra): (
            &str,
            &str,
            bool,
            JsonShape,
            Option<(String, String)>,
        ) = match method {
            Method::VerbConf => (
                if open {
                    "verb_conf_open"
                } else {
                    "verb_conf_known"
                },
                if open {
                    &self.verb_conf_open
                } else {
                    &self.verb_conf_known
                },
                false,
                JsonShape::SingleObject,
                None,
            ),
            Method::VerbTopK { k } => {
                if k < 2 {
                    return Err(PromptError::BadTopK(k));
                }
                let skeleton = if open {
                    topk_skeleton(k, "candidate", "answer")
                } else {
                    topk_skeleton(k, "option", "option letter")
                };
                (
                    if open {
                        "verb_topk_open"
                    } else {
                        "verb_topk_known"
                    },
                    if open {
                        &self.verb_topk_open
                    } else {
                        &self.verb_topk_known
                    },
                    false,
                    JsonShape::Array,
                    Some((k.to_string(), skeleton)),
                )
            }
            Method::VerbDistrib => (
                if open {
                    "verb_distrib_open"
                } else {
                    "verb_distrib_known"
                },
                if open {
                    &self.verb_distrib_open
                } else {
                    &self.verb_distrib_known
                },
                false,
                JsonShape::Array,
                None,
            ),
            Method::Logit => (
                if open { "answer_open" } else { "answer_known" },
                if open {
                    &self.answer_open
                } else {
                    &self.answer_known
                },
                true,
                JsonShape::FreeText,
                None,
            ),
            Method::PTrue => (
                if open { "answer_open" } else { "answer_known" },
                if open {
                    &self.answer_open
                } else {
                    &self.answer_known
                },
                false,
                JsonShape::FreeText,
                None,
            ),
        };

        let user = match &extra {
            Some((k, skeleton)) => {
                let mut values = base_values.to_vec();
                values.push(("k", k));
                values.push(("skeleton", skeleton));
                render(template_name, template, &values)?
            }
            None => render(template_name, template, &base_values)?,
        };
        Ok(PromptBundle {
            system: None,
            user,
            expects_logprobs,
            expects_json,
        })
    }

    /// Prompt asking the model to judge its own prior response with a
    /// single True/False token; confidence is read from that token's
    /// logprobs.
    pub fn ptrue_judgment(
        &self,
        question: &QuestionInstance,
        prior_response: &ModelResponse,
    ) -> Result<PromptBundle, PromptError> {
        let user = render(
            "ptrue",
            &self.ptrue,
            &[
                ("question", question.question()),
                ("response", prior_response.raw_text()),
            ],
        )?;
        Ok(PromptBundle {
            system: None,
            user,
            expects_logprobs: true,
            expects_json: JsonShape::FreeText,
        })
    }

    /// Correctness-judge prompt with Question / Ground Truth / Prediction
    /// sections.
    pub fn judge(
        &self,
        question: &QuestionInstance,
        prediction: &str,
    ) -> Result<PromptBundle, PromptError> {
        let user = render(
            "judge",
            &self.judge,
            &[
                ("question", question.question()),
                ("gold", question.gold()),
                ("prediction", prediction),
            ],
        )?;
        Ok(PromptBundle {
            system: None,
            user,
            expects_logprobs: false,
            expects_json: JsonShape::YesNo,
        })
    }

    /// Rubric prompt over exactly three traces, shown as Method A/B/C in
    /// the given order.
    pub fn rubric(&self, traces: &[&str]) -> Result<PromptBundle, PromptError> {
        if traces.len() != 3 {
            return Err(PromptError::WrongArity(traces.len()));
        }
        let user = render(
            "rubric",
            &self.rubric,
            &[
                ("method_a", traces[0]),
                ("method_b", traces[1]),
                ("method_c", traces[2]),
            ],
        )?;
        Ok(PromptBundle {
            system: None,
            user,
            expects_logprobs: false,
            expects_json: JsonShape::RubricObject,
        })
    }
}

/// Ready-made free functions over the builtin templates.
pub fn build_elicitation_prompt(
    question: &QuestionInstance,
    method: Method,
) -> Result<PromptBundle, PromptError> {
    PromptTemplates::default().elicitation(question, method)
}

pub fn build_ptrue_prompt(
    question: &QuestionInstance,
    prior_response: &ModelResponse,
) -> Result<PromptBundle, PromptError> {
    PromptTemplates::default().ptrue_judgment(question, prior_response)
}

pub fn build_judge_prompt(
    question: &QuestionInstance,
    prediction: &str,
) -> Result<PromptBundle, PromptError> {
    PromptTemplates::default().judge(question, prediction)
}

pub fn build_rubric_prompt(traces: &[&str]) -> Result<PromptBundle, PromptError> {
    PromptTemplates::default().rubric(traces)
}

/// Which method ended up in each anonymized rubric slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricAssignment {
    pub seed: u64,
    /// `slots[i]` is the method shown under `RubricLabel::ALL[i]`.
    pub slots: [Method; 3],
}

impl RubricAssignment {
    /// Randomizes which method appears as Method A/B/C. The seed is
    /// recorded so the shuffle can be replayed and audited.
    pub fn shuffled(methods: [Method; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = methods;
        slots.shuffle(&mut rng);
        Self { seed, slots }
    }

    pub fn method_for(&self, label: RubricLabel) -> Method {
        let idx = RubricLabel::ALL.iter().position(|l| *l == label).unwrap();
        self.slots[idx]
    }

    pub fn label_for(&self, method: Method) -> Option<RubricLabel> {
        self.slots
            .iter()
            .position(|m| *m == method)
            .map(|idx| RubricLabel::ALL[idx])
    }
}
