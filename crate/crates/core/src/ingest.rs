//! Loading the canonical JSON Lines dataset format, user sampling, the
//! persona/test split, and opinion statement rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::survey::{
    validate, AnswerChoice, Question, Response, SurveyDataset, Topic, UserProfile, Violation,
    REFUSAL_TEXT,
};
use crate::template::{Template, TemplateError};

/// Default ratio of a user's responses held in as their persona.
pub const DEFAULT_PERSONA_RATIO: f64 = 0.2;

/// Built-in collapse-group mapping for common ordinal scales.
pub const DEFAULT_COLLAPSE_GROUPS_JSON: &str = include_str!("../data/default_collapse_groups.json");

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("dataset failed validation with {} violation(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<Violation>),
    #[error("unknown topic \"{0}\"")]
    UnknownTopic(String),
    #[error("user \"{user_id}\" has {count} response(s) in topic \"{topic_id}\", need at least 2 to split")]
    TooFewResponses {
        user_id: String,
        topic_id: String,
        count: usize,
    },
    #[error("unknown opinion template \"{0}\"")]
    UnknownTemplate(String),
    #[error("choice {choice_index} (\"{choice_text}\") does not belong to question \"{question_id}\"")]
    ChoiceMismatch {
        question_id: String,
        choice_index: usize,
        choice_text: String,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn schema_err(line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
struct RawChoice {
    text: String,
    #[serde(default)]
    collapse_group: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawRecord {
    Topic {
        id: String,
        name: String,
    },
    Question {
        id: String,
        topic_id: String,
        text: String,
        choices: Vec<RawChoice>,
        #[serde(default)]
        refusal_text: Option<String>,
    },
    User {
        id: String,
        demographics: BTreeMap<String, String>,
        ideology: BTreeMap<String, String>,
    },
    Response {
        user_id: String,
        question_id: String,
        choice_index: usize,
    },
}

/// Parses the JSON Lines dataset format without running invariant validation.
///
/// Schema failures (malformed JSON, missing fields, unknown `kind`, duplicate
/// ids) report the 1-based line number. Blank lines are skipped; a file with
/// no records at all is a schema error.
pub fn parse_dataset(path: &Path) -> Result<SurveyDataset, IngestError> {
    let file = std::fs::File::open(path)?;
    let mut dataset = parse_dataset_reader(std::io::BufReader::new(file))?;
    dataset.provenance = format!("loaded from {}", path.display());
    Ok(dataset)
}

/// Reader-based variant of [`parse_dataset`].
pub fn parse_dataset_reader<R: BufRead>(reader: R) -> Result<SurveyDataset, IngestError> {
    let mut dataset = SurveyDataset::default();
    let mut seen_ids: HashSet<(&'static str, String)> = HashSet::new();
    let mut records = 0usize;

    for (zero_line, line) in reader.lines().enumerate() {
        let line_no = zero_line + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| schema_err(line_no, e.to_string()))?;
        records += 1;
        match record {
            RawRecord::Topic { id, name } => {
                if !seen_ids.insert(("topic", id.clone())) {
                    return Err(schema_err(line_no, format!("duplicate topic id \"{id}\"")));
                }
                dataset.topics.push(Topic { id, name });
            }
            RawRecord::Question {
                id,
                topic_id,
                text,
                choices,
                refusal_text,
            } => {
                if !seen_ids.insert(("question", id.clone())) {
                    return Err(schema_err(line_no, format!("duplicate question id \"{id}\"")));
                }
                if choices.len() > 26 {
                    return Err(schema_err(
                        line_no,
                        format!("question \"{id}\" has {} choices; letter labels stop at 26", choices.len()),
                    ));
                }
                let choices: Vec<AnswerChoice> = choices
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| AnswerChoice::new(i, c.text, c.collapse_group))
                    .collect();
                let refusal_index = match refusal_text {
                    Some(marker) => Some(
                        choices
                            .iter()
                            .position(|c| c.text == marker)
                            .ok_or_else(|| {
                                schema_err(
                                    line_no,
                                    format!("refusal_text \"{marker}\" matches no choice of question \"{id}\""),
                                )
                            })?,
                    ),
                    None => choices.iter().position(|c| c.text == REFUSAL_TEXT),
                };
                dataset.questions.push(Question {
                    id,
                    topic_id,
                    text,
                    choices,
                    refusal_index,
                });
            }
            RawRecord::User {
                id,
                demographics,
                ideology,
            } => {
                if !seen_ids.insert(("user", id.clone())) {
                    return Err(schema_err(line_no, format!("duplicate user id \"{id}\"")));
                }
                dataset.users.push(UserProfile {
                    id,
                    demographics,
                    ideology,
                });
            }
            RawRecord::Response {
                user_id,
                question_id,
                choice_index,
            } => {
                dataset.responses.push(Response {
                    user_id,
                    question_id,
                    choice_index,
                });
            }
        }
    }

    if records == 0 {
        return Err(schema_err(0, "no records"));
    }
    Ok(dataset)
}

/// Loads and validates a dataset; any invariant violation rejects the file.
pub fn load_dataset(path: &Path) -> Result<SurveyDataset, IngestError> {
    let dataset = parse_dataset(path)?;
    let violations = validate(&dataset);
    if violations.is_empty() {
        Ok(dataset)
    } else {
        Err(IngestError::Validation(violations))
    }
}

/// Fills missing collapse groups from a `choice text -> group` mapping.
///
/// Only questions where no choice has a group are touched, and only when
/// every non-refusal choice text is covered by the mapping; partial coverage
/// would break the all-or-none invariant, so those questions are skipped.
/// Returns the ids of the questions that were updated.
pub fn apply_collapse_groups(
    dataset: &mut SurveyDataset,
    mapping: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut updated = Vec::new();
    for question in &mut dataset.questions {
        if question.has_collapse_groups() {
            continue;
        }
        let coverable = question
            .choices
            .iter()
            .filter(|c| Some(c.index) != question.refusal_index)
            .all(|c| mapping.contains_key(&c.text));
        if !coverable {
            continue;
        }
        for choice in &mut question.choices {
            if Some(choice.index) != question.refusal_index {
                choice.collapse_group = mapping.get(&choice.text).cloned();
            }
        }
        updated.push(question.id.clone());
    }
    updated
}

/// The bundled default collapse-group mapping.
pub fn default_collapse_groups() -> BTreeMap<String, String> {
    serde_json::from_str(DEFAULT_COLLAPSE_GROUPS_JSON)
        .expect("bundled collapse group mapping is valid JSON")
}

/// Uniform sample without replacement among users with at least one response
/// in the topic. Deterministic given the seed; returns all eligible users
/// when fewer than `n` exist.
pub fn sample_users(
    dataset: &SurveyDataset,
    topic_id: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<UserProfile>, IngestError> {
    if dataset.topic(topic_id).is_none() {
        return Err(IngestError::UnknownTopic(topic_id.to_string()));
    }
    let topic_questions: HashSet<&str> = dataset
        .questions
        .iter()
        .filter(|q| q.topic_id == topic_id)
        .map(|q| q.id.as_str())
        .collect();
    let mut answered: HashSet<&str> = HashSet::new();
    for response in &dataset.responses {
        if topic_questions.contains(response.question_id.as_str()) {
            answered.insert(response.user_id.as_str());
        }
    }
    let mut eligible: Vec<&UserProfile> = dataset
        .users
        .iter()
        .filter(|u| answered.contains(u.id.as_str()))
        .collect();
    eligible.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["sample-users", topic_id]));
    eligible.shuffle(&mut rng);
    eligible.truncate(n);
    Ok(eligible.into_iter().cloned().collect())
}

/// A user's responses in one topic, partitioned into held-in persona
/// responses and held-out test responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaSplit {
    pub user_id: String,
    pub topic_id: String,
    /// Held-in responses, in dataset order.
    pub persona_responses: Vec<Response>,
    /// Held-out responses, in dataset order.
    pub test_responses: Vec<Response>,
    pub seed: u64,
}

/// Splits a user's topic responses into persona and test sets.
///
/// The persona gets `max(1, floor(ratio * total))` responses, drawn uniformly
/// with a sub-seed derived from `(seed, user, topic)`, so every user's split
/// is stable regardless of iteration order. Both halves keep dataset order.
pub fn split_persona(
    dataset: &SurveyDataset,
    user_id: &str,
    topic_id: &str,
    ratio: f64,
    seed: u64,
) -> Result<PersonaSplit, IngestError> {
    let responses = dataset.user_responses_in_topic(user_id, topic_id);
    let total = responses.len();
    if total < 2 {
        return Err(IngestError::TooFewResponses {
            user_id: user_id.to_string(),
            topic_id: topic_id.to_string(),
            count: total,
        });
    }
    let persona_count = ((ratio * total as f64).floor() as usize).max(1);

    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["persona-split", user_id, topic_id]));
    order.shuffle(&mut rng);
    let persona_set: HashSet<usize> = order.into_iter().take(persona_count).collect();

    let mut persona_responses = Vec::with_capacity(persona_count);
    let mut test_responses = Vec::with_capacity(total - persona_count);
    for (i, response) in responses.into_iter().enumerate() {
        if persona_set.contains(&i) {
            persona_responses.push(response.clone());
        } else {
            test_responses.push(response.clone());
        }
    }
    Ok(PersonaSplit {
        user_id: user_id.to_string(),
        topic_id: topic_id.to_string(),
        persona_responses,
        test_responses,
        seed,
    })
}

/// One past response rendered as a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpinionStatement {
    pub user_id: String,
    pub question_id: String,
    pub text: String,
    pub source_choice_index: usize,
}

/// Renders responses into opinion sentences through named templates.
///
/// The default template quotes the question stem and the chosen answer;
/// custom declarative templates can be registered with the same
/// `{question}` / `{choice}` placeholders.
#[derive(Debug, Clone)]
pub struct OpinionRenderer {
    templates: BTreeMap<String, Template>,
}

pub const DEFAULT_OPINION_TEMPLATE_ID: &str = "default";
const OPINION_PLACEHOLDERS: [&str; 2] = ["question", "choice"];

impl Default for OpinionRenderer {
    fn default() -> Self {
        let mut renderer = Self {
            templates: BTreeMap::new(),
        };
        renderer
            .register(
                DEFAULT_OPINION_TEMPLATE_ID,
                "When asked \"{question}\", this person answered: \"{choice}\".",
            )
            .expect("built-in opinion template parses");
        renderer
    }
}

impl OpinionRenderer {
    pub fn register(&mut self, template_id: &str, text: &str) -> Result<(), IngestError> {
        let template = Template::parse(template_id, text, &OPINION_PLACEHOLDERS)?;
        self.templates.insert(template_id.to_string(), template);
        Ok(())
    }

    /// Renders one (question, chosen choice) pair into an [`OpinionStatement`].
    pub fn render_opinion(
        &self,
        user_id: &str,
        question: &Question,
        choice: &AnswerChoice,
        template_id: &str,
    ) -> Result<OpinionStatement, IngestError> {
        let owned = question.choices.get(choice.index);
        if owned != Some(choice) {
            return Err(IngestError::ChoiceMismatch {
                question_id: question.id.clone(),
                choice_index: choice.index,
                choice_text: choice.text.clone(),
            });
        }
        let template = self
            .templates
            .get(template_id)
            .ok_or_else(|| IngestError::UnknownTemplate(template_id.to_string()))?;
        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("question", question.text.clone());
        values.insert("choice", choice.text.clone());
        Ok(OpinionStatement {
            user_id: user_id.to_string(),
            question_id: question.id.clone(),
            text: template.render(&values),
            source_choice_index: choice.index,
        })
    }

    /// Renders every persona response of a split, in dataset order.
    pub fn render_persona(
        &self,
        dataset: &SurveyDataset,
        split: &PersonaSplit,
        template_id: &str,
    ) -> Result<Vec<OpinionStatement>, IngestError> {
        let questions: HashMap<&str, &Question> =
            dataset.questions.iter().map(|q| (q.id.as_str(), q)).collect();
        split
            .persona_responses
            .iter()
            .map(|response| {
                let question = questions
                    .get(response.question_id.as_str())
                    .unwrap_or_else(|| panic!("validated dataset has question {}", response.question_id));
                self.render_opinion(
                    &split.user_id,
                    question,
                    &question.choices[response.choice_index],
                    template_id,
                )
            })
            .collect()
    }
}
