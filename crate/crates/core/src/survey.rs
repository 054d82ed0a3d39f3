//! Canonical in-memory representation of a survey dataset and shared domain types.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// The closed set of demographic attributes, in canonical prompt order.
pub const DEMOGRAPHIC_ATTRIBUTES: [&str; 10] = [
    "Age",
    "Citizenship",
    "Region",
    "Education",
    "Income",
    "Marital status",
    "Race",
    "Religion",
    "Frequency of religious attendance",
    "Gender",
];

/// The two ideology attributes, in canonical prompt order.
pub const IDEOLOGY_ATTRIBUTES: [&str; 2] = ["Political ideology", "Political party"];

/// Accepted values for the "Political party" ideology attribute.
pub const PARTY_VALUES: [&str; 5] = ["Republican", "Democrat", "Independent", "Other", "Refused"];

/// Text that marks a refusal choice.
pub const REFUSAL_TEXT: &str = "Refused";

/// One answer choice of a multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerChoice {
    /// 0-based position within the question.
    pub index: usize,
    /// Single uppercase letter, `A` for index 0.
    pub label: char,
    pub text: String,
    /// Coarse group this choice collapses into, if the question defines one.
    pub collapse_group: Option<String>,
}

impl AnswerChoice {
    pub fn new(index: usize, text: impl Into<String>, collapse_group: Option<String>) -> Self {
        Self {
            index,
            label: label_for_index(index),
            text: text.into(),
            collapse_group,
        }
    }
}

/// Letter label for a 0-based choice index (`0 -> 'A'`).
pub fn label_for_index(index: usize) -> char {
    debug_assert!(index < 26, "choice index {index} has no letter label");
    (b'A' + index as u8) as char
}

/// A survey question with its ordered answer choices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub topic_id: String,
    /// Question stem, without answer choices.
    pub text: String,
    pub choices: Vec<AnswerChoice>,
    /// Index of the "Refused" choice, when the question has one.
    pub refusal_index: Option<usize>,
}

impl Question {
    /// Whether the question defines collapse groups on its non-refusal choices.
    pub fn has_collapse_groups(&self) -> bool {
        self.choices.iter().any(|c| c.collapse_group.is_some())
    }

    /// Choices rendered into prompts: all of them, or all but the refusal choice.
    pub fn visible_choices(&self, include_refusal: bool) -> Vec<&AnswerChoice> {
        self.choices
            .iter()
            .filter(|c| include_refusal || Some(c.index) != self.refusal_index)
            .collect()
    }
}

/// A survey respondent with demographic and ideology attributes.
///
/// Both attribute sets are kept as raw maps so that `validate` can report
/// unknown or missing keys instead of dropping them at parse time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    pub demographics: BTreeMap<String, String>,
    pub ideology: BTreeMap<String, String>,
}

impl UserProfile {
    /// Value of the "Political ideology" attribute, if present.
    pub fn political_ideology(&self) -> Option<&str> {
        self.ideology.get(IDEOLOGY_ATTRIBUTES[0]).map(String::as_str)
    }

    /// Value of the "Political party" attribute, if present.
    pub fn political_party(&self) -> Option<&str> {
        self.ideology.get(IDEOLOGY_ATTRIBUTES[1]).map(String::as_str)
    }
}

/// One user's answer to one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub user_id: String,
    pub question_id: String,
    pub choice_index: usize,
}

/// A survey topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub name: String,
}

/// The ground-truth store: topics, questions, users and responses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurveyDataset {
    pub topics: Vec<Topic>,
    pub questions: Vec<Question>,
    pub users: Vec<UserProfile>,
    pub responses: Vec<Response>,
    /// Free-text source note.
    pub provenance: String,
}

impl SurveyDataset {
    pub fn topic(&self, id: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.id == id)
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn user(&self, id: &str) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.id == id)
    }

    /// Questions belonging to a topic, in dataset order.
    pub fn questions_in_topic(&self, topic_id: &str) -> Vec<&Question> {
        self.questions.iter().filter(|q| q.topic_id == topic_id).collect()
    }

    /// A user's responses to questions of one topic, in dataset order.
    pub fn user_responses_in_topic(&self, user_id: &str, topic_id: &str) -> Vec<&Response> {
        let topic_questions: HashSet<&str> = self
            .questions
            .iter()
            .filter(|q| q.topic_id == topic_id)
            .map(|q| q.id.as_str())
            .collect();
        self.responses
            .iter()
            .filter(|r| r.user_id == user_id && topic_questions.contains(r.question_id.as_str()))
            .collect()
    }

    /// Responses to one question, in dataset order.
    pub fn responses_to_question(&self, question_id: &str) -> Vec<&Response> {
        self.responses.iter().filter(|r| r.question_id == question_id).collect()
    }
}

/// A broken dataset invariant. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Id of the offending entity (question id, user id, or `user/question` for responses).
    pub entity_id: String,
    pub rule: String,
}

impl Violation {
    fn new(entity_id: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            entity_id: entity_id.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity_id, self.rule)
    }
}

/// Checks every type invariant and returns the list of violations.
///
/// An empty list means the dataset is safe for all downstream modules:
/// no dangling references, no out-of-range choice indices, no duplicate
/// responses. Idempotent and side-effect free.
pub fn validate(dataset: &SurveyDataset) -> Vec<Violation> {
    let mut violations = Vec::new();

    let mut topic_ids = HashSet::new();
    for topic in &dataset.topics {
        if !topic_ids.insert(topic.id.as_str()) {
            violations.push(Violation::new(&topic.id, "duplicate topic id"));
        }
    }

    let mut question_ids = HashSet::new();
    for question in &dataset.questions {
        let qid = question.id.as_str();
        if !question_ids.insert(qid) {
            violations.push(Violation::new(qid, "duplicate question id"));
        }
        if !topic_ids.contains(question.topic_id.as_str()) {
            violations.push(Violation::new(
                qid,
                format!("topic_id \"{}\" does not exist", question.topic_id),
            ));
        }
        if question.choices.len() < 2 {
            violations.push(Violation::new(qid, "fewer than 2 choices"));
        }
        for (position, choice) in question.choices.iter().enumerate() {
            if choice.index != position {
                violations.push(Violation::new(
                    qid,
                    format!("choice at position {position} carries index {}", choice.index),
                ));
            }
            if position < 26 && choice.label != label_for_index(position) {
                violations.push(Violation::new(
                    qid,
                    format!(
                        "choice {position} labeled '{}', expected '{}'",
                        choice.label,
                        label_for_index(position)
                    ),
                ));
            }
        }
        match question.refusal_index {
            Some(idx) if idx >= question.choices.len() => {
                violations.push(Violation::new(qid, format!("refusal_index {idx} out of range")));
            }
            Some(idx) if question.choices[idx].text != REFUSAL_TEXT => {
                violations.push(Violation::new(
                    qid,
                    format!("refusal_index points at \"{}\", not \"{REFUSAL_TEXT}\"", question.choices[idx].text),
                ));
            }
            _ => {}
        }
        if question.has_collapse_groups() {
            for choice in &question.choices {
                let is_refusal = Some(choice.index) == question.refusal_index;
                if !is_refusal && choice.collapse_group.is_none() {
                    violations.push(Violation::new(
                        qid,
                        format!("choice {} (\"{}\") lacks a collapse_group while others have one", choice.index, choice.text),
                    ));
                }
            }
        }
    }

    let known_demographics: HashSet<&str> = DEMOGRAPHIC_ATTRIBUTES.into_iter().collect();
    let mut user_ids = HashSet::new();
    for user in &dataset.users {
        let uid = user.id.as_str();
        if !user_ids.insert(uid) {
            violations.push(Violation::new(uid, "duplicate user id"));
        }
        for (key, value) in &user.demographics {
            if !known_demographics.contains(key.as_str()) {
                violations.push(Violation::new(uid, format!("unknown demographic attribute \"{key}\"")));
            }
            if value.is_empty() {
                violations.push(Violation::new(uid, format!("empty value for demographic \"{key}\"")));
            }
        }
        for key in IDEOLOGY_ATTRIBUTES {
            if !user.ideology.contains_key(key) {
                violations.push(Violation::new(uid, format!("missing ideology attribute \"{key}\"")));
            }
        }
        for key in user.ideology.keys() {
            if !IDEOLOGY_ATTRIBUTES.contains(&key.as_str()) {
                violations.push(Violation::new(uid, format!("unknown ideology attribute \"{key}\"")));
            }
        }
        if let Some(party) = user.political_party() {
            if !PARTY_VALUES.contains(&party) {
                violations.push(Violation::new(
                    uid,
                    format!("\"Political party\" value \"{party}\" not in {PARTY_VALUES:?}"),
                ));
            }
        }
    }

    let questions_by_id: HashMap<&str, &Question> =
        dataset.questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen_pairs = HashSet::new();
    for response in &dataset.responses {
        let rid = format!("{}/{}", response.user_id, response.question_id);
        if !user_ids.contains(response.user_id.as_str()) {
            violations.push(Violation::new(&rid, "response references unknown user"));
        }
        match questions_by_id.get(response.question_id.as_str()) {
            None => violations.push(Violation::new(&rid, "response references unknown question")),
            Some(question) => {
                if response.choice_index >= question.choices.len() {
                    violations.push(Violation::new(
                        &rid,
                        format!(
                            "choice_index {} out of range for {}-choice question",
                            response.choice_index,
                            question.choices.len()
                        ),
                    ));
                }
            }
        }
        if !seen_pairs.insert((response.user_id.as_str(), response.question_id.as_str())) {
            violations.push(Violation::new(&rid, "duplicate (user, question) response"));
        }
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_user_fixture;

    #[test]
    fn well_formed_fixture_has_no_violations() {
        let ds = two_user_fixture();
        assert_eq!(validate(&ds), Vec::new());
    }

    #[test]
    fn out_of_range_choice_index_is_one_violation() {
        let mut ds = two_user_fixture();
        ds.responses[0].choice_index = 5;
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        let expected_entity = format!("{}/{}", ds.responses[0].user_id, ds.responses[0].question_id);
        assert_eq!(violations[0].entity_id, expected_entity);
        assert!(violations[0].rule.contains("out of range"));
    }

    #[test]
    fn duplicate_response_pair_is_one_violation() {
        let mut ds = two_user_fixture();
        ds.responses.push(ds.responses[0].clone());
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("duplicate"));
    }

    #[test]
    fn validate_is_idempotent() {
        let mut ds = two_user_fixture();
        ds.responses[0].choice_index = 9;
        let first = validate(&ds);
        let second = validate(&ds);
        assert_eq!(first, second);
    }

    #[test]
    fn unknown_demographic_key_is_flagged() {
        let mut ds = two_user_fixture();
        ds.users[0]
            .demographics
            .insert("Shoe size".into(), "42".into());
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("Shoe size"));
    }

    #[test]
    fn bad_party_value_is_flagged() {
        let mut ds = two_user_fixture();
        ds.users[0].ideology.insert("Political party".into(), "Whig".into());
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("Whig"));
    }

    #[test]
    fn label_index_bijection() {
        let ds = two_user_fixture();
        for q in &ds.questions {
            for c in &q.choices {
                assert_eq!(c.label, label_for_index(c.index));
                assert_eq!((c.label as u8 - b'A') as usize, c.index);
            }
        }
    }

    #[test]
    fn refusal_must_be_literal_refused() {
        let mut ds = two_user_fixture();
        let q = &mut ds.questions[0];
        q.refusal_index = Some(0);
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("refusal_index"));
    }

    #[test]
    fn partial_collapse_groups_are_flagged() {
        let mut ds = two_user_fixture();
        let q = &mut ds.questions[0];
        q.choices[0].collapse_group = None;
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("collapse_group"));
    }
}
