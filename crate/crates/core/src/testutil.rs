//! Small fixtures shared by unit tests.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::survey::{AnswerChoice, Question, Response, SurveyDataset, Topic, UserProfile};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn demographics(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn ideology(political_ideology: &str, party: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("Political ideology".to_string(), political_ideology.to_string());
    map.insert("Political party".to_string(), party.to_string());
    map
}

/// Two users, one topic, two questions; well formed by construction.
pub fn two_user_fixture() -> SurveyDataset {
    let likely_choices = |_| {
        vec![
            AnswerChoice::new(0, "Very likely", Some("Likely".into())),
            AnswerChoice::new(1, "Somewhat likely", Some("Likely".into())),
            AnswerChoice::new(2, "Not too likely", Some("Unlikely".into())),
            AnswerChoice::new(3, "Not at all likely", Some("Unlikely".into())),
        ]
    };
    SurveyDataset {
        topics: vec![Topic {
            id: "t1".into(),
            name: "Daily Habits".into(),
        }],
        questions: vec![
            Question {
                id: "q1".into(),
                topic_id: "t1".into(),
                text: "How likely are you to cook dinner at home on a weekday?".into(),
                choices: likely_choices(0),
                refusal_index: None,
            },
            Question {
                id: "q2".into(),
                topic_id: "t1".into(),
                text: "Walking instead of driving for short trips is worth the extra time.".into(),
                choices: vec![
                    AnswerChoice::new(0, "Strongly agree", Some("Agree".into())),
                    AnswerChoice::new(1, "Somewhat agree", Some("Agree".into())),
                    AnswerChoice::new(2, "Somewhat disagree", Some("Disagree".into())),
                    AnswerChoice::new(3, "Strongly disagree", Some("Disagree".into())),
                ],
                refusal_index: None,
            },
        ],
        users: vec![
            UserProfile {
                id: "u1".into(),
                demographics: demographics(&[("Age", "30-49"), ("Region", "South")]),
                ideology: ideology("Conservative", "Republican"),
            },
            UserProfile {
                id: "u2".into(),
                demographics: demographics(&[("Age", "30-49"), ("Region", "South")]),
                ideology: ideology("Liberal", "Democrat"),
            },
        ],
        responses: vec![
            Response {
                user_id: "u1".into(),
                question_id: "q1".into(),
                choice_index: 0,
            },
            Response {
                user_id: "u1".into(),
                question_id: "q2".into(),
                choice_index: 1,
            },
            Response {
                user_id: "u2".into(),
                question_id: "q1".into(),
                choice_index: 3,
            },
            Response {
                user_id: "u2".into(),
                question_id: "q2".into(),
                choice_index: 2,
            },
        ],
        provenance: "unit-test fixture".into(),
    }
}
