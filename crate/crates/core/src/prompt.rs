//! Prompt rendering for every persona variant.
//!
//! Templates are external text files, one per variant tag, with `{name}`
//! placeholders; the bundled defaults live in `templates/`. Rendering is a
//! pure function of (template set, variant, user, question, opinions), which
//! is what the golden-file tests pin down.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::memory::ScoredOpinion;
use crate::survey::{Question, UserProfile};
use crate::template::{Template, TemplateError};

/// Attribute rendering order for persona blocks.
pub const ATTRIBUTE_PROMPT_ORDER: [&str; 12] = [
    "Age",
    "Citizenship",
    "Region",
    "Education",
    "Income",
    "Marital status",
    "Political ideology",
    "Political party",
    "Race",
    "Religion",
    "Frequency of religious attendance",
    "Gender",
];

const IDEOLOGY_KEYS: [&str; 2] = ["Political ideology", "Political party"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("variant {variant} expects {expected}, got {got} opinions")]
    InconsistentOpinions {
        variant: String,
        expected: String,
        got: usize,
    },
    #[error("variant {tag:?} with opinion_mode {mode:?} is inconsistent: {reason}")]
    InvalidVariant {
        tag: VariantTag,
        mode: OpinionMode,
        reason: String,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("template file {0}: {1}")]
    Io(String, std::io::Error),
}

/// The conditioning ladder: which persona sections a prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantTag {
    NoPersona,
    Ideology,
    DemoIdeology,
    IdeologyOpinions,
    DemoIdeologyOpinions,
    OpinionsOnly,
    DemoOpinions,
    GroupIdeologyRole,
    GroupAverageRole,
}

impl VariantTag {
    pub const ALL: [VariantTag; 9] = [
        VariantTag::NoPersona,
        VariantTag::Ideology,
        VariantTag::DemoIdeology,
        VariantTag::IdeologyOpinions,
        VariantTag::DemoIdeologyOpinions,
        VariantTag::OpinionsOnly,
        VariantTag::DemoOpinions,
        VariantTag::GroupIdeologyRole,
        VariantTag::GroupAverageRole,
    ];

    /// Individual-level tags, i.e. everything except the group roles.
    pub const INDIVIDUAL: [VariantTag; 7] = [
        VariantTag::NoPersona,
        VariantTag::Ideology,
        VariantTag::DemoIdeology,
        VariantTag::IdeologyOpinions,
        VariantTag::DemoIdeologyOpinions,
        VariantTag::OpinionsOnly,
        VariantTag::DemoOpinions,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariantTag::NoPersona => "NoPersona",
            VariantTag::Ideology => "Ideology",
            VariantTag::DemoIdeology => "DemoIdeology",
            VariantTag::IdeologyOpinions => "IdeologyOpinions",
            VariantTag::DemoIdeologyOpinions => "DemoIdeologyOpinions",
            VariantTag::OpinionsOnly => "OpinionsOnly",
            VariantTag::DemoOpinions => "DemoOpinions",
            VariantTag::GroupIdeologyRole => "GroupIdeologyRole",
            VariantTag::GroupAverageRole => "GroupAverageRole",
        }
    }

    pub fn uses_opinions(&self) -> bool {
        matches!(
            self,
            VariantTag::IdeologyOpinions
                | VariantTag::DemoIdeologyOpinions
                | VariantTag::OpinionsOnly
                | VariantTag::DemoOpinions
        )
    }

    /// Attribute keys rendered for this tag, in prompt order.
    fn attribute_keys(&self) -> Vec<&'static str> {
        match self {
            VariantTag::Ideology | VariantTag::IdeologyOpinions => IDEOLOGY_KEYS.to_vec(),
            VariantTag::DemoIdeology | VariantTag::DemoIdeologyOpinions => {
                ATTRIBUTE_PROMPT_ORDER.to_vec()
            }
            VariantTag::DemoOpinions => ATTRIBUTE_PROMPT_ORDER
                .into_iter()
                .filter(|k| !IDEOLOGY_KEYS.contains(k))
                .collect(),
            _ => Vec::new(),
        }
    }

    fn placeholders(&self) -> &'static [&'static str] {
        match self {
            VariantTag::NoPersona => &["question", "choices"],
            VariantTag::Ideology | VariantTag::DemoIdeology => {
                &["attributes", "question", "choices"]
            }
            VariantTag::OpinionsOnly => &["topic", "opinions", "question", "choices"],
            VariantTag::IdeologyOpinions
            | VariantTag::DemoIdeologyOpinions
            | VariantTag::DemoOpinions => {
                &["attributes", "topic", "opinions", "question", "choices"]
            }
            VariantTag::GroupIdeologyRole => &["role", "question", "choices_list"],
            VariantTag::GroupAverageRole => &["question", "choices_list"],
        }
    }
}

/// How a variant selects the opinions section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpinionMode {
    #[default]
    None,
    /// All persona opinions up to the configured cap, in dataset order.
    AllCapped,
    /// The k most similar opinions, in similarity order.
    TopK,
}

/// A prompt variant: a tag plus how its opinion section is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub tag: VariantTag,
    #[serde(default)]
    pub opinion_mode: OpinionMode,
    #[serde(default)]
    pub k: Option<usize>,
}

impl PromptVariant {
    pub fn plain(tag: VariantTag) -> Self {
        Self {
            tag,
            opinion_mode: OpinionMode::None,
            k: None,
        }
    }

    pub fn top_k(tag: VariantTag, k: usize) -> Self {
        Self {
            tag,
            opinion_mode: OpinionMode::TopK,
            k: Some(k),
        }
    }

    pub fn all_capped(tag: VariantTag) -> Self {
        Self {
            tag,
            opinion_mode: OpinionMode::AllCapped,
            k: None,
        }
    }

    /// Enforces `opinion_mode == None` iff the tag has no opinion section,
    /// and `k` present iff mode is top-k.
    pub fn check(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| {
            Err(PromptError::InvalidVariant {
                tag: self.tag,
                mode: self.opinion_mode,
                reason: reason.to_string(),
            })
        };
        if self.tag.uses_opinions() == (self.opinion_mode == OpinionMode::None) {
            return invalid("opinion_mode must be none exactly for tags without opinions");
        }
        if (self.opinion_mode == OpinionMode::TopK) != self.k.is_some() {
            return invalid("k must be present exactly for top_k mode");
        }
        Ok(())
    }

    /// Stable descriptor used in reports, e.g. `DemoIdeologyOpinions:top-8`.
    pub fn descriptor(&self) -> String {
        match self.opinion_mode {
            OpinionMode::None => self.tag.name().to_string(),
            OpinionMode::AllCapped => format!("{}:all", self.tag.name()),
            OpinionMode::TopK => format!("{}:top-{}", self.tag.name(), self.k.unwrap_or(0)),
        }
    }
}

/// Role word for group-level prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRole {
    Republican,
    Independent,
    Democrat,
    Average,
}

impl GroupRole {
    pub fn word(&self) -> &'static str {
        match self {
            GroupRole::Republican => "republican",
            GroupRole::Independent => "independent",
            GroupRole::Democrat => "democrat",
            GroupRole::Average => "average",
        }
    }
}

/// A fully rendered prompt plus the identifiers needed for audit records.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Variant descriptor, e.g. `NoPersona` or `GroupIdeologyRole:democrat`.
    pub variant: String,
    pub question_id: String,
    /// User id for individual prompts, `group:<role>` for group prompts.
    pub subject_id: String,
    /// Question ids of the opinions used, in rendered order.
    pub opinion_ids_used: Vec<String>,
}

/// A loaded template set, one template per variant tag.
pub struct PromptTemplates {
    templates: BTreeMap<VariantTag, Template>,
    version: String,
}

impl PromptTemplates {
    /// The bundled defaults.
    pub fn builtin() -> Self {
        let sources: [(VariantTag, &str); 9] = [
            (VariantTag::NoPersona, include_str!("../templates/NoPersona.txt")),
            (VariantTag::Ideology, include_str!("../templates/Ideology.txt")),
            (VariantTag::DemoIdeology, include_str!("../templates/DemoIdeology.txt")),
            (VariantTag::IdeologyOpinions, include_str!("../templates/IdeologyOpinions.txt")),
            (
                VariantTag::DemoIdeologyOpinions,
                include_str!("../templates/DemoIdeologyOpinions.txt"),
            ),
            (VariantTag::OpinionsOnly, include_str!("../templates/OpinionsOnly.txt")),
            (VariantTag::DemoOpinions, include_str!("../templates/DemoOpinions.txt")),
            (VariantTag::GroupIdeologyRole, include_str!("../templates/GroupIdeologyRole.txt")),
            (VariantTag::GroupAverageRole, include_str!("../templates/GroupAverageRole.txt")),
        ];
        Self::from_sources(sources.into_iter().map(|(t, s)| (t, s.to_string())))
            .expect("bundled templates parse")
    }

    /// Loads one `<Tag>.txt` file per variant tag from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut sources = Vec::new();
        for tag in VariantTag::ALL {
            let path = dir.join(format!("{}.txt", tag.name()));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PromptError::Io(path.display().to_string(), e))?;
            sources.push((tag, text));
        }
        Self::from_sources(sources.into_iter())
    }

    fn from_sources(sources: impl Iterator<Item = (VariantTag, String)>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        let mut hasher_input = String::new();
        for (tag, raw) in sources {
            // A single trailing newline is an artifact of text editors, not
            // part of the prompt.
            let text = raw.strip_suffix('\n').unwrap_or(&raw);
            hasher_input.push_str(tag.name());
            hasher_input.push('\x1f');
            hasher_input.push_str(text);
            hasher_input.push('\x1e');
            templates.insert(tag, Template::parse(tag.name(), text, tag.placeholders())?);
        }
        let version = sha256_hex(hasher_input.as_bytes())[..16].to_string();
        Ok(Self { templates, version })
    }

    /// Hash of the template texts; part of the run manifest.
    pub fn version(&self) -> &str {
        &self.version
    }

    /// Renders an individual-level prompt.
    ///
    /// Section order follows the templates: persona attribute lines, numbered
    /// opinions, bridge sentence, `Question:`, lettered `Answer choices:`
    /// (refusal choice included iff `include_refusal`), terminal `Answer:`.
    pub fn build_prompt(
        &self,
        variant: &PromptVariant,
        user: &UserProfile,
        topic_name: &str,
        question: &Question,
        opinions: &[ScoredOpinion],
        include_refusal: bool,
    ) -> Result<RenderedPrompt, PromptError> {
        variant.check()?;
        match variant.opinion_mode {
            OpinionMode::None if !opinions.is_empty() => {
                return Err(PromptError::InconsistentOpinions {
                    variant: variant.descriptor(),
                    expected: "no opinions".into(),
                    got: opinions.len(),
                });
            }
            OpinionMode::AllCapped | OpinionMode::TopK if opinions.is_empty() => {
                return Err(PromptError::InconsistentOpinions {
                    variant: variant.descriptor(),
                    expected: "at least one opinion".into(),
                    got: 0,
                });
            }
            OpinionMode::TopK if opinions.len() > variant.k.unwrap_or(0) => {
                return Err(PromptError::InconsistentOpinions {
                    variant: variant.descriptor(),
                    expected: format!("at most k={} opinions", variant.k.unwrap_or(0)),
                    got: opinions.len(),
                });
            }
            _ => {}
        }

        let attributes = variant
            .tag
            .attribute_keys()
            .iter()
            .filter_map(|key| {
                user.demographics
                    .get(*key)
                    .or_else(|| user.ideology.get(*key))
                    .map(|value| format!("{key}: {value}"))
            })
            .collect::<Vec<_>>()
            .join("\n");
        let numbered_opinions = opinions
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{}. {}", i + 1, o.statement.text))
            .collect::<Vec<_>>()
            .join("\n");

        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("attributes", attributes);
        values.insert("topic", topic_name.to_string());
        values.insert("opinions", numbered_opinions);
        values.insert("question", question.text.clone());
        values.insert("choices", render_choice_lines(question, include_refusal));

        let template = &self.templates[&variant.tag];
        Ok(RenderedPrompt {
            text: template.render(&values),
            variant: variant.descriptor(),
            question_id: question.id.clone(),
            subject_id: user.id.clone(),
            opinion_ids_used: opinions.iter().map(|o| o.statement.question_id.clone()).collect(),
        })
    }

    /// Renders a group-level prompt (role word or "average person" phrasing).
    pub fn build_group_prompt(&self, role: GroupRole, question: &Question) -> Result<RenderedPrompt, PromptError> {
        let tag = match role {
            GroupRole::Average => VariantTag::GroupAverageRole,
            _ => VariantTag::GroupIdeologyRole,
        };
        let choices_list = format!(
            "[{}]",
            question
                .choices
                .iter()
                .map(|c| serde_json::to_string(&c.text).expect("strings serialize"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("role", role.word().to_string());
        values.insert("question", question.text.clone());
        values.insert("choices_list", choices_list);
        let variant = match role {
            GroupRole::Average => tag.name().to_string(),
            _ => format!("{}:{}", tag.name(), role.word()),
        };
        Ok(RenderedPrompt {
            text: self.templates[&tag].render(&values),
            variant,
            question_id: question.id.clone(),
            subject_id: format!("group:{}", role.word()),
            opinion_ids_used: Vec::new(),
        })
    }
}

/// `A. <text>` lines for the question's visible choices.
fn render_choice_lines(question: &Question, include_refusal: bool) -> String {
    question
        .visible_choices(include_refusal)
        .iter()
        .map(|c| format!("{}. {}", c.label, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::OpinionStatement;
    use crate::testutil::two_user_fixture;

    fn scored(question_id: &str, text: &str, similarity: f64) -> ScoredOpinion {
        ScoredOpinion {
            statement: OpinionStatement {
                user_id: "u1".into(),
                question_id: question_id.into(),
                text: text.into(),
                source_choice_index: 0,
            },
            similarity,
        }
    }

    #[test]
    fn no_persona_contains_only_question_choices_answer() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let prompt = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::NoPersona),
                ds.user("u1").unwrap(),
                "Daily Habits",
                ds.question("q1").unwrap(),
                &[],
                true,
            )
            .unwrap();
        assert!(prompt.text.starts_with("Question: "));
        assert!(prompt.text.ends_with("Answer:"));
        assert!(!prompt.text.contains("A person"));
        assert!(prompt.text.contains("A. Very likely"));
    }

    #[test]
    fn opinions_only_starts_with_opinion_header() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let prompt = templates
            .build_prompt(
                &PromptVariant::top_k(VariantTag::OpinionsOnly, 3),
                ds.user("u1").unwrap(),
                "Guns",
                ds.question("q1").unwrap(),
                &[scored("q2", "An opinion sentence.", 0.9)],
                true,
            )
            .unwrap();
        assert!(prompt.text.starts_with("A person has the following opinions on Guns."));
        assert!(prompt.text.contains("1. An opinion sentence."));
        assert!(prompt.text.contains("Based on the above list of opinions, which answer choice"));
    }

    #[test]
    fn ideology_renders_exactly_two_attribute_lines() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let prompt = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::Ideology),
                ds.user("u1").unwrap(),
                "Daily Habits",
                ds.question("q1").unwrap(),
                &[],
                true,
            )
            .unwrap();
        assert!(prompt.text.contains("Political ideology: Conservative\nPolitical party: Republican"));
        assert!(!prompt.text.contains("Age:"));
        assert!(prompt.text.contains("Based on the demographic information"));
    }

    #[test]
    fn demo_opinions_skips_ideology_lines() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let prompt = templates
            .build_prompt(
                &PromptVariant::top_k(VariantTag::DemoOpinions, 8),
                ds.user("u1").unwrap(),
                "Daily Habits",
                ds.question("q1").unwrap(),
                &[scored("q2", "An opinion sentence.", 0.5)],
                true,
            )
            .unwrap();
        assert!(prompt.text.contains("Age: 30-49"));
        assert!(!prompt.text.contains("Political ideology"));
    }

    #[test]
    fn refusal_flag_controls_choice_list() {
        let mut ds = two_user_fixture();
        ds.questions[0]
            .choices
            .push(crate::survey::AnswerChoice::new(4, "Refused", None));
        ds.questions[0].refusal_index = Some(4);
        let templates = PromptTemplates::builtin();
        let with = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::NoPersona),
                ds.user("u1").unwrap(),
                "Daily Habits",
                &ds.questions[0],
                &[],
                true,
            )
            .unwrap();
        let without = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::NoPersona),
                ds.user("u1").unwrap(),
                "Daily Habits",
                &ds.questions[0],
                &[],
                false,
            )
            .unwrap();
        assert!(with.text.contains("E. Refused"));
        assert!(!without.text.contains("E. Refused"));
    }

    #[test]
    fn inconsistent_opinions_are_rejected() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let err = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::NoPersona),
                ds.user("u1").unwrap(),
                "Daily Habits",
                ds.question("q1").unwrap(),
                &[scored("q2", "text", 0.1)],
                true,
            )
            .unwrap_err();
        assert!(matches!(err, PromptError::InconsistentOpinions { .. }));
        let err = templates
            .build_prompt(
                &PromptVariant::top_k(VariantTag::OpinionsOnly, 1),
                ds.user("u1").unwrap(),
                "Daily Habits",
                ds.question("q1").unwrap(),
                &[scored("q2", "a", 0.3), scored("q3", "b", 0.2)],
                true,
            )
            .unwrap_err();
        assert!(matches!(err, PromptError::InconsistentOpinions { .. }));
    }

    #[test]
    fn variant_invariants_are_checked() {
        assert!(PromptVariant::plain(VariantTag::OpinionsOnly).check().is_err());
        assert!(PromptVariant::top_k(VariantTag::NoPersona, 3).check().is_err());
        assert!(PromptVariant {
            tag: VariantTag::OpinionsOnly,
            opinion_mode: OpinionMode::AllCapped,
            k: Some(3)
        }
        .check()
        .is_err());
        assert!(PromptVariant::top_k(VariantTag::OpinionsOnly, 3).check().is_ok());
    }

    #[test]
    fn group_prompts_match_role_phrasing() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let q = ds.question("q1").unwrap();
        let democrat = templates.build_group_prompt(GroupRole::Democrat, q).unwrap();
        assert!(democrat
            .text
            .starts_with("Thinking of yourself as a democrat, please select the right choice."));
        let average = templates.build_group_prompt(GroupRole::Average, q).unwrap();
        assert!(average
            .text
            .starts_with("Thinking of yourself as a person, please select the right choice."));
        assert!(average.text.contains(
            "Choice: [\"Very likely\", \"Somewhat likely\", \"Not too likely\", \"Not at all likely\"]"
        ));
    }

    #[test]
    fn ideology_lines_are_subsequence_of_full_persona() {
        let ds = two_user_fixture();
        let templates = PromptTemplates::builtin();
        let user = ds.user("u1").unwrap();
        let q = ds.question("q1").unwrap();
        let ideology = templates
            .build_prompt(&PromptVariant::plain(VariantTag::Ideology), user, "T", q, &[], true)
            .unwrap();
        let full = templates
            .build_prompt(
                &PromptVariant::top_k(VariantTag::DemoIdeologyOpinions, 3),
                user,
                "T",
                q,
                &[scored("q2", "o", 0.5)],
                true,
            )
            .unwrap();
        let ideology_lines: Vec<&str> = ideology
            .text
            .lines()
            .filter(|l| l.starts_with("Political "))
            .collect();
        let full_lines: Vec<&str> = full.text.lines().collect();
        let mut cursor = 0;
        for line in ideology_lines {
            let found = full_lines[cursor..].iter().position(|l| *l == line);
            assert!(found.is_some(), "line {line:?} missing from full prompt");
            cursor += found.unwrap() + 1;
        }
    }

    #[test]
    fn custom_template_dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        for tag in VariantTag::ALL {
            let body = match tag {
                VariantTag::NoPersona => "Q={question}\nC={choices}\nAnswer:",
                VariantTag::GroupIdeologyRole => "{role}|{question}|{choices_list}",
                VariantTag::GroupAverageRole => "avg|{question}|{choices_list}",
                _ => "X {question}\n{choices}\nAnswer:",
            };
            std::fs::write(dir.path().join(format!("{}.txt", tag.name())), body).unwrap();
        }
        let templates = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_ne!(templates.version(), PromptTemplates::builtin().version());
        let ds = two_user_fixture();
        let prompt = templates
            .build_prompt(
                &PromptVariant::plain(VariantTag::NoPersona),
                ds.user("u1").unwrap(),
                "T",
                ds.question("q1").unwrap(),
                &[],
                true,
            )
            .unwrap();
        assert!(prompt.text.starts_with("Q="));
    }

    #[test]
    fn unknown_placeholder_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        for tag in VariantTag::ALL {
            std::fs::write(dir.path().join(format!("{}.txt", tag.name())), "{question}").unwrap();
        }
        std::fs::write(dir.path().join("NoPersona.txt"), "{bogus}").unwrap();
        assert!(matches!(
            PromptTemplates::load_dir(dir.path()),
            Err(PromptError::Template(_))
        ));
    }
}
