//! Experiment runners: individual and group evaluations over
//! (variant x topic x user x question), exact and collapsed scoring, and
//! Wilson score intervals.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ingest::{sample_users, split_persona, IngestError, OpinionRenderer, DEFAULT_OPINION_TEMPLATE_ID};
use crate::llm::{
    parse_answer, CompletionClient, CompletionRequest, LlmError, ParseStatus, META_GOLD_LABEL,
    META_N_CHOICES,
};
use crate::memory::{
    index_user, rank_all, retrieve_top_k, Embedder, MemoryError, RetrievalConfig, ScoredOpinion,
    UserMemory,
};
use crate::prompt::{
    GroupRole, OpinionMode, PromptError, PromptTemplates, PromptVariant, RenderedPrompt,
};
use crate::survey::{label_for_index, Question, SurveyDataset};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("wilson interval needs n >= 1")]
    ZeroSamples,
    #[error("question \"{question_id}\" has no responses from group {group:?}")]
    NoGroupResponses { question_id: String, group: GroupFilter },
    #[error("unknown topic \"{0}\"")]
    UnknownTopic(String),
}

/// How the "Avg overall" group row is derived from the three ideology rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAvgMode {
    /// Unweighted mean of the three row accuracies; interval is the union of
    /// the row intervals.
    #[default]
    MeanOfRows,
    /// Pool all records of the three rows into one cell.
    Pooled,
}

/// Evaluation knobs shared by the individual and group runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub variants: Vec<PromptVariant>,
    /// Topic ids to evaluate; empty means every topic in the dataset.
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default = "default_users_per_topic")]
    pub users_per_topic: usize,
    #[serde(default = "default_persona_ratio")]
    pub persona_ratio: f64,
    /// Confidence level for Wilson intervals.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default = "default_true")]
    pub include_refusal: bool,
    /// Skip test questions whose gold answer is the refusal choice.
    #[serde(default)]
    pub exclude_refusal_gold: bool,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: usize,
    /// Also run the group-level evaluation.
    #[serde(default)]
    pub group_eval: bool,
    #[serde(default)]
    pub group_avg: GroupAvgMode,
}

fn default_users_per_topic() -> usize {
    100
}
fn default_persona_ratio() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    0.99
}
fn default_true() -> bool {
    true
}
fn default_max_output_tokens() -> usize {
    16
}

impl EvalConfig {
    pub fn new(variants: Vec<PromptVariant>, seed: u64) -> Self {
        Self {
            variants,
            topics: Vec::new(),
            users_per_topic: default_users_per_topic(),
            persona_ratio: default_persona_ratio(),
            alpha: default_alpha(),
            seed,
            retrieval: RetrievalConfig::default(),
            include_refusal: true,
            exclude_refusal_gold: false,
            max_output_tokens: default_max_output_tokens(),
            group_eval: false,
            group_avg: GroupAvgMode::default(),
        }
    }

    pub fn check(&self) -> Result<(), EvalError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EvalError::InvalidAlpha(self.alpha));
        }
        for variant in &self.variants {
            variant.check()?;
        }
        Ok(())
    }
}

/// Whether an individual or group run produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Individual,
    Group,
}

/// One scored prediction; the audit atom written to `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// User id, or `group:<role>` for group-level records.
    pub user_id: String,
    pub question_id: String,
    pub topic_id: String,
    pub variant: String,
    pub prompt_hash: String,
    pub raw_completion: String,
    pub choice_index: Option<usize>,
    pub parse_status: ParseStatus,
    pub gold_index: usize,
    pub exact_correct: bool,
    pub collapsed_correct: bool,
    pub eval_kind: EvalKind,
}

/// Counts, accuracy and Wilson bounds for one table cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl AccuracyCell {
    pub fn from_counts(correct: usize, n: usize, alpha: f64) -> Result<Self, EvalError> {
        let (wilson_low, wilson_high) = wilson_interval(correct, n, alpha)?;
        Ok(Self {
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            wilson_low,
            wilson_high,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Exact,
    Collapsed,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Exact => "exact",
            Metric::Collapsed => "collapsed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub metric: Metric,
    pub cell: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicAccuracyRow {
    pub topic_id: String,
    pub variant: String,
    pub metric: Metric,
    pub cell: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAccuracyRow {
    pub row: String,
    pub metric: Metric,
    pub cell: AccuracyCell,
}

/// Result of an individual-level evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualEvalOutcome {
    pub records: Vec<PredictionRecord>,
    pub overall: Vec<AccuracyRow>,
    pub topicwise: Vec<TopicAccuracyRow>,
    /// Sampled users skipped because they had fewer than two responses.
    pub skipped_users: usize,
    /// Requests whose backend call failed; scored as no_match.
    pub backend_failures: usize,
}

/// Result of a group-level evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEvalOutcome {
    pub records: Vec<PredictionRecord>,
    pub rows: Vec<GroupAccuracyRow>,
    /// (question, row) pairs skipped because the group cast no votes.
    pub skipped_questions: usize,
    pub backend_failures: usize,
}

/// True iff the predicted choice falls in the same collapse group as the
/// gold choice. Questions without collapse groups fall back to exact
/// equality; a refusal choice is always its own singleton group.
pub fn collapsed_match(question: &Question, predicted_index: usize, gold_index: usize) -> bool {
    if predicted_index == gold_index {
        return true;
    }
    if !question.has_collapse_groups() {
        return false;
    }
    let group_of = |index: usize| -> Option<&String> {
        if Some(index) == question.refusal_index {
            None
        } else {
            question.choices.get(index).and_then(|c| c.collapse_group.as_ref())
        }
    };
    match (group_of(predicted_index), group_of(gold_index)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Two-sided normal critical value for confidence level `alpha`.
pub fn critical_z(alpha: f64) -> Result<f64, EvalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::InvalidAlpha(alpha));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal exists");
    Ok(normal.inverse_cdf((1.0 + alpha) / 2.0))
}

/// Wilson score interval for a binomial proportion.
///
/// The bounds are exact at the boundaries: `correct == n` pins the upper
/// bound to 1.0 and `correct == 0` pins the lower bound to 0.0.
pub fn wilson_interval(correct: usize, n: usize, alpha: f64) -> Result<(f64, f64), EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroSamples);
    }
    assert!(correct <= n, "correct {correct} exceeds n {n}");
    let z = critical_z(alpha)?;
    let n_f = n as f64;
    let p = correct as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let low = if correct == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if correct == n { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// Modal choice index over the group's responses to a question; ties break
/// toward the lowest index.
pub fn majority_gold(
    dataset: &SurveyDataset,
    question: &Question,
    group: GroupFilter,
) -> Result<usize, EvalError> {
    let mut counts = vec![0usize; question.choices.len()];
    let mut total = 0usize;
    for response in dataset.responses_to_question(&question.id) {
        if !group.matches(dataset, &response.user_id) {
            continue;
        }
        if let Some(slot) = counts.get_mut(response.choice_index) {
            *slot += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoGroupResponses {
            question_id: question.id.clone(),
            group,
        });
    }
    let mut best = 0usize;
    for (index, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = index;
        }
    }
    Ok(best)
}

/// Which users vote in a group-level gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupFilter {
    All,
    Republican,
    Democrat,
    Independent,
}

impl GroupFilter {
    fn matches(&self, dataset: &SurveyDataset, user_id: &str) -> bool {
        match self {
            GroupFilter::All => true,
            _ => {
                let wanted = match self {
                    GroupFilter::Republican => "Republican",
                    GroupFilter::Democrat => "Democrat",
                    GroupFilter::Independent => "Independent",
                    GroupFilter::All => unreachable!(),
                };
                dataset
                    .user(user_id)
                    .and_then(|u| u.political_party())
                    .map(|p| p == wanted)
                    .unwrap_or(false)
            }
        }
    }
}

fn resolve_topics<'a>(dataset: &'a SurveyDataset, config: &EvalConfig) -> Result<Vec<&'a str>, EvalError> {
    if config.topics.is_empty() {
        return Ok(dataset.topics.iter().map(|t| t.id.as_str()).collect());
    }
    let mut out = Vec::new();
    for topic_id in &config.topics {
        let topic = dataset
            .topic(topic_id)
            .ok_or_else(|| EvalError::UnknownTopic(topic_id.clone()))?;
        out.push(topic.id.as_str());
    }
    Ok(out)
}

/// All persona opinions up to the cap: every statement in dataset order when
/// the memory fits, otherwise the top `cap` by retrieval rank presented in
/// dataset order.
fn all_capped_opinions(
    memory: &UserMemory,
    question: &Question,
    retrieval: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredOpinion>, MemoryError> {
    let ranked = rank_all(memory, question, retrieval, embedder)?;
    let keep: HashSet<&str> = ranked
        .iter()
        .take(retrieval.max_all_opinions)
        .map(|s| s.statement.question_id.as_str())
        .collect();
    let by_id: BTreeMap<&str, &ScoredOpinion> = ranked
        .iter()
        .map(|s| (s.statement.question_id.as_str(), s))
        .collect();
    Ok(memory
        .statements()
        .filter(|s| keep.contains(s.question_id.as_str()))
        .map(|s| by_id[s.question_id.as_str()].clone())
        .collect())
}

struct PendingRequest {
    record: PredictionRecord,
    question_index: usize,
    request: CompletionRequest,
}

fn push_pending(
    pending: &mut Vec<PendingRequest>,
    dataset: &SurveyDataset,
    question: &Question,
    question_index: usize,
    prompt: &RenderedPrompt,
    gold_index: usize,
    config: &EvalConfig,
    backend_tag: &str,
    eval_kind: EvalKind,
) {
    let n_choices = question.visible_choices(config.include_refusal).len();
    let mut request = CompletionRequest::new(prompt.text.clone(), backend_tag);
    request.max_output_tokens = config.max_output_tokens;
    request.metadata.insert("question_id".into(), question.id.clone());
    request.metadata.insert("subject_id".into(), prompt.subject_id.clone());
    request
        .metadata
        .insert(META_GOLD_LABEL.into(), label_for_index(gold_index).to_string());
    request.metadata.insert(META_N_CHOICES.into(), n_choices.to_string());
    let _ = dataset;
    pending.push(PendingRequest {
        record: PredictionRecord {
            user_id: prompt.subject_id.clone(),
            question_id: question.id.clone(),
            topic_id: question.topic_id.clone(),
            variant: prompt.variant.clone(),
            prompt_hash: crate::hashing::sha256_hex(prompt.text.as_bytes()),
            raw_completion: String::new(),
            choice_index: None,
            parse_status: ParseStatus::NoMatch,
            gold_index,
            exact_correct: false,
            collapsed_correct: false,
            eval_kind,
        },
        question_index,
        request,
    });
}

/// Completes all pending requests and scores them into final records.
fn complete_and_score(
    dataset: &SurveyDataset,
    pending: Vec<PendingRequest>,
    client: &CompletionClient,
) -> (Vec<PredictionRecord>, usize) {
    let requests: Vec<CompletionRequest> = pending.iter().map(|p| p.request.clone()).collect();
    let results = client.complete_many(&requests);
    let mut failures = 0usize;
    let mut records = Vec::with_capacity(pending.len());
    for (p, result) in pending.into_iter().zip(results) {
        let mut record = p.record;
        let question = &dataset.questions[p.question_index];
        match result {
            Ok(raw) => {
                let parsed = parse_answer(&raw, question);
                record.raw_completion = raw;
                record.choice_index = parsed.choice_index;
                record.parse_status = parsed.parse_status;
                if let Some(choice) = parsed.choice_index {
                    record.exact_correct = choice == record.gold_index;
                    record.collapsed_correct = collapsed_match(question, choice, record.gold_index);
                }
            }
            Err(_) => {
                failures += 1;
            }
        }
        records.push(record);
    }
    (records, failures)
}

fn sort_records(records: &mut [PredictionRecord]) {
    records.sort_by(|a, b| {
        (&a.topic_id, &a.user_id, &a.question_id, &a.variant)
            .cmp(&(&b.topic_id, &b.user_id, &b.question_id, &b.variant))
    });
}

/// Runs the individual-level evaluation: per topic, sample users, split
/// persona/test, index persona opinions, then for every (variant, test
/// question) build the prompt, complete, parse and score.
pub fn run_individual_eval(
    dataset: &SurveyDataset,
    config: &EvalConfig,
    embedder: &dyn Embedder,
    client: &CompletionClient,
    templates: &PromptTemplates,
) -> Result<IndividualEvalOutcome, EvalError> {
    config.check()?;
    let renderer = OpinionRenderer::default();
    let question_index: BTreeMap<&str, usize> = dataset
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();
    let needs_memory = config
        .variants
        .iter()
        .any(|v| v.opinion_mode != OpinionMode::None);

    let mut pending = Vec::new();
    let mut skipped_users = 0usize;
    for topic_id in resolve_topics(dataset, config)? {
        let topic_name = dataset.topic(topic_id).expect("resolved topic exists").name.clone();
        let users = sample_users(dataset, topic_id, config.users_per_topic, config.seed)?;
        for user in &users {
            let split = match split_persona(dataset, &user.id, topic_id, config.persona_ratio, config.seed) {
                Ok(split) => split,
                Err(IngestError::TooFewResponses { .. }) => {
                    skipped_users += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let memory = if needs_memory {
                let statements = renderer.render_persona(dataset, &split, DEFAULT_OPINION_TEMPLATE_ID)?;
                Some(index_user(&user.id, &statements, embedder)?)
            } else {
                None
            };
            for variant in &config.variants {
                for response in &split.test_responses {
                    let qi = question_index[response.question_id.as_str()];
                    let question = &dataset.questions[qi];
                    if config.exclude_refusal_gold
                        && Some(response.choice_index) == question.refusal_index
                    {
                        continue;
                    }
                    let opinions = match variant.opinion_mode {
                        OpinionMode::None => Vec::new(),
                        OpinionMode::TopK => {
                            let retrieval = RetrievalConfig {
                                k: variant.k.expect("checked variant has k"),
                                ..config.retrieval
                            };
                            retrieve_top_k(
                                memory.as_ref().expect("memory built for opinion variants"),
                                question,
                                &retrieval,
                                embedder,
                            )?
                        }
                        OpinionMode::AllCapped => all_capped_opinions(
                            memory.as_ref().expect("memory built for opinion variants"),
                            question,
                            &config.retrieval,
                            embedder,
                        )?,
                    };
                    let prompt = templates.build_prompt(
                        variant,
                        user,
                        &topic_name,
                        question,
                        &opinions,
                        config.include_refusal,
                    )?;
                    push_pending(
                        &mut pending,
                        dataset,
                        question,
                        qi,
                        &prompt,
                        response.choice_index,
                        config,
                        client.backend_tag(),
                        EvalKind::Individual,
                    );
                }
            }
        }
    }

    let (mut records, backend_failures) = complete_and_score(dataset, pending, client);
    sort_records(&mut records);
    let overall = aggregate_overall(&records, config.alpha)?;
    let topicwise = aggregate_topicwise(&records, config.alpha)?;
    Ok(IndividualEvalOutcome {
        records,
        overall,
        topicwise,
        skipped_users,
        backend_failures,
    })
}

/// Display labels for the group table rows, in report order.
pub const GROUP_ROWS: [(&str, GroupFilter, GroupRole); 4] = [
    ("Majority answer", GroupFilter::All, GroupRole::Average),
    ("Independent", GroupFilter::Independent, GroupRole::Independent),
    ("Democrat", GroupFilter::Democrat, GroupRole::Democrat),
    ("Republican", GroupFilter::Republican, GroupRole::Republican),
];

/// Runs the group-level evaluation: per question, the gold answer is the
/// group's majority vote and the prompt casts the model as a group member
/// (or an average person for the majority row).
pub fn run_group_eval(
    dataset: &SurveyDataset,
    config: &EvalConfig,
    client: &CompletionClient,
    templates: &PromptTemplates,
) -> Result<GroupEvalOutcome, EvalError> {
    config.check()?;
    let question_index: BTreeMap<&str, usize> = dataset
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();

    let mut pending = Vec::new();
    let mut skipped_questions = 0usize;
    for topic_id in resolve_topics(dataset, config)? {
        for question in dataset.questions_in_topic(topic_id) {
            for (_, group, role) in GROUP_ROWS {
                let gold = match majority_gold(dataset, question, group) {
                    Ok(gold) => gold,
                    Err(EvalError::NoGroupResponses { .. }) => {
                        skipped_questions += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let prompt = templates.build_group_prompt(role, question)?;
                let qi = question_index[question.id.as_str()];
                push_pending(
                    &mut pending,
                    dataset,
                    question,
                    qi,
                    &prompt,
                    gold,
                    config,
                    client.backend_tag(),
                    EvalKind::Group,
                );
            }
        }
    }

    let (mut records, backend_failures) = complete_and_score(dataset, pending, client);
    sort_records(&mut records);
    let rows = aggregate_group(&records, config.alpha, config.group_avg)?;
    Ok(GroupEvalOutcome {
        records,
        rows,
        skipped_questions,
        backend_failures,
    })
}

fn tally<'a>(
    records: impl Iterator<Item = &'a PredictionRecord>,
) -> (usize, usize, usize) {
    let mut n = 0;
    let mut exact = 0;
    let mut collapsed = 0;
    for record in records {
        n += 1;
        exact += record.exact_correct as usize;
        collapsed += record.collapsed_correct as usize;
    }
    (n, exact, collapsed)
}

/// Overall accuracy rows (one exact + one collapsed per variant).
pub fn aggregate_overall(records: &[PredictionRecord], alpha: f64) -> Result<Vec<AccuracyRow>, EvalError> {
    let mut variants: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.eval_kind == EvalKind::Individual) {
        variants.entry(record.variant.as_str()).or_default().push(record);
    }
    let mut rows = Vec::new();
    for (variant, records) in variants {
        let (n, exact, collapsed) = tally(records.into_iter());
        rows.push(AccuracyRow {
            variant: variant.to_string(),
            metric: Metric::Exact,
            cell: AccuracyCell::from_counts(exact, n, alpha)?,
        });
        rows.push(AccuracyRow {
            variant: variant.to_string(),
            metric: Metric::Collapsed,
            cell: AccuracyCell::from_counts(collapsed, n, alpha)?,
        });
    }
    Ok(rows)
}

/// Topic-wise accuracy rows.
pub fn aggregate_topicwise(
    records: &[PredictionRecord],
    alpha: f64,
) -> Result<Vec<TopicAccuracyRow>, EvalError> {
    let mut cells: BTreeMap<(&str, &str), Vec<&PredictionRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.eval_kind == EvalKind::Individual) {
        cells
            .entry((record.topic_id.as_str(), record.variant.as_str()))
            .or_default()
            .push(record);
    }
    let mut rows = Vec::new();
    for ((topic_id, variant), records) in cells {
        let (n, exact, collapsed) = tally(records.into_iter());
        for (metric, correct) in [(Metric::Exact, exact), (Metric::Collapsed, collapsed)] {
            rows.push(TopicAccuracyRow {
                topic_id: topic_id.to_string(),
                variant: variant.to_string(),
                metric,
                cell: AccuracyCell::from_counts(correct, n, alpha)?,
            });
        }
    }
    Ok(rows)
}

/// Group table rows in report order, with the derived "Avg overall" row.
pub fn aggregate_group(
    records: &[PredictionRecord],
    alpha: f64,
    avg_mode: GroupAvgMode,
) -> Result<Vec<GroupAccuracyRow>, EvalError> {
    let mut rows = Vec::new();
    let mut ideology_cells: Vec<(AccuracyCell, AccuracyCell)> = Vec::new();
    for (label, _, role) in GROUP_ROWS {
        let subject = format!("group:{}", role.word());
        let group_records: Vec<&PredictionRecord> = records
            .iter()
            .filter(|r| r.eval_kind == EvalKind::Group && r.user_id == subject)
            .collect();
        if group_records.is_empty() {
            continue;
        }
        let (n, exact, collapsed) = tally(group_records.into_iter());
        let exact_cell = AccuracyCell::from_counts(exact, n, alpha)?;
        let collapsed_cell = AccuracyCell::from_counts(collapsed, n, alpha)?;
        if role != GroupRole::Average {
            ideology_cells.push((exact_cell, collapsed_cell));
        }
        rows.push(GroupAccuracyRow {
            row: label.to_string(),
            metric: Metric::Exact,
            cell: exact_cell,
        });
        rows.push(GroupAccuracyRow {
            row: label.to_string(),
            metric: Metric::Collapsed,
            cell: collapsed_cell,
        });
    }
    if !ideology_cells.is_empty() {
        for (metric, pick) in [
            (Metric::Exact, 0usize),
            (Metric::Collapsed, 1usize),
        ] {
            let cells: Vec<AccuracyCell> = ideology_cells
                .iter()
                .map(|(e, c)| if pick == 0 { *e } else { *c })
                .collect();
            let n: usize = cells.iter().map(|c| c.n).sum();
            let correct: usize = cells.iter().map(|c| c.correct).sum();
            let cell = match avg_mode {
                GroupAvgMode::Pooled => AccuracyCell::from_counts(correct, n, alpha)?,
                GroupAvgMode::MeanOfRows => AccuracyCell {
                    n,
                    correct,
                    accuracy: cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64,
                    wilson_low: cells.iter().map(|c| c.wilson_low).fold(f64::INFINITY, f64::min),
                    wilson_high: cells.iter().map(|c| c.wilson_high).fold(0.0, f64::max),
                },
            };
            rows.push(GroupAccuracyRow {
                row: "Avg overall".to_string(),
                metric,
                cell,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::AnswerChoice;
    use crate::testutil::two_user_fixture;

    fn likely_question() -> Question {
        two_user_fixture().questions[0].clone()
    }

    #[test]
    fn collapsed_match_same_group() {
        let q = likely_question();
        // Somewhat likely vs Very likely: both "Likely".
        assert!(collapsed_match(&q, 1, 0));
        // Not too likely vs Very likely: opposite groups.
        assert!(!collapsed_match(&q, 2, 0));
        // Exact always collapses.
        assert!(collapsed_match(&q, 3, 3));
    }

    #[test]
    fn collapsed_match_without_groups_is_exact() {
        let mut q = likely_question();
        for c in &mut q.choices {
            c.collapse_group = None;
        }
        assert!(!collapsed_match(&q, 1, 0));
        assert!(collapsed_match(&q, 2, 2));
    }

    #[test]
    fn refusal_is_a_singleton_group() {
        let mut q = likely_question();
        q.choices.push(AnswerChoice::new(4, "Refused", None));
        q.refusal_index = Some(4);
        assert!(!collapsed_match(&q, 4, 0));
        assert!(!collapsed_match(&q, 0, 4));
        assert!(collapsed_match(&q, 4, 4));
    }

    #[test]
    fn wilson_boundaries_are_exact() {
        let (_, high) = wilson_interval(50, 50, 0.99).unwrap();
        assert_eq!(high, 1.0);
        let (low, _) = wilson_interval(0, 50, 0.99).unwrap();
        assert_eq!(low, 0.0);
    }

    #[test]
    fn wilson_known_value() {
        // Frozen from an independent closed-form evaluation (scipy /
        // statsmodels agree to full precision).
        let (low, high) = wilson_interval(430, 1000, 0.99).unwrap();
        assert!((low - 0.3902655186870507).abs() < 1e-9, "low {low}");
        assert!((high - 0.47065724439942624).abs() < 1e-9, "high {high}");
    }

    #[test]
    fn wilson_errors() {
        assert!(matches!(wilson_interval(0, 0, 0.99), Err(EvalError::ZeroSamples)));
        assert!(matches!(wilson_interval(1, 2, 1.5), Err(EvalError::InvalidAlpha(_))));
    }

    #[test]
    fn critical_z_matches_reference() {
        assert!((critical_z(0.99).unwrap() - 2.5758293035489004).abs() < 1e-9);
        assert!((critical_z(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn majority_gold_counts_and_tie_break() {
        let mut ds = two_user_fixture();
        // q1 votes: u1 -> 0, u2 -> 3. Tie breaks to lowest index.
        let q = ds.questions[0].clone();
        assert_eq!(majority_gold(&ds, &q, GroupFilter::All).unwrap(), 0);
        // Add a third vote for index 3 to flip the majority.
        ds.users.push(crate::survey::UserProfile {
            id: "u3".into(),
            demographics: Default::default(),
            ideology: crate::testutil::ideology("Moderate", "Democrat"),
        });
        ds.responses.push(crate::survey::Response {
            user_id: "u3".into(),
            question_id: "q1".into(),
            choice_index: 3,
        });
        assert_eq!(majority_gold(&ds, &q, GroupFilter::All).unwrap(), 3);
        // Democrats only: u2 and u3 both vote 3.
        assert_eq!(majority_gold(&ds, &q, GroupFilter::Democrat).unwrap(), 3);
        // No republican... u1 is Republican with vote 0.
        assert_eq!(majority_gold(&ds, &q, GroupFilter::Republican).unwrap(), 0);
    }

    #[test]
    fn majority_gold_errors_without_votes() {
        let mut ds = two_user_fixture();
        ds.responses.clear();
        let q = ds.questions[0].clone();
        assert!(matches!(
            majority_gold(&ds, &q, GroupFilter::All),
            Err(EvalError::NoGroupResponses { .. })
        ));
    }
}
