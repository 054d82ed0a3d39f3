//! Pairwise dataset analyses: Cohen's kappa over user pairs sharing the same
//! demographics, and opinion/ideology similarity percentage tables.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survey::{SurveyDataset, DEMOGRAPHIC_ATTRIBUTES, IDEOLOGY_ATTRIBUTES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgreementError {
    #[error("answer lists are empty")]
    Empty,
    #[error("answer lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unknown topic \"{0}\"")]
    UnknownTopic(String),
}

/// Which attribute is filtered first when building a pair table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairDirection {
    /// First select pairs with similar opinions, then split by ideology.
    OpinionFirst,
    /// First select pairs with equal ideology, then split by opinion match.
    IdeologyFirst,
}

/// Filters applied when enumerating user pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysisConfig {
    /// Common-question cutoff: kappa pairs need at least this many, pair
    /// tables strictly more than this many.
    pub min_common_questions: usize,
    /// Two users share "similar opinions" when at least this fraction of
    /// their common answers match.
    pub opinion_match_threshold: f64,
    pub direction: PairDirection,
}

impl Default for PairAnalysisConfig {
    fn default() -> Self {
        Self {
            min_common_questions: 10,
            opinion_match_threshold: 0.70,
            direction: PairDirection::OpinionFirst,
        }
    }
}

/// Cohen's kappa for one user pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaResult {
    pub user_a: String,
    pub user_b: String,
    pub kappa: f64,
    pub n_items: usize,
    /// Both raters constant and equal: chance agreement is 1 and kappa is
    /// reported as 1 instead of NaN.
    pub degenerate: bool,
}

/// Number of histogram bins of width 0.1 covering [-1, 1].
pub const KAPPA_HISTOGRAM_BINS: usize = 20;

/// Kappa values for all qualifying pairs of one topic, with summary stats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaDistribution {
    pub topic_id: String,
    pub results: Vec<KappaResult>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Counts per bin of width 0.1 from -1.0 to 1.0; 1.0 lands in the last bin.
    pub histogram: [u64; KAPPA_HISTOGRAM_BINS],
}

/// One row of a pair similarity table.
///
/// `pct_similar_second_attr` and `pct_diff_second_attr` partition the pairs
/// selected by the first filter, so they sum to 100 whenever that set is
/// nonempty; when it is empty both are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairTableRow {
    pub topic_id: String,
    pub pct_similar_pairs: f64,
    pub pct_similar_second_attr: f64,
    pub pct_diff_second_attr: f64,
}

/// Chance-corrected agreement between two equal-length answer sequences.
///
/// Choice indices are pooled as categories across positions. Observed
/// agreement is the fraction of equal positions; expected agreement is the
/// dot product of the two raters' marginal category distributions.
pub fn cohen_kappa(answers_a: &[usize], answers_b: &[usize]) -> Result<KappaResult, AgreementError> {
    compute_kappa(answers_a, answers_b).map(|(kappa, degenerate)| KappaResult {
        user_a: String::new(),
        user_b: String::new(),
        kappa,
        n_items: answers_a.len(),
        degenerate,
    })
}

fn compute_kappa(answers_a: &[usize], answers_b: &[usize]) -> Result<(f64, bool), AgreementError> {
    if answers_a.is_empty() || answers_b.is_empty() {
        return Err(AgreementError::Empty);
    }
    if answers_a.len() != answers_b.len() {
        return Err(AgreementError::LengthMismatch(answers_a.len(), answers_b.len()));
    }
    let n = answers_a.len() as f64;
    let mut equal = 0usize;
    let mut marginal_a: HashMap<usize, usize> = HashMap::new();
    let mut marginal_b: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in answers_a.iter().zip(answers_b) {
        if a == b {
            equal += 1;
        }
        *marginal_a.entry(a).or_default() += 1;
        *marginal_b.entry(b).or_default() += 1;
    }
    let p_observed = equal as f64 / n;
    let mut p_expected = 0.0;
    for (category, &count_a) in &marginal_a {
        if let Some(&count_b) = marginal_b.get(category) {
            p_expected += (count_a as f64 / n) * (count_b as f64 / n);
        }
    }
    if p_expected >= 1.0 {
        // Both marginals are the same point mass, which forces p_observed = 1.
        return Ok((1.0, true));
    }
    Ok(((p_observed - p_expected) / (1.0 - p_expected), false))
}

/// Per-topic map of `user -> (question -> choice_index)`, restricted to users
/// with at least one answer in the topic. BTreeMaps keep pair enumeration and
/// common-question ordering deterministic.
fn topic_answer_maps<'a>(
    dataset: &'a SurveyDataset,
    topic_id: &str,
) -> BTreeMap<&'a str, BTreeMap<&'a str, usize>> {
    let topic_questions: std::collections::HashSet<&str> = dataset
        .questions
        .iter()
        .filter(|q| q.topic_id == topic_id)
        .map(|q| q.id.as_str())
        .collect();
    let mut maps: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for response in &dataset.responses {
        if topic_questions.contains(response.question_id.as_str()) {
            maps.entry(response.user_id.as_str())
                .or_default()
                .insert(response.question_id.as_str(), response.choice_index);
        }
    }
    maps
}

/// Common answers of two users, ordered by question id.
fn common_answers(
    a: &BTreeMap<&str, usize>,
    b: &BTreeMap<&str, usize>,
) -> (Vec<usize>, Vec<usize>) {
    let mut answers_a = Vec::new();
    let mut answers_b = Vec::new();
    for (question, &choice_a) in a {
        if let Some(&choice_b) = b.get(question) {
            answers_a.push(choice_a);
            answers_b.push(choice_b);
        }
    }
    (answers_a, answers_b)
}

fn same_demographics(dataset: &SurveyDataset, user_a: &str, user_b: &str) -> bool {
    let (Some(a), Some(b)) = (dataset.user(user_a), dataset.user(user_b)) else {
        return false;
    };
    DEMOGRAPHIC_ATTRIBUTES
        .iter()
        .all(|attr| a.demographics.get(*attr) == b.demographics.get(*attr))
}

/// Kappa over every unordered pair of users with identical values on all ten
/// demographic attributes and at least `min_common_questions` common answered
/// questions in the topic.
pub fn same_demographics_kappa(
    dataset: &SurveyDataset,
    topic_id: &str,
    config: &PairAnalysisConfig,
) -> Result<KappaDistribution, AgreementError> {
    if dataset.topic(topic_id).is_none() {
        return Err(AgreementError::UnknownTopic(topic_id.to_string()));
    }
    let maps = topic_answer_maps(dataset, topic_id);
    let users: Vec<&str> = maps.keys().copied().collect();
    let mut results = Vec::new();
    for (i, &user_a) in users.iter().enumerate() {
        for &user_b in &users[i + 1..] {
            if !same_demographics(dataset, user_a, user_b) {
                continue;
            }
            let (answers_a, answers_b) = common_answers(&maps[user_a], &maps[user_b]);
            if answers_a.len() < config.min_common_questions {
                continue;
            }
            let mut result = cohen_kappa(&answers_a, &answers_b)?;
            result.user_a = user_a.to_string();
            result.user_b = user_b.to_string();
            results.push(result);
        }
    }
    Ok(summarize_kappa(topic_id, results))
}

fn summarize_kappa(topic_id: &str, results: Vec<KappaResult>) -> KappaDistribution {
    let mut histogram = [0u64; KAPPA_HISTOGRAM_BINS];
    let mut values: Vec<f64> = results.iter().map(|r| r.kappa).collect();
    values.sort_by(f64::total_cmp);
    for &kappa in &values {
        let clamped = kappa.clamp(-1.0, 1.0);
        let bin = (((clamped + 1.0) / 0.1) as usize).min(KAPPA_HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let mean = if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    };
    let median = if values.is_empty() {
        None
    } else if values.len() % 2 == 1 {
        Some(values[values.len() / 2])
    } else {
        Some((values[values.len() / 2 - 1] + values[values.len() / 2]) / 2.0)
    };
    KappaDistribution {
        topic_id: topic_id.to_string(),
        results,
        mean,
        median,
        histogram,
    }
}

/// Similarity percentage table over all topics.
///
/// Per topic, over all unordered user pairs with strictly more than
/// `min_common_questions` common questions:
/// - `OpinionFirst`: percent of pairs whose matched-answer fraction reaches
///   the threshold, then within those the split by equal vs different
///   "Political ideology".
/// - `IdeologyFirst`: percent of pairs with equal "Political ideology", then
///   within those the split by matched-answer fraction above vs below the
///   threshold.
///
/// Topics without a single qualifying pair are omitted.
pub fn pair_similarity_table(dataset: &SurveyDataset, config: &PairAnalysisConfig) -> Vec<PairTableRow> {
    let ideology_of: HashMap<&str, &str> = dataset
        .users
        .iter()
        .filter_map(|u| {
            u.ideology
                .get(IDEOLOGY_ATTRIBUTES[0])
                .map(|v| (u.id.as_str(), v.as_str()))
        })
        .collect();

    let mut rows = Vec::new();
    for topic in &dataset.topics {
        let maps = topic_answer_maps(dataset, &topic.id);
        let users: Vec<&str> = maps.keys().copied().collect();
        let mut qualifying = 0usize;
        let mut first_pass = 0usize;
        let mut second_similar = 0usize;
        for (i, &user_a) in users.iter().enumerate() {
            for &user_b in &users[i + 1..] {
                let (answers_a, answers_b) = common_answers(&maps[user_a], &maps[user_b]);
                if answers_a.len() <= config.min_common_questions {
                    continue;
                }
                qualifying += 1;
                let matched = answers_a
                    .iter()
                    .zip(&answers_b)
                    .filter(|(a, b)| a == b)
                    .count();
                let opinions_similar =
                    matched as f64 / answers_a.len() as f64 >= config.opinion_match_threshold;
                let ideology_equal = match (ideology_of.get(user_a), ideology_of.get(user_b)) {
                    (Some(a), Some(b)) => a == b,
                    _ => false,
                };
                let (first, second) = match config.direction {
                    PairDirection::OpinionFirst => (opinions_similar, ideology_equal),
                    PairDirection::IdeologyFirst => (ideology_equal, opinions_similar),
                };
                if first {
                    first_pass += 1;
                    if second {
                        second_similar += 1;
                    }
                }
            }
        }
        if qualifying == 0 {
            continue;
        }
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        rows.push(PairTableRow {
            topic_id: topic.id.clone(),
            pct_similar_pairs: pct(first_pass, qualifying),
            pct_similar_second_attr: pct(second_similar, first_pass),
            pct_diff_second_attr: pct(first_pass - second_similar, first_pass),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::Response;
    use crate::testutil::two_user_fixture;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn identical_lists_give_exactly_one() {
        let r = cohen_kappa(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn known_zero_case() {
        let r = cohen_kappa(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        approx(r.kappa, 0.0, 1e-12);
    }

    #[test]
    fn known_point_six_one_five_case() {
        // Contingency oracle: p_o = 0.8, p_e = 0.48, kappa = 0.32 / 0.52.
        let r = cohen_kappa(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 0]).unwrap();
        approx(r.kappa, 0.6154, 1e-4);
    }

    #[test]
    fn degenerate_constant_raters() {
        let r = cohen_kappa(&[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert_eq!(cohen_kappa(&[], &[]).unwrap_err(), AgreementError::Empty);
        assert_eq!(
            cohen_kappa(&[1], &[1, 2]).unwrap_err(),
            AgreementError::LengthMismatch(1, 2)
        );
    }

    #[test]
    fn demographic_clones_answering_identically() {
        let mut ds = two_user_fixture();
        // Make u2's answers equal to u1's.
        ds.responses = vec![
            Response { user_id: "u1".into(), question_id: "q1".into(), choice_index: 0 },
            Response { user_id: "u1".into(), question_id: "q2".into(), choice_index: 1 },
            Response { user_id: "u2".into(), question_id: "q1".into(), choice_index: 0 },
            Response { user_id: "u2".into(), question_id: "q2".into(), choice_index: 1 },
        ];
        let config = PairAnalysisConfig {
            min_common_questions: 1,
            ..PairAnalysisConfig::default()
        };
        let dist = same_demographics_kappa(&ds, "t1", &config).unwrap();
        assert_eq!(dist.results.len(), 1);
        assert_eq!(dist.results[0].kappa, 1.0);
        assert_eq!(dist.mean, Some(1.0));
        assert_eq!(dist.histogram[KAPPA_HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn no_matching_pair_gives_empty_distribution() {
        let mut ds = two_user_fixture();
        ds.users[1].demographics.insert("Age".into(), "65+".into());
        let config = PairAnalysisConfig {
            min_common_questions: 1,
            ..PairAnalysisConfig::default()
        };
        let dist = same_demographics_kappa(&ds, "t1", &config).unwrap();
        assert!(dist.results.is_empty());
        assert_eq!(dist.mean, None);
        assert_eq!(dist.median, None);
    }

    #[test]
    fn kappa_pairs_use_at_least_cutoff() {
        // Two common questions; cutoff 2 keeps the pair, cutoff 3 drops it.
        let ds = two_user_fixture();
        let keep = PairAnalysisConfig { min_common_questions: 2, ..Default::default() };
        let drop = PairAnalysisConfig { min_common_questions: 3, ..Default::default() };
        assert_eq!(same_demographics_kappa(&ds, "t1", &keep).unwrap().results.len(), 1);
        assert_eq!(same_demographics_kappa(&ds, "t1", &drop).unwrap().results.len(), 0);
    }

    #[test]
    fn unanimous_pair_table_row() {
        let mut ds = two_user_fixture();
        ds.responses = vec![
            Response { user_id: "u1".into(), question_id: "q1".into(), choice_index: 0 },
            Response { user_id: "u1".into(), question_id: "q2".into(), choice_index: 1 },
            Response { user_id: "u2".into(), question_id: "q1".into(), choice_index: 0 },
            Response { user_id: "u2".into(), question_id: "q2".into(), choice_index: 1 },
        ];
        ds.users[1].ideology.insert("Political ideology".into(), "Conservative".into());
        let config = PairAnalysisConfig {
            min_common_questions: 1,
            ..PairAnalysisConfig::default()
        };
        let rows = pair_similarity_table(&ds, &config);
        assert_eq!(rows.len(), 1);
        approx(rows[0].pct_similar_pairs, 100.0, 1e-9);
        approx(rows[0].pct_similar_second_attr, 100.0, 1e-9);
        approx(rows[0].pct_diff_second_attr, 0.0, 1e-9);
    }

    #[test]
    fn single_qualifying_pair_different_ideologies() {
        // 8 of 10 answers match (>= 0.7), ideologies differ: row (100, 0, 100).
        let mut ds = two_user_fixture();
        let base = ds.questions[0].clone();
        ds.questions.clear();
        ds.responses.clear();
        for i in 0..10 {
            let mut q = base.clone();
            q.id = format!("q{i:02}");
            ds.questions.push(q);
        }
        for i in 0..10 {
            let qid = format!("q{i:02}");
            ds.responses.push(Response { user_id: "u1".into(), question_id: qid.clone(), choice_index: 0 });
            let u2_choice = if i < 8 { 0 } else { 1 };
            ds.responses.push(Response { user_id: "u2".into(), question_id: qid, choice_index: u2_choice });
        }
        let config = PairAnalysisConfig {
            min_common_questions: 9,
            ..PairAnalysisConfig::default()
        };
        let rows = pair_similarity_table(&ds, &config);
        assert_eq!(rows.len(), 1);
        approx(rows[0].pct_similar_pairs, 100.0, 1e-9);
        approx(rows[0].pct_similar_second_attr, 0.0, 1e-9);
        approx(rows[0].pct_diff_second_attr, 100.0, 1e-9);
    }

    #[test]
    fn pair_table_cutoff_is_strict() {
        // Exactly min_common_questions common answers does not qualify.
        let ds = two_user_fixture();
        let config = PairAnalysisConfig {
            min_common_questions: 2,
            ..PairAnalysisConfig::default()
        };
        assert!(pair_similarity_table(&ds, &config).is_empty());
    }

    proptest! {
        #[test]
        fn kappa_symmetry_and_bounds(pair in proptest::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let a: Vec<usize> = pair.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pair.iter().map(|p| p.1).collect();
            let ab = cohen_kappa(&a, &b).unwrap().kappa;
            let ba = cohen_kappa(&b, &a).unwrap().kappa;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            if a == b {
                prop_assert_eq!(ab, 1.0);
            } else {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn kappa_permutation_invariance(
            pair in proptest::collection::vec((0usize..4, 0usize..4), 2..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let a: Vec<usize> = pair.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pair.iter().map(|p| p.1).collect();
            let mut indices: Vec<usize> = (0..a.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            indices.shuffle(&mut rng);
            let pa: Vec<usize> = indices.iter().map(|&i| a[i]).collect();
            let pb: Vec<usize> = indices.iter().map(|&i| b[i]).collect();
            let original = cohen_kappa(&a, &b).unwrap().kappa;
            let permuted = cohen_kappa(&pa, &pb).unwrap().kappa;
            prop_assert!((original - permuted).abs() < 1e-12);
        }
    }
}
