//! Run orchestration: one JSON configuration drives validation, analysis,
//! evaluation and report writing. Every evaluate run leaves a `manifest.json`
//! whose hash pins the semantic inputs (dataset bytes, seeds, templates,
//! backends); equal manifests plus deterministic backends give byte-identical
//! outputs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{
    pair_similarity_table, same_demographics_kappa, KappaDistribution, PairAnalysisConfig,
    PairDirection, PairTableRow,
};
use crate::eval::{
    aggregate_group, aggregate_overall, aggregate_topicwise, run_group_eval, run_individual_eval,
    AccuracyRow, EvalConfig, EvalError, GroupAccuracyRow, PredictionRecord, TopicAccuracyRow,
};
use crate::hashing::sha256_hex;
use crate::ingest::{apply_collapse_groups, default_collapse_groups, parse_dataset, IngestError};
use crate::llm::{
    CompletionCache, CompletionClient, HttpBackend, HttpBackendConfig, LlmError, OracleBackend,
    ScriptedBackend, UniformRandomBackend,
};
use crate::memory::{
    CachedEmbedder, Embedder, EmbeddingCache, HashEmbedder, HttpEmbedder, HttpEmbedderConfig,
    MemoryError,
};
use crate::prompt::{PromptError, PromptTemplates};
use crate::survey::{validate, SurveyDataset, Violation};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("dataset failed validation with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),
}

impl RunnerError {
    /// CLI exit code: 2 for usage/IO/configuration problems, 1 for domain
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Io(_) => 2,
            RunnerError::Llm(LlmError::Misconfigured(_)) => 2,
            RunnerError::Ingest(IngestError::Io(_)) => 2,
            RunnerError::Ingest(IngestError::Schema { .. }) => 2,
            RunnerError::Memory(MemoryError::Backend(_)) => 2,
            RunnerError::Prompt(PromptError::Io(..)) => 2,
            _ => 1,
        }
    }
}

/// Completion backend selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// Mock answering the gold label; for smoke tests.
    Oracle,
    /// Seeded mock answering a uniformly random letter.
    UniformRandom { seed: u64 },
    /// Mock with an exact prompt -> response map loaded from a JSON file.
    Scripted {
        path: PathBuf,
        #[serde(default)]
        default: Option<String>,
    },
    /// Live HTTP backend.
    Http(HttpBackendConfig),
}

/// Embedder selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderChoice {
    /// Builtin deterministic hash embedder ("test-hash-256").
    TestHash,
    /// Live HTTP embedder.
    Http(HttpEmbedderConfig),
}

impl Default for EmbedderChoice {
    fn default() -> Self {
        EmbedderChoice::TestHash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSection {
    pub backend: BackendChoice,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Persistent completion cache location; omit for an in-memory cache.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    4
}

/// The one configuration file driving `analyze` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Master seed; copied into the evaluation config.
    pub seed: u64,
    pub eval: EvalConfig,
    #[serde(default)]
    pub pair_analysis: PairAnalysisConfig,
    pub completion: CompletionSection,
    #[serde(default)]
    pub embedder: EmbedderChoice,
    #[serde(default)]
    pub embed_cache_path: Option<PathBuf>,
    /// Directory with one `<Tag>.txt` template per variant; omit for the
    /// bundled defaults.
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    /// Fill missing collapse groups from the bundled ordinal-scale mapping.
    #[serde(default)]
    pub apply_collapse_defaults: bool,
}

impl RunConfig {
    /// Parses the JSON config file.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        config.eval.seed = config.seed;
        Ok(config)
    }

    /// Fails fast when referenced paths are missing.
    pub fn check_paths(&self) -> Result<(), RunnerError> {
        if !self.dataset.exists() {
            return Err(RunnerError::Config(format!(
                "dataset {} does not exist",
                self.dataset.display()
            )));
        }
        if let Some(dir) = &self.template_dir {
            if !dir.is_dir() {
                return Err(RunnerError::Config(format!(
                    "template_dir {} is not a directory",
                    dir.display()
                )));
            }
        }
        if let BackendChoice::Scripted { path, .. } = &self.completion.backend {
            if !path.exists() {
                return Err(RunnerError::Config(format!(
                    "scripted backend file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

/// Run manifest: the semantic fingerprint of an evaluate run. Output and
/// cache locations are deliberately excluded, so the same experiment written
/// to two directories yields the same manifest and byte-identical reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub dataset_sha256: String,
    pub seed: u64,
    pub template_version: String,
    pub completion_backend: String,
    pub embedder: String,
    pub tool_version: String,
}

fn backend_descriptor(choice: &BackendChoice) -> String {
    match choice {
        BackendChoice::Oracle => "mock-oracle".into(),
        BackendChoice::UniformRandom { seed } => format!("mock-uniform-random:{seed}"),
        BackendChoice::Scripted { .. } => "mock-scripted".into(),
        BackendChoice::Http(config) => format!("http:{}", config.model),
    }
}

fn embedder_descriptor(choice: &EmbedderChoice) -> String {
    match choice {
        EmbedderChoice::TestHash => crate::memory::HASH_EMBEDDER_TAG.into(),
        EmbedderChoice::Http(config) => format!("http:{}", config.model),
    }
}

fn build_manifest(
    config: &RunConfig,
    dataset_bytes: &[u8],
    template_version: &str,
) -> Manifest {
    // Normalize away everything that does not change the results.
    let mut semantic = config.clone();
    semantic.output_dir = PathBuf::new();
    semantic.dataset = PathBuf::new();
    semantic.completion.cache_path = None;
    semantic.embed_cache_path = None;
    semantic.template_dir = None;
    let mut encoded = serde_json::to_string(&semantic).expect("config serializes");
    encoded.push('\x1f');
    encoded.push_str(template_version);
    Manifest {
        config_hash: sha256_hex(encoded.as_bytes()),
        dataset_sha256: sha256_hex(dataset_bytes),
        seed: config.seed,
        template_version: template_version.to_string(),
        completion_backend: backend_descriptor(&config.completion.backend),
        embedder: embedder_descriptor(&config.embedder),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn load_templates(config: &RunConfig) -> Result<PromptTemplates, RunnerError> {
    match &config.template_dir {
        Some(dir) => Ok(PromptTemplates::load_dir(dir)?),
        None => Ok(PromptTemplates::builtin()),
    }
}

fn build_embedder(config: &RunConfig) -> Result<Box<dyn Embedder>, RunnerError> {
    let inner: Box<dyn Embedder> = match &config.embedder {
        EmbedderChoice::TestHash => Box::new(HashEmbedder::default()),
        EmbedderChoice::Http(http) => Box::new(HttpEmbedder::new(http.clone())?),
    };
    let cache = match &config.embed_cache_path {
        Some(path) => EmbeddingCache::open(path)?,
        None => EmbeddingCache::ephemeral(),
    };
    Ok(Box::new(CachedEmbedder::new(inner, cache)))
}

#[derive(Deserialize)]
struct ScriptFile {
    responses: HashMap<String, String>,
    #[serde(default)]
    default: Option<String>,
}

fn build_client(config: &RunConfig) -> Result<CompletionClient, RunnerError> {
    let backend: Box<dyn crate::llm::CompletionBackend> = match &config.completion.backend {
        BackendChoice::Oracle => Box::new(OracleBackend),
        BackendChoice::UniformRandom { seed } => Box::new(UniformRandomBackend::new(*seed)),
        BackendChoice::Scripted { path, default } => {
            let text = fs::read_to_string(path)
                .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
            let script: ScriptFile = serde_json::from_str(&text)
                .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
            let mut backend = ScriptedBackend::new(script.responses);
            if let Some(default) = script.default.clone().or_else(|| default.clone()) {
                backend = backend.with_default(default);
            }
            Box::new(backend)
        }
        BackendChoice::Http(http) => Box::new(HttpBackend::new(http.clone())?),
    };
    let cache = match &config.completion.cache_path {
        Some(path) => CompletionCache::open(path)?,
        None => CompletionCache::ephemeral(),
    };
    Ok(CompletionClient::new(backend)
        .with_cache(cache)
        .with_parallelism(config.completion.parallelism))
}

fn load_run_dataset(config: &RunConfig) -> Result<(SurveyDataset, Vec<u8>), RunnerError> {
    let bytes = fs::read(&config.dataset)?;
    let mut dataset = parse_dataset(&config.dataset)?;
    if config.apply_collapse_defaults {
        apply_collapse_groups(&mut dataset, &default_collapse_groups());
    }
    let violations = validate(&dataset);
    if !violations.is_empty() {
        return Err(RunnerError::Validation(violations));
    }
    Ok((dataset, bytes))
}

/// Parses and validates a dataset file, returning the violations (empty when
/// the dataset is well formed).
pub fn run_validate(dataset_path: &Path) -> Result<Vec<Violation>, RunnerError> {
    let dataset = parse_dataset(dataset_path)?;
    Ok(validate(&dataset))
}

/// Files written by [`run_analyze`].
#[derive(Debug, Clone)]
pub struct AnalyzeOutputs {
    pub kappa_json: PathBuf,
    pub opinion_first_csv: PathBuf,
    pub ideology_first_csv: PathBuf,
    pub histogram_csv: Option<PathBuf>,
    pub distributions: Vec<KappaDistribution>,
}

#[derive(Serialize)]
struct HistogramBin {
    low: f64,
    high: f64,
    count: u64,
}

#[derive(Serialize)]
struct KappaJsonEntry<'a> {
    topic_id: &'a str,
    n_pairs: usize,
    mean: Option<f64>,
    median: Option<f64>,
    bins: Vec<HistogramBin>,
}

fn histogram_bins(distribution: &KappaDistribution) -> Vec<HistogramBin> {
    distribution
        .histogram
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            low: -1.0 + 0.1 * i as f64,
            high: -1.0 + 0.1 * (i + 1) as f64,
            count,
        })
        .collect()
}

fn write_pair_table_csv(path: &Path, rows: &[PairTableRow]) -> Result<(), RunnerError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer
        .write_record([
            "topic_id",
            "pct_similar_pairs",
            "pct_similar_second_attr",
            "pct_diff_second_attr",
        ])
        .map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([
                row.topic_id.clone(),
                format_float(row.pct_similar_pairs),
                format_float(row.pct_similar_second_attr),
                format_float(row.pct_diff_second_attr),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(error: csv::Error) -> RunnerError {
    RunnerError::Io(std::io::Error::other(error))
}

/// Shortest round-trip decimal form; stable across runs.
fn format_float(value: f64) -> String {
    let mut buffer = ryu_format(value);
    if buffer.ends_with(".0") {
        buffer.truncate(buffer.len() - 2);
    }
    buffer
}

fn ryu_format(value: f64) -> String {
    // serde_json uses ryu internally; going through Value keeps one code path
    // for every float we print.
    serde_json::to_string(&value).expect("finite float serializes")
}

/// Runs the dataset analyses and writes their report files.
pub fn run_analyze(config: &RunConfig, emit_plot_data: bool) -> Result<AnalyzeOutputs, RunnerError> {
    config.check_paths()?;
    let (dataset, _) = load_run_dataset(config)?;
    fs::create_dir_all(&config.output_dir)?;

    let mut distributions = Vec::new();
    for topic in &dataset.topics {
        let distribution = same_demographics_kappa(&dataset, &topic.id, &config.pair_analysis)
            .map_err(|e| RunnerError::Config(e.to_string()))?;
        distributions.push(distribution);
    }

    let kappa_json = config.output_dir.join("kappa_histograms.json");
    let entries: Vec<KappaJsonEntry> = distributions
        .iter()
        .map(|d| KappaJsonEntry {
            topic_id: &d.topic_id,
            n_pairs: d.results.len(),
            mean: d.mean,
            median: d.median,
            bins: histogram_bins(d),
        })
        .collect();
    fs::write(&kappa_json, serde_json::to_string_pretty(&entries).expect("serializes"))?;

    let opinion_first = pair_similarity_table(
        &dataset,
        &PairAnalysisConfig {
            direction: PairDirection::OpinionFirst,
            ..config.pair_analysis
        },
    );
    let ideology_first = pair_similarity_table(
        &dataset,
        &PairAnalysisConfig {
            direction: PairDirection::IdeologyFirst,
            ..config.pair_analysis
        },
    );
    let opinion_first_csv = config.output_dir.join("pair_table_opinion_first.csv");
    let ideology_first_csv = config.output_dir.join("pair_table_ideology_first.csv");
    write_pair_table_csv(&opinion_first_csv, &opinion_first)?;
    write_pair_table_csv(&ideology_first_csv, &ideology_first)?;

    let histogram_csv = if emit_plot_data {
        let path = config.output_dir.join("kappa_histograms.csv");
        let mut writer = csv::Writer::from_path(&path).map_err(csv_io)?;
        writer
            .write_record(["topic_id", "bin_low", "bin_high", "count"])
            .map_err(csv_io)?;
        for distribution in &distributions {
            for bin in histogram_bins(distribution) {
                writer
                    .write_record([
                        distribution.topic_id.clone(),
                        format_float(bin.low),
                        format_float(bin.high),
                        bin.count.to_string(),
                    ])
                    .map_err(csv_io)?;
            }
        }
        writer.flush()?;
        Some(path)
    } else {
        None
    };

    Ok(AnalyzeOutputs {
        kappa_json,
        opinion_first_csv,
        ideology_first_csv,
        histogram_csv,
        distributions,
    })
}

/// Files written by [`run_evaluate`] plus run counters.
#[derive(Debug, Clone)]
pub struct EvaluateOutputs {
    pub manifest_path: PathBuf,
    pub records_path: PathBuf,
    pub overall_csv: PathBuf,
    pub topicwise_csv: PathBuf,
    pub group_csv: Option<PathBuf>,
    pub overall: Vec<AccuracyRow>,
    pub group_rows: Vec<GroupAccuracyRow>,
    pub n_records: usize,
    pub backend_calls: u64,
    pub backend_failures: usize,
    pub skipped_users: usize,
}

fn write_overall_csv(path: &Path, rows: &[AccuracyRow]) -> Result<(), RunnerError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer
        .write_record(["variant", "metric", "n", "correct", "accuracy", "wilson_low", "wilson_high"])
        .map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([
                row.variant.clone(),
                row.metric.name().to_string(),
                row.cell.n.to_string(),
                row.cell.correct.to_string(),
                format_float(row.cell.accuracy),
                format_float(row.cell.wilson_low),
                format_float(row.cell.wilson_high),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_topicwise_csv(path: &Path, rows: &[TopicAccuracyRow]) -> Result<(), RunnerError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer
        .write_record([
            "topic", "variant", "metric", "n", "correct", "accuracy", "wilson_low", "wilson_high",
        ])
        .map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([
                row.topic_id.clone(),
                row.variant.clone(),
                row.metric.name().to_string(),
                row.cell.n.to_string(),
                row.cell.correct.to_string(),
                format_float(row.cell.accuracy),
                format_float(row.cell.wilson_low),
                format_float(row.cell.wilson_high),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_group_csv(path: &Path, rows: &[GroupAccuracyRow]) -> Result<(), RunnerError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer
        .write_record(["row", "metric", "n", "correct", "accuracy", "wilson_low", "wilson_high"])
        .map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([
                row.row.clone(),
                row.metric.name().to_string(),
                row.cell.n.to_string(),
                row.cell.correct.to_string(),
                format_float(row.cell.accuracy),
                format_float(row.cell.wilson_low),
                format_float(row.cell.wilson_high),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), RunnerError> {
    let mut file = fs::File::create(path)?;
    for record in records {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        file.write_all(line.as_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Runs the configured evaluation and writes manifest, records and CSVs.
pub fn run_evaluate(config: &RunConfig) -> Result<EvaluateOutputs, RunnerError> {
    config.check_paths()?;
    let templates = load_templates(config)?;
    let embedder = build_embedder(config)?;
    let client = build_client(config)?;
    let (dataset, dataset_bytes) = load_run_dataset(config)?;
    fs::create_dir_all(&config.output_dir)?;

    let mut eval_config = config.eval.clone();
    eval_config.seed = config.seed;

    let individual = run_individual_eval(&dataset, &eval_config, &embedder, &client, &templates)?;
    let group = if eval_config.group_eval {
        Some(run_group_eval(&dataset, &eval_config, &client, &templates)?)
    } else {
        None
    };

    let manifest = build_manifest(config, &dataset_bytes, templates.version());
    let manifest_path = config.output_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("serializes"))?;

    let mut records = individual.records.clone();
    let mut backend_failures = individual.backend_failures;
    let mut group_rows = Vec::new();
    if let Some(group) = &group {
        records.extend(group.records.iter().cloned());
        backend_failures += group.backend_failures;
        group_rows = group.rows.clone();
    }

    let records_path = config.output_dir.join("records.jsonl");
    write_records(&records_path, &records)?;
    let overall_csv = config.output_dir.join("overall.csv");
    write_overall_csv(&overall_csv, &individual.overall)?;
    let topicwise_csv = config.output_dir.join("topicwise.csv");
    write_topicwise_csv(&topicwise_csv, &individual.topicwise)?;
    let group_csv = match &group {
        Some(group) => {
            let path = config.output_dir.join("group.csv");
            write_group_csv(&path, &group.rows)?;
            Some(path)
        }
        None => None,
    };

    Ok(EvaluateOutputs {
        manifest_path,
        records_path,
        overall_csv,
        topicwise_csv,
        group_csv,
        overall: individual.overall,
        group_rows,
        n_records: records.len(),
        backend_calls: client.backend_calls(),
        backend_failures,
        skipped_users: individual.skipped_users,
    })
}

/// Re-aggregates an existing `records.jsonl` into fresh CSV reports.
pub fn run_report(
    records_path: &Path,
    output_dir: &Path,
    alpha: f64,
    group_avg: crate::eval::GroupAvgMode,
) -> Result<EvaluateOutputs, RunnerError> {
    let file = fs::File::open(records_path)?;
    let mut records: Vec<PredictionRecord> = Vec::new();
    for (zero_line, line) in std::io::BufRead::lines(std::io::BufReader::new(file)).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| {
            RunnerError::Config(format!(
                "{} line {}: {e}",
                records_path.display(),
                zero_line + 1
            ))
        })?;
        records.push(record);
    }
    fs::create_dir_all(output_dir)?;
    let overall = aggregate_overall(&records, alpha)?;
    let topicwise = aggregate_topicwise(&records, alpha)?;
    let group_rows = aggregate_group(&records, alpha, group_avg)?;

    let overall_csv = output_dir.join("overall.csv");
    write_overall_csv(&overall_csv, &overall)?;
    let topicwise_csv = output_dir.join("topicwise.csv");
    write_topicwise_csv(&topicwise_csv, &topicwise)?;
    let group_csv = if group_rows.is_empty() {
        None
    } else {
        let path = output_dir.join("group.csv");
        write_group_csv(&path, &group_rows)?;
        Some(path)
    };

    Ok(EvaluateOutputs {
        manifest_path: PathBuf::new(),
        records_path: records_path.to_path_buf(),
        overall_csv,
        topicwise_csv,
        group_csv,
        overall,
        group_rows,
        n_records: records.len(),
        backend_calls: 0,
        backend_failures: 0,
        skipped_users: 0,
    })
}
