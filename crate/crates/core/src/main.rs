//! persona-align: validate survey datasets, run the pairwise analyses, and
//! evaluate persona-conditioned prompting variants.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use persona_align::eval::GroupAvgMode;
use persona_align::memory::QueryMode;
use persona_align::runner::{
    run_analyze, run_evaluate, run_report, run_validate, EvaluateOutputs, RunConfig, RunnerError,
};

#[derive(Parser)]
#[command(name = "persona-align", version, about = "Persona-conditioned survey QA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Overrides {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of users sampled per topic.
    #[arg(long)]
    users_per_topic: Option<usize>,
    /// Restrict evaluation to these topic ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    topics: Option<Vec<String>>,
    /// Include the refusal choice in rendered prompts.
    #[arg(long)]
    include_refusal: Option<bool>,
    /// Exclude test questions whose gold answer is the refusal choice.
    #[arg(long)]
    exclude_refusal_gold: Option<bool>,
    /// Retrieval query text: stem_only or stem_and_choices.
    #[arg(long)]
    query_mode: Option<String>,
    /// Completion cache file path.
    #[arg(long)]
    cache_path: Option<PathBuf>,
}

impl Overrides {
    /// Precedence: flag > file > default.
    fn apply(&self, config: &mut RunConfig) -> Result<(), RunnerError> {
        if let Some(dataset) = &self.dataset {
            config.dataset = dataset.clone();
        }
        if let Some(output_dir) = &self.output_dir {
            config.output_dir = output_dir.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.eval.seed = seed;
        }
        if let Some(users) = self.users_per_topic {
            config.eval.users_per_topic = users;
        }
        if let Some(topics) = &self.topics {
            config.eval.topics = topics.clone();
        }
        if let Some(include_refusal) = self.include_refusal {
            config.eval.include_refusal = include_refusal;
        }
        if let Some(exclude) = self.exclude_refusal_gold {
            config.eval.exclude_refusal_gold = exclude;
        }
        if let Some(mode) = &self.query_mode {
            config.eval.retrieval.query_mode = match mode.as_str() {
                "stem_only" => QueryMode::StemOnly,
                "stem_and_choices" => QueryMode::StemAndChoices,
                other => {
                    return Err(RunnerError::Config(format!(
                        "unknown query mode \"{other}\" (expected stem_only or stem_and_choices)"
                    )))
                }
            };
        }
        if let Some(cache) = &self.cache_path {
            config.completion.cache_path = Some(cache.clone());
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file against every invariant; print one violation per line.
    Validate { dataset: PathBuf },
    /// Run the kappa and pair-similarity analyses and write their reports.
    Analyze {
        #[command(flatten)]
        overrides: Overrides,
        /// Also write histogram CSVs for plotting.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Run the individual (and optionally group) evaluation.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Also run the group-level evaluation.
        #[arg(long)]
        group: bool,
    },
    /// Re-aggregate an existing records.jsonl into fresh CSV reports.
    Report {
        /// Path to a records.jsonl produced by `evaluate`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Confidence level for Wilson intervals.
        #[arg(long, default_value_t = 0.99)]
        alpha: f64,
        /// Avg overall derivation: mean_of_rows or pooled.
        #[arg(long, default_value = "mean_of_rows")]
        group_avg: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, RunnerError> {
    match cli.command {
        Command::Validate { dataset } => {
            let violations = run_validate(&dataset)?;
            if violations.is_empty() {
                println!("ok: dataset passes all invariants");
                Ok(ExitCode::SUCCESS)
            } else {
                for violation in &violations {
                    println!("{violation}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Analyze {
            overrides,
            emit_plot_data,
        } => {
            let mut config = RunConfig::load(&overrides.config)?;
            overrides.apply(&mut config)?;
            let outputs = run_analyze(&config, emit_plot_data)?;
            for distribution in &outputs.distributions {
                match (distribution.mean, distribution.median) {
                    (Some(mean), Some(median)) => println!(
                        "topic {}: {} pairs, kappa mean {:.4}, median {:.4}",
                        distribution.topic_id,
                        distribution.results.len(),
                        mean,
                        median
                    ),
                    _ => println!("topic {}: no qualifying pairs", distribution.topic_id),
                }
            }
            println!("wrote {}", outputs.kappa_json.display());
            println!("wrote {}", outputs.opinion_first_csv.display());
            println!("wrote {}", outputs.ideology_first_csv.display());
            if let Some(path) = &outputs.histogram_csv {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { overrides, group } => {
            let mut config = RunConfig::load(&overrides.config)?;
            overrides.apply(&mut config)?;
            if group {
                config.eval.group_eval = true;
            }
            let outputs = run_evaluate(&config)?;
            print_summary(&outputs);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            records,
            output_dir,
            alpha,
            group_avg,
        } => {
            let group_avg = match group_avg.as_str() {
                "mean_of_rows" => GroupAvgMode::MeanOfRows,
                "pooled" => GroupAvgMode::Pooled,
                other => {
                    return Err(RunnerError::Config(format!(
                        "unknown group_avg \"{other}\" (expected mean_of_rows or pooled)"
                    )))
                }
            };
            let outputs = run_report(&records, &output_dir, alpha, group_avg)?;
            print_summary(&outputs);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(outputs: &EvaluateOutputs) {
    println!(
        "{} records, {} backend calls, {} backend failures, {} users skipped",
        outputs.n_records, outputs.backend_calls, outputs.backend_failures, outputs.skipped_users
    );
    println!(
        "{:<34} {:<10} {:>6} {:>9} {:>9} {:>9}",
        "variant", "metric", "n", "accuracy", "low", "high"
    );
    for row in &outputs.overall {
        println!(
            "{:<34} {:<10} {:>6} {:>9.4} {:>9.4} {:>9.4}",
            row.variant,
            row.metric.name(),
            row.cell.n,
            row.cell.accuracy,
            row.cell.wilson_low,
            row.cell.wilson_high
        );
    }
    for row in &outputs.group_rows {
        println!(
            "{:<34} {:<10} {:>6} {:>9.4} {:>9.4} {:>9.4}",
            row.row,
            row.metric.name(),
            row.cell.n,
            row.cell.accuracy,
            row.cell.wilson_low,
            row.cell.wilson_high
        );
    }
    println!("wrote {}", outputs.records_path.display());
    println!("wrote {}", outputs.overall_csv.display());
    println!("wrote {}", outputs.topicwise_csv.display());
    if let Some(path) = &outputs.group_csv {
        println!("wrote {}", path.display());
    }
}
