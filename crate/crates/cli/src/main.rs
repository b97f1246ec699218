mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use derail_core::forecast::Aggregation;
use derail_core::model::TieRule;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "derail", version, about = "Forecast conversation derailment by sampling plausible futures")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags below override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continuations per conversation (L).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true)]
    pub repetition_penalty: Option<f64>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub tie_rule: Option<TieRuleArg>,
    #[arg(long, global = true)]
    pub aggregation: Option<AggregationArg>,
    /// Synthetic continuations per training conversation (l).
    #[arg(long, global = true)]
    pub augment_l: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Serialize turns with social orientation tags.
    #[arg(long, global = true)]
    pub orientation: bool,
    #[arg(long, global = true)]
    pub max_retries: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TieRuleArg {
    PredictDerailment,
    PredictBenign,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Vote,
    MeanProbability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    CgaWiki,
    Bnc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a corpus export to canonical JSONL splits.
    Ingest {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Seed for the BNC split.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Train,validation,test ratios for the BNC split, e.g. 0.8,0.1,0.1.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Write a planted-signal synthetic corpus as canonical JSONL splits.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        validation: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 3)]
        prefix_len: usize,
    },
    /// Label every turn with social orientation tags via few-shot prompting.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        /// Prompt template with a `{Comments to Annotate}` placeholder.
        #[arg(long)]
        template: Option<PathBuf>,
        /// `stub-neutral`, `stub-garbage`, or `external:<command> [args]`.
        #[arg(long)]
        backend: String,
        #[arg(long)]
        output: PathBuf,
        /// Keep conversations already fully labeled in the output file.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the bigram generator on (prefix, future) pairs.
    TrainGenerator {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Augment the training set with sampled futures and fit the classifier.
    TrainClassifier {
        #[arg(long)]
        train: PathBuf,
        /// Generator model file or `external:<command>`.
        #[arg(long)]
        generator: String,
        #[arg(long)]
        output: PathBuf,
        /// Also write the augmented training set here.
        #[arg(long)]
        augmented: Option<PathBuf>,
    },
    /// Sample continuation sets.
    Generate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        output: PathBuf,
        /// Prefix length (default: each conversation's benign prefix).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate-then-predict forecasts for every conversation.
    Forecast {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        generator: String,
        /// Classifier model file or `external:<command>`.
        #[arg(long)]
        classifier: String,
        #[arg(long)]
        output: PathBuf,
        /// Batch report (vote histogram, skips) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Metrics for a forecast file, optionally tested against a baseline.
    Evaluate {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Markdown table.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Vote-count and prefix-length ablations.
    Ablate {
        #[command(subcommand)]
        kind: AblateKind,
    },
    /// Mean leave-one-out self-BLEU of sampled continuations.
    Diversity {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Full-transcript vs benign-prefix classifier comparison.
    Motivation {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-run the command recorded in a manifest and verify its outputs.
    Replay { manifest: PathBuf },
    /// Print the full-scale fine-tuning and sampling recipes as JSON.
    Presets {
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum AblateKind {
    Votes {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        classifier: String,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated L values.
        #[arg(long)]
        l_values: Option<String>,
    },
    Prefix {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        classifier: String,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated k values.
        #[arg(long)]
        k_values: Option<String>,
    },
}

/// Input or configuration problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Files a command read and wrote, and the seeds it used.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn resolve_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.samples {
        c.forecast.samples = v;
    }
    if let Some(v) = g.temperature {
        c.sampling.temperature = v;
    }
    if let Some(v) = g.top_p {
        c.sampling.top_p = v;
    }
    if let Some(v) = g.repetition_penalty {
        c.sampling.repetition_penalty = v;
    }
    if let Some(v) = g.max_new_tokens {
        c.sampling.max_new_tokens = v;
    }
    if let Some(v) = g.threshold {
        c.forecast.threshold = v;
    }
    if let Some(v) = g.tie_rule {
        c.forecast.tie_rule = match v {
            TieRuleArg::PredictDerailment => TieRule::PredictDerailment,
            TieRuleArg::PredictBenign => TieRule::PredictBenign,
        };
    }
    if let Some(v) = g.aggregation {
        c.forecast.aggregation = match v {
            AggregationArg::Vote => Aggregation::Vote,
            AggregationArg::MeanProbability => Aggregation::MeanProbability,
        };
    }
    if let Some(v) = g.augment_l {
        c.augment.l = v;
    }
    if let Some(v) = g.epochs {
        c.classifier.epochs = v;
    }
    if let Some(v) = g.learning_rate {
        c.classifier.learning_rate = v;
    }
    if g.orientation {
        c.scheme.include_orientation = true;
    }
    if let Some(v) = g.max_retries {
        c.annotation.max_retries = v;
    }
    c.forecast_config().map_err(|e| usage(format!("invalid configuration: {e:#}")))?;
    Ok(c)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
