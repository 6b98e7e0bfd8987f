//! The `charcoref` command line: corpus validation, chain building,
//! alignment, evaluation and pairwise judging over a corpus directory.
//!
//! Exit codes: 0 on success, 2 for bad input or failed validation, 3 when
//! the language-model service fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use charcoref::corpus::{CorpusError, Finding};
use charcoref::llm::LlmError;
use charcoref::visual::Aggregation;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub mod config;
pub mod eval;
pub mod judge;
pub mod manifest;
pub mod stages;

use config::{Config, SimilarityKind};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SERVICE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("corpus validation failed with {} finding(s)", .0.len())]
    Validation(Vec<Finding>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("language model service: {0}")]
    Service(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Service(_) => EXIT_SERVICE,
            _ => EXIT_INPUT,
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(_) | LlmError::MissingApiKey(_) | LlmError::Template(_) => Self::Input(e.to_string()),
            _ => Self::Service(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "charcoref", version, about = "Character coreference chains and evaluation for visual stories")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: one per CPU).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check every corpus document and list rule violations.
    Validate { corpus: PathBuf },
    /// Build visual chains for every sequence.
    Vchains {
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        visual: VisualArgs,
    },
    /// Parse annotated stories into structured story documents.
    Tchains {
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Require each annotation to reproduce story.txt.
        #[arg(long)]
        verify: bool,
    },
    /// Align textual clusters with visual chains.
    Align {
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        align: AlignArgs,
    },
    /// Score predictions against gold annotations and write a report.
    Eval {
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Ask a language model to compare story pairs.
    Judge(judge::JudgeArgs),
    /// Run vchains, tchains, align and eval, skipping up-to-date stages.
    Pipeline {
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        visual: VisualArgs,
        #[command(flatten)]
        align: AlignArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args, Debug, Default)]
pub struct OutArg {
    /// Output root (default: `out` next to the corpus directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl OutArg {
    pub fn resolve(&self, corpus: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| corpus.with_file_name("out"))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationArg {
    Mean,
    Max,
    Last,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::Last => Aggregation::Last,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct VisualArgs {
    /// Minimum chain similarity for a detection to join a chain.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub sim: Option<SimilarityKind>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long)]
    pub person_label: Option<String>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long)]
    pub min_area: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct AlignArgs {
    /// Fewest shared slots for a fused chain.
    #[arg(long)]
    pub min_overlap: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Comma-separated metrics (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub metrics: Vec<eval::MetricName>,
    /// Score the pipeline outputs, or the gold files against themselves.
    #[arg(long, value_enum, default_value_t = eval::PredSource::Out)]
    pub pred_source: eval::PredSource,
    #[arg(long, value_enum, default_value_t = eval::GoldFormat::Native)]
    pub gold_format: eval::GoldFormat,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// JSON file with externally computed `grooviist` / `mauve` scores.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Report path (default: `<out>/report.doc`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Cli {
    /// Configuration file plus flag overrides.
    pub fn effective_config(&self) -> Result<Config, CliError> {
        let mut c = Config::load(self.config.as_deref())?;
        if let Some(w) = self.workers {
            c.workers = w;
        }
        match &self.command {
            Command::Vchains { visual, .. } => apply_visual(&mut c, visual),
            Command::Align { align, .. } => apply_align(&mut c, align),
            Command::Eval { eval, .. } => apply_eval(&mut c, eval),
            Command::Pipeline {
                visual, align, eval, ..
            } => {
                apply_visual(&mut c, visual);
                apply_align(&mut c, align);
                apply_eval(&mut c, eval);
            }
            Command::Judge(j) => j.apply(&mut c),
            Command::Validate { .. } | Command::Tchains { .. } => {}
        }
        c.validate()?;
        Ok(c)
    }
}

fn apply_visual(c: &mut Config, v: &VisualArgs) {
    if let Some(t) = v.tau {
        c.visual.tau = t;
    }
    if let Some(s) = v.sim {
        c.visual.similarity = s;
    }
    if let Some(a) = v.aggregation {
        c.visual.aggregation = a.into();
    }
    if let Some(l) = &v.person_label {
        c.visual.policy.person_label = l.clone();
    }
    if let Some(x) = v.min_confidence {
        c.visual.policy.min_confidence = x;
    }
    if let Some(x) = v.min_area {
        c.visual.policy.min_area_fraction = x;
    }
}

fn apply_align(c: &mut Config, a: &AlignArgs) {
    if let Some(m) = a.min_overlap {
        c.align.min_overlap = m;
    }
}

fn apply_eval(c: &mut Config, e: &EvalArgs) {
    if let Some(t) = e.iou_threshold {
        c.eval.matching.iou_threshold = t;
    }
}

/// A thread pool honouring the `workers` setting.
pub fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start worker pool: {e}")))
}

/// Runs `f` on every item in the pool and returns results in input
/// order, or the first error in input order.
pub fn par_map<S, T, F>(pool: &rayon::ThreadPool, items: &[S], f: F) -> Result<Vec<T>, CliError>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> Result<T, CliError> + Sync,
{
    use rayon::prelude::*;
    let results: Vec<Result<T, CliError>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = cli.effective_config()?;
    match &cli.command {
        Command::Validate { corpus } => stages::cmd_validate(corpus),
        Command::Vchains { corpus, out, .. } => stages::cmd_vchains(corpus, &out.resolve(corpus), &config),
        Command::Tchains { corpus, out, verify } => stages::cmd_tchains(corpus, &out.resolve(corpus), &config, *verify),
        Command::Align { corpus, out, .. } => stages::cmd_align(corpus, &out.resolve(corpus), &config),
        Command::Eval { corpus, out, eval } => eval::cmd_eval(corpus, &out.resolve(corpus), &config, eval),
        Command::Judge(args) => judge::cmd_judge(args, &config),
        Command::Pipeline { corpus, out, eval, .. } => stages::cmd_pipeline(corpus, &out.resolve(corpus), &config, eval),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if let CliError::Validation(findings) = &e {
                for f in findings {
                    eprintln!("{}: {}: {}", f.file, f.entity, f.rule);
                }
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
