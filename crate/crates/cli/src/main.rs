//! `analogy`: dataset generation, training, sweeps, metric analysis, LLM
//! probe analysis and SVG plotting.
//!
//! Exit status: 0 success, 2 usage error, 3 validation or format error,
//! 4 numerical failure.

mod commands;
mod error;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "analogy",
    version,
    about = "Synthetic analogical-reasoning workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a fact dataset.
    Gen(GenArgs),
    /// Train one model and write its history, metrics and checkpoint.
    Train(TrainArgs),
    /// Train over a grid of values x seeds and write a summary.
    Sweep(SweepArgs),
    /// Compute representation metrics and PCA for a saved checkpoint.
    Analyze(AnalyzeArgs),
    /// Prompts for pretrained models and analysis of their hidden-state dumps.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Render history or metric CSVs as SVG line charts.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FunctorArg {
    Uniform,
    IdentityOffset,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Run config or run manifest whose dataset section is used as the base.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total entity count |E| (split evenly between the two categories).
    #[arg(long)]
    pub entities: Option<usize>,
    /// Size of the relation vocabulary |R|.
    #[arg(long)]
    pub relations: Option<usize>,
    /// Fraction of compositional facts held out.
    #[arg(long)]
    pub comp_ood: Option<f64>,
    /// Fraction of analogical facts held out.
    #[arg(long)]
    pub ana_ood: Option<f64>,
    /// Fraction of atomic training facts removed.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Include compositional paths that return to their source.
    #[arg(long)]
    pub include_cycles: bool,
    /// How the cross-category bijection is drawn.
    #[arg(long, value_enum)]
    pub functor: Option<FunctorArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for dataset.json and manifest.json; prints the
    /// dataset JSON to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Run config JSON, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `train.lr=3e-4`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `train.max_steps`.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Seed for both the dataset and the model.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Do not print evaluation lines to stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Field to vary: entities, relations, comp_ood, ana_ood, weight_decay,
    /// batch_size, lr, d_model, n_layers or sparsity.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values of the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Seeds 0..K per value.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; one `<axis>=<value>/seed_<k>` directory per run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// dataset.json the checkpoint was trained on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Use unembedding columns instead of embedding rows.
    #[arg(long)]
    pub unembedding: bool,
    /// Principal components to export.
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ProbeCommand {
    /// Write an in-context analogy prompt spec.
    GenPrompt(GenPromptArgs),
    /// Per-layer energy and PCA of a hidden-state dump.
    Analyze(ProbeAnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct GenPromptArgs {
    /// 1 scrambled, 2 contiguous, 3 task tokens, 4 bare numbers.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub variant: u8,
    /// Entities per category.
    #[arg(long)]
    pub entities: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file; prints to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeAnalyzeArgs {
    /// Dump directory with manifest.json and layer_XXX.f32 files.
    #[arg(long)]
    pub dump: PathBuf,
    /// Prompt spec the dump was produced from; checked when given.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    /// Layers to export PCA for, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub pca_layers: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    /// Per-layer metric CSV. PCA files and `<stem>.manifest.json` are written
    /// beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// history.csv or metrics.csv; repeat for seeds of the same run.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Panels to draw, comma-separated. History CSVs: accuracy, probability,
    /// loss. Metric CSVs: energy, attention, parallelism. Default: all.
    #[arg(long, value_delimiter = ',')]
    pub panels: Vec<String>,
    /// Logarithmic x axis.
    #[arg(long)]
    pub log_x: bool,
    #[arg(long)]
    pub title: Option<String>,
    /// Output directory; one `<panel>.svg` per panel.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Probe(ProbeCommand::GenPrompt(a)) => commands::gen_prompt(a),
        Command::Probe(ProbeCommand::Analyze(a)) => commands::probe_analyze(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("analogy: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
