//! `glori` command-line front end.
//!
//! Subcommands wire the library into reproducible experiments: synthetic
//! data generation, head training (with the learning-rate grid protocol),
//! statistical evaluation, attention-map export, and survival analysis.
//! Every artifact-producing command writes a run manifest next to its
//! outputs. Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric
//! failure.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use glori_core::Error;

#[derive(Parser)]
#[command(name = "glori", version, about = "Probing heads over frozen backbone embeddings")]
struct Cli {
    /// Worker threads for parallel sections (grid search, bootstrap,
    /// permutations). Defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted-signal synthetic benchmark into a directory.
    GenSynth(GenSynthArgs),
    /// Train a probe head on a data directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (optionally against a comparison checkpoint).
    Eval(EvalArgs),
    /// Export an attention heatmap for one image and finding.
    AttnMaps(AttnArgs),
    /// Kaplan-Meier curves and log-rank test for risk groups.
    Km(KmArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Generator spec JSON; the built-in benchmark spec when omitted.
    #[arg(long)]
    spec: Option<std::path::PathBuf>,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadKind {
    Linear,
    Glori,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelMetric {
    MacroAuroc,
    MacroAuprc,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    head: HeadKind,
    #[arg(long)]
    data: std::path::PathBuf,
    /// Checkpoint output path; the run log is written alongside it.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Fixed learning rate; mutually exclusive with --lr-search.
    #[arg(long, conflicts_with = "lr_search")]
    lr: Option<f64>,
    /// Grid-search the learning rate on the validation split, then retrain
    /// on train+val at the best rate.
    #[arg(long)]
    lr_search: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SelMetric::MacroAuroc)]
    selection_metric: SelMetric,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// GLoRI head width.
    #[arg(long, default_value_t = 768)]
    d_glori: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    temp_hidden: usize,
    /// Disable the [CLS] skip connection (ablation).
    #[arg(long)]
    no_global: bool,
    /// Disable the adaptive temperature module (ablation).
    #[arg(long)]
    no_adaptive_temp: bool,
    /// Disable the pyramid coarse branch (ablation).
    #[arg(long)]
    no_pyramid: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    /// Second checkpoint for paired permutation tests.
    #[arg(long)]
    compare_ckpt: Option<std::path::PathBuf>,
    #[arg(long)]
    data: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BranchArg {
    Fine,
    Coarse,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    #[arg(long)]
    image_id: u64,
    /// Finding name as in the label table header.
    #[arg(long)]
    finding: String,
    #[arg(long, value_enum)]
    branch: BranchArg,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct KmArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    /// Survival table CSV (image_id,time_days,event).
    #[arg(long)]
    survival: std::path::PathBuf,
    /// Risk score = probability of this finding; mean over findings when
    /// omitted.
    #[arg(long)]
    finding: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    quantile: f64,
    #[arg(long)]
    out: std::path::PathBuf,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Shape(_) | Error::Format(_) | Error::Data(_) | Error::Io(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: failed to size the thread pool: {e}");
            std::process::exit(1);
        }
    }
    let result = match cli.cmd {
        Cmd::GenSynth(args) => commands::gen_synth(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::AttnMaps(args) => commands::attn_maps(args),
        Cmd::Km(args) => commands::km(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
