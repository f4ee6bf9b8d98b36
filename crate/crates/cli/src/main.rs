//! `lstcn`: synthesize data, train, evaluate, run ablations and the
//! numerical self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "lstcn",
    version,
    about = "Gait recognition with local spatiotemporal convolutions"
)]
pub struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Force the deterministic execution mode.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Directory receiving every artifact.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, value_name = "LEVEL", default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic walker dataset with its manifest and a matching train config.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints and the metrics log.
    Train(TrainArgs),
    /// Rank-1 evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks over every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Compare fused and three-branch LSTC inference.
    Fusecheck(FusecheckArgs),
    /// Summarize the logs and reports of a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of subjects.
    #[arg(long, value_name = "N")]
    pub subjects: Option<usize>,
    /// Frames per sequence.
    #[arg(long, value_name = "N")]
    pub frames: Option<usize>,
    /// Comma-separated view angles in degrees.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub views: Option<Vec<i32>>,
    /// Comma-separated conditions (NM, BG, CL, SYNTH).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub conditions: Option<Vec<lstcn_data::Condition>>,
    /// Sequences per subject, view and condition.
    #[arg(long, value_name = "N")]
    pub seqs_per_cell: Option<u32>,
    /// Identical body geometry for every subject.
    #[arg(long, conflicts_with = "vary_geometry")]
    pub motion_only: bool,
    /// Per-subject body geometry.
    #[arg(long)]
    pub vary_geometry: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Override `max_iters`.
    #[arg(long, value_name = "N")]
    pub max_iters: Option<u64>,
    /// Ablation variant: static_only, gsp_lstc, h_only, v_only, gbsp_lstc or gstp_head.
    #[arg(long, value_name = "NAME", value_parser = parse_variant)]
    pub variant: Option<lstcn_core::Variant>,
    /// Override `checkpoint_every`.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<u64>,
    /// Evaluate the final model after training.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Override `eval.include_same_view`.
    #[arg(long, value_name = "BOOL")]
    pub include_same_view: Option<bool>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants; default is the full grid.
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<lstcn_core::Variant>>,
    /// Comma-separated pooling modes (max, mean, gem).
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_pool)]
    pub pools: Option<Vec<lstcn_core::PoolMode>>,
    /// Override `max_iters` for every run.
    #[arg(long, value_name = "N")]
    pub max_iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, value_name = "N", default_value_t = 50)]
    pub trials: usize,
    /// Comma-separated op names; default is every op plus the tiny network.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct FusecheckArgs {
    /// Random kernel banks and inputs.
    #[arg(long, value_name = "N", default_value_t = 100)]
    pub trials: usize,
    /// Also compare fused and unfused eval features of this checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory to summarize; defaults to --out.
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<lstcn_core::Variant, String> {
    lstcn_core::Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = lstcn_core::Variant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown variant {s:?}; expected one of {}",
            names.join(", ")
        )
    })
}

fn parse_pool(s: &str) -> Result<lstcn_core::PoolMode, String> {
    match s {
        "max" => Ok(lstcn_core::PoolMode::Max),
        "mean" => Ok(lstcn_core::PoolMode::Mean),
        "gem" => Ok(lstcn_core::PoolMode::Gem),
        _ => Err(format!(
            "unknown pooling mode {s:?}; expected max, mean or gem"
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
