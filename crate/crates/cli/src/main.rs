// SPDX-License-Identifier: MIT OR Apache-2.0

//! `vitdecomp`: generate toy datasets, train toy transformers, decompose
//! their representations and run the downstream analyses. Every command
//! reads and writes artifacts under one root directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Exit status for bad input, missing or corrupt artifacts.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit status for violated numeric invariants.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "vitdecomp", version, about = "Component decomposition toolkit for toy vision transformers")]
struct Cli {
    /// Artifact root directory.
    #[arg(long, env = "VITDECOMP_ROOT", default_value = ".", global = true)]
    root: PathBuf,
    /// `key = value` file of default arguments; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes-on-backgrounds dataset.
    Dataset(DatasetArgs),
    /// Train a toy model, a teacher encoder, or a probe on a frozen backbone.
    Train(TrainArgs),
    /// Decompose model representations of a dataset split.
    Decompose(DecomposeArgs),
    /// Fit component-wise maps into the teacher space, or compare fitted ones.
    Align(AlignArgs),
    /// Score every component against every teacher feature.
    Score(ScoreArgs),
    /// Rank images by a text-like or image query restricted to components.
    #[command(subcommand)]
    Retrieve(RetrieveCmd),
    /// Render a per-token heatmap for one image.
    Heatmap(HeatmapArgs),
    /// Mean-ablate layers from the last backwards and record accuracy.
    Ablate(AblateArgs),
    /// Mean-ablate components tied to a spurious feature.
    Mitigate(MitigateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutArg {
    Full,
    LeftHalf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    Foreground,
    Background,
    Joint,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct DatasetArgs {
    #[arg(long)]
    pub id: String,
    /// Number of foreground shapes.
    #[arg(long, default_value_t = 2)]
    pub fg: usize,
    /// Number of background textures.
    #[arg(long, default_value_t = 2)]
    pub bg: usize,
    /// Shape/background correlation of the training split.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.5)]
    pub rho_val: f64,
    #[arg(long, default_value_t = 1600)]
    pub n_train: usize,
    #[arg(long, default_value_t = 400)]
    pub n_val: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f32,
    #[arg(long, value_enum, default_value_t = LayoutArg::Full)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub dataset: String,
    /// vanilla-cls, vanilla-meanpool, windowed or gridblock.
    #[arg(long, default_value = "vanilla-cls")]
    pub variant: String,
    #[arg(long, value_enum, default_value_t = TargetArg::Foreground)]
    pub target: TargetArg,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Train a teacher encoder with feature prototypes instead.
    #[arg(long, conflicts_with = "backbone")]
    pub teacher: bool,
    /// Teacher output width.
    #[arg(long, default_value_t = 32)]
    pub d_ref: usize,
    /// Fit only a linear probe on this frozen model's features.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub probe_lr: f32,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub model: String,
    /// Defaults to the model's training dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// component, component-token, layer or total.
    #[arg(long, default_value = "component")]
    pub granularity: String,
    /// `all` or the number of final layers to decompose.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Decompose at most this many images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AlignArgs {
    /// Aligner to create (omit with --compare).
    #[arg(long, required_unless_present = "compare")]
    pub id: Option<String>,
    /// Component-granularity decomposition set.
    #[arg(long)]
    pub decomp: String,
    #[arg(long)]
    pub teacher: String,
    /// Regularizer weight (default 1/d_ref).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Drop the regularizer from the loss.
    #[arg(long)]
    pub no_reg: bool,
    /// One shared map for all components.
    #[arg(long)]
    pub tied: bool,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Fraction of epochs over which lambda ramps up from 0.
    #[arg(long, default_value_t = 0.5)]
    pub lambda_warmup: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated aligners to evaluate on `--decomp` instead of training.
    #[arg(long, conflicts_with = "id")]
    pub compare: Option<String>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub aligner: String,
    #[arg(long)]
    pub decomp: String,
    #[arg(long)]
    pub teacher: String,
    #[arg(long, default_value = "shape,background,color")]
    pub features: String,
}

/// Which components feed a query.
#[derive(Debug, Args, Serialize)]
pub struct Selection {
    /// Comma-separated component names such as `L00.H1,L02.mlp`.
    #[arg(long)]
    pub components: Option<String>,
    /// Pick the `--top` components with the largest score gap instead.
    #[arg(long, conflicts_with = "components", requires = "select_feature")]
    pub scores: Option<String>,
    /// Feature whose gap drives `--scores` selection.
    #[arg(long)]
    pub select_feature: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

#[derive(Debug, Subcommand)]
pub enum RetrieveCmd {
    /// Query with a teacher prototype in the aligned space.
    Text(RetrieveTextArgs),
    /// Query with another image in the model's own space.
    Image(RetrieveImageArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RetrieveTextArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub aligner: String,
    #[arg(long)]
    pub decomp: String,
    #[arg(long)]
    pub teacher: String,
    #[arg(long)]
    pub feature: String,
    #[arg(long)]
    pub value: String,
    #[command(flatten)]
    pub selection: Selection,
    /// Images to return.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RetrieveImageArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub decomp: String,
    /// Position of the query image inside the decomposition set.
    #[arg(long)]
    pub reference: usize,
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub aligner: String,
    /// Component-token decomposition set.
    #[arg(long)]
    pub decomp: String,
    #[arg(long)]
    pub teacher: String,
    #[arg(long)]
    pub feature: String,
    #[arg(long)]
    pub value: String,
    /// Position of the image inside the decomposition set.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Comma-separated components (default: every aligned component).
    #[arg(long)]
    pub components: Option<String>,
    /// Flip the sign of the query.
    #[arg(long)]
    pub negate: bool,
    /// Pixels per cell in the PNG.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub model: String,
    /// Component-granularity decomposition over all layers.
    #[arg(long)]
    pub decomp: String,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct MitigateArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub model: String,
    /// Decompositions the ablation means are fitted on.
    #[arg(long)]
    pub fit: String,
    /// Decompositions the group accuracies are measured on.
    #[arg(long)]
    pub decomp: String,
    #[arg(long)]
    pub scores: String,
    #[arg(long, default_value = "background")]
    pub spurious: String,
    #[arg(long, default_value = "shape")]
    pub core: String,
    /// Contrast against the core feature only instead of every feature.
    #[arg(long)]
    pub contrast_core_only: bool,
    /// Components to ablate (default depends on the component count).
    #[arg(long)]
    pub k: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<vitdecomp::Error>())
        .any(vitdecomp::Error::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

fn report_error(err: &anyhow::Error, code: u8, json: bool) {
    if json {
        let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
        let kind = if code == EXIT_NUMERIC { "numeric" } else { "validation" };
        let body = serde_json::json!({ "error": err.to_string(), "kind": kind, "exit_code": code, "causes": chain });
        eprintln!("{body}");
    } else {
        eprintln!("error: {err:#}");
    }
}

fn main() -> ExitCode {
    let raw: Vec<_> = std::env::args_os().collect();
    let wants_json = raw.iter().any(|a| a == "--error-json");
    let cmd = Cli::command();
    let args = match config::expand(&cmd, raw) {
        Ok(a) => a,
        Err(e) => {
            report_error(&e, EXIT_VALIDATION, wants_json);
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() || !wants_json => e.exit(),
        Err(e) => {
            report_error(&anyhow::anyhow!(e.to_string()), EXIT_VALIDATION, true);
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match commands::run(&cli.root, cli.cmd) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            report_error(&e, code, cli.error_json);
            ExitCode::from(code)
        }
    }
}
