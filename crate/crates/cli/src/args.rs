//! Command-line surface. Every `RunConfig` field has a flag; a flag only
//! wins when it was actually given, so the precedence is
//! flag > `IMIM_SEED` (seed only) > `--config` file > built-in default.

use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use imim_core::eval::SweepAxis;
use imim_core::model::{LossScope, QueryMode};
use imim_core::training::RunConfig;

fn d() -> RunConfig {
    RunConfig::default()
}

#[derive(Parser, Debug)]
#[command(name = "imim", version, about = "Interactive masked image modeling on RGB+IR imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic RGB+IR dataset (PNG files, annotation sidecars, manifest)
    Synth(SynthArgs),
    /// Pretrain a model and write metrics and checkpoints to the run directory
    Pretrain(PretrainArgs),
    /// Strip a checkpoint down to the encoder
    ExportEncoder(ExportArgs),
    /// Masked-region reconstruction error and linear-probe accuracy of a checkpoint
    Eval(EvalArgs),
    /// Pretrain and evaluate one cell per value of an ablation axis
    Sweep(SweepArgs),
    /// Compare backprop gradients with finite differences on the tiny config
    Gradcheck(GradcheckArgs),
    /// Dump original | masked | reconstruction panels as PNG
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// RunConfig JSON file; flags given on the command line override it
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/<config hash>-<unix time>]
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Worker threads [default: all cores]
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,

    /// Token embedding width
    #[arg(long, default_value_t = d().model.embed_dim)]
    pub embed_dim: usize,
    /// Number of encoder blocks
    #[arg(long, default_value_t = d().model.encoder_depth)]
    pub encoder_depth: usize,
    /// Attention heads
    #[arg(long, default_value_t = d().model.n_heads)]
    pub n_heads: usize,
    /// MLP hidden width as a multiple of the embedding width
    #[arg(long, default_value_t = d().model.mlp_ratio)]
    pub mlp_ratio: usize,
    /// Patch side in pixels; also the mask size
    #[arg(long, default_value_t = d().model.patch_size)]
    pub patch_size: usize,
    /// Input channels: 3 for RGB, 4 for RGB+IR
    #[arg(long, default_value_t = d().model.channels)]
    pub channels: usize,
    #[arg(long, default_value_t = d().model.image_height)]
    pub image_height: usize,
    #[arg(long, default_value_t = d().model.image_width)]
    pub image_width: usize,
    /// q_masked, q_unmasked or null_baseline
    #[arg(long, default_value = d().model.query_mode.as_str())]
    pub query_mode: QueryMode,
    /// full_image or masked_only
    #[arg(long, default_value = d().model.loss_scope.as_str())]
    pub loss_scope: LossScope,
    /// Fraction of tokens masked per image
    #[arg(long, default_value_t = d().mask_ratio)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = d().batch_size)]
    pub batch_size: usize,
    /// Optimizer steps
    #[arg(long, default_value_t = d().steps)]
    pub steps: u64,
    #[arg(long, default_value_t = d().learning_rate)]
    pub learning_rate: f64,
    /// Decoupled AdamW weight decay
    #[arg(long, default_value_t = d().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = d().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = d().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = d().eps)]
    pub eps: f64,
    /// Seed for initialization, data order and masks
    #[arg(long, env = "IMIM_SEED", default_value_t = d().seed)]
    pub seed: u64,
    /// Dataset manifest [default: generated synthetic corpus]
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Synthetic training images when no manifest is given
    #[arg(long, default_value_t = d().synthetic_train)]
    pub synthetic_train: usize,
    /// Synthetic test images when no manifest is given
    #[arg(long, default_value_t = d().synthetic_test)]
    pub synthetic_test: usize,
    /// Checkpoint period in steps; 0 keeps only the first and last
    #[arg(long, default_value_t = d().checkpoint_every)]
    pub checkpoint_every: u64,
    /// Standardize inputs per channel
    #[arg(long, default_value_t = d().standardize, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub standardize: bool,
    /// Record wall-clock seconds in metrics.csv
    #[arg(long, default_value_t = d().log_wall_time, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub log_wall_time: bool,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

macro_rules! overlay {
    ($m:expr, $args:expr, $cfg:expr; $($field:ident => $($path:ident).+),* $(,)?) => {
        $(if given($m, stringify!($field)) {
            $cfg.$($path).+ = $args.$field.clone();
        })*
    };
}

impl RunArgs {
    /// Applies the `--config` file over `base`, then explicit flags.
    pub fn resolve(&self, m: &ArgMatches, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| anyhow::anyhow!(e).context(format!("reading {}", p.display())))?,
            None => base,
        };
        overlay!(m, self, cfg;
            embed_dim => model.embed_dim,
            encoder_depth => model.encoder_depth,
            n_heads => model.n_heads,
            mlp_ratio => model.mlp_ratio,
            patch_size => model.patch_size,
            channels => model.channels,
            image_height => model.image_height,
            image_width => model.image_width,
            query_mode => model.query_mode,
            loss_scope => model.loss_scope,
            mask_ratio => mask_ratio,
            batch_size => batch_size,
            steps => steps,
            learning_rate => learning_rate,
            weight_decay => weight_decay,
            beta1 => beta1,
            beta2 => beta2,
            eps => eps,
            seed => seed,
            synthetic_train => synthetic_train,
            synthetic_test => synthetic_test,
            checkpoint_every => checkpoint_every,
            standardize => standardize,
            log_wall_time => log_wall_time,
        );
        if let Some(p) = &self.manifest {
            cfg.manifest = Some(p.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset directory [default: <run dir>/data]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a training-state checkpoint; its config is the base
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Model or training-state checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Output file [default: <checkpoint stem>-encoder.imim next to the input]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalOpts {
    /// Images scored for reconstruction
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Seed of the held-out mask plans
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    /// Linear-probe gradient-descent epochs
    #[arg(long, default_value_t = 300)]
    pub probe_epochs: usize,
    /// Skip the linear probe
    #[arg(long)]
    pub no_probe: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model, training-state or encoder checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub opts: EvalOpts,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// query_mode, mask_size, modality or mask_ratio
    #[arg(long)]
    pub axis: SweepAxis,
    /// Comma-separated axis values [default: the axis's standard set]
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[command(flatten)]
    pub opts: EvalOpts,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the model, input image and mask plan
    #[arg(long, env = "IMIM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = imim_core::gradcheck::DEFAULT_EPS)]
    pub fd_eps: f64,
    /// Check only this query mode [default: all three]
    #[arg(long)]
    pub query_mode: Option<QueryMode>,
    /// full_image or masked_only
    #[arg(long, default_value = LossScope::FullImage.as_str())]
    pub loss_scope: LossScope,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model or training-state checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Test images to dump
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Seed of the mask plans
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}
