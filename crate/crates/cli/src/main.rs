mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use polarfuse::evaluation::PairingPolicy;
use polarfuse::losses::LossSubset;

/// Bad arguments or inputs; maps to exit code 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser)]
#[command(name = "polarfuse", version, about = "Polarimetric thermal to visible face synthesis")]
struct Cli {
    /// More log output (-v debug, -vv trace). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw polarizer captures into an aligned Stokes/visible dataset.
    Preprocess(PreprocessArgs),
    /// Write a procedural dataset (or raw captures with `--raw`).
    GenSynthetic(GenSyntheticArgs),
    /// Train a generator; writes checkpoint, log and manifest.
    Train(TrainArgs),
    /// Run a trained generator over a dataset and write PNGs.
    Synthesize(SynthesizeArgs),
    /// Image quality and verification metrics of probes against targets.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a set of variants and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub crop_height: usize,
    #[arg(long, default_value_t = 256)]
    pub crop_width: usize,
    #[arg(long, default_value_t = 0.5)]
    pub stokes_scale: f64,
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write unaligned raw captures instead of a dataset.
    #[arg(long, requires = "annotations")]
    pub raw: bool,
    /// Fiducial annotation directory for `--raw`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Raw capture size; defaults to 5/4 of the resolution.
    #[arg(long)]
    pub frame_size: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    pub bad_pixel_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Full-size networks at 256×256.
    Default,
    /// Reduced widths at 64×64.
    Desk,
    /// Smallest networks at 16×16.
    Toy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    Input,
    Feature,
    Output,
}

fn parse_loss_subset(s: &str) -> Result<LossSubset, String> {
    LossSubset::ALL.into_iter().find(|l| l.label().eq_ignore_ascii_case(s)).ok_or_else(|| {
        let labels: Vec<_> = LossSubset::ALL.iter().map(|l| l.label()).collect();
        format!("expected one of {}", labels.join(", "))
    })
}

fn parse_pairing(s: &str) -> Result<PairingPolicy, String> {
    s.parse().map_err(|e: polarfuse::Error| e.to_string())
}

/// Flags mirroring training config fields; each overrides the config file.
#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    /// Starting configuration, overlaid by `--config` and then by flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON training config or a previous run's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub lambda_i: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long, value_enum)]
    pub fusion_mode: Option<FusionArg>,
    /// Comma-separated Stokes channels, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub stokes_channels: Option<Vec<usize>>,
    /// L2, L2-GAN, L2-GAN-P or full.
    #[arg(long, value_parser = parse_loss_subset)]
    pub loss_subset: Option<LossSubset>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    Protocol1,
    Protocol2,
    Custom,
}

#[derive(Args, Clone)]
pub struct SplitArgs {
    /// Saved split JSON; takes precedence over `--protocol`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Training subject fraction for the custom protocol.
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Train on the training side of this split; all samples otherwise.
    #[command(flatten)]
    pub split: SplitArgs,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Side {
    Train,
    Test,
    All,
}

#[derive(Args)]
pub struct SynthesizeArgs {
    /// Training checkpoint or generator archive.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with Stokes images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one side of a saved split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub side: Side,
    /// Needed for generator archives, which do not record their inputs.
    #[arg(long, value_delimiter = ',')]
    pub stokes_channels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    /// Synthesized images, `<idx>_syn.png`.
    Syn,
    /// Visible images, `<idx>_vis.png`.
    Vis,
    /// S0 planes, `<idx>_s0.png`.
    S0,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory holding the probe images.
    #[arg(long)]
    pub synth: PathBuf,
    /// Dataset directory with the visible targets.
    #[arg(long)]
    pub target: PathBuf,
    /// Identity extractor archive or training checkpoint.
    #[arg(long)]
    pub extractor: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "syn")]
    pub probe_kind: ProbeKind,
    /// all-pairs or cross-sample.
    #[arg(long, value_parser = parse_pairing, default_value = "all-pairs")]
    pub pairing: PairingPolicy,
    #[arg(long, default_value_t = 512)]
    pub roc_size: u32,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Defaults to the custom protocol.
    #[command(flatten)]
    pub split: SplitArgs,
    /// JSON list of variants; the standard set otherwise.
    #[arg(long, conflicts_with = "variant")]
    pub variants: Option<PathBuf>,
    /// Run only the named standard variants (repeatable).
    #[arg(long)]
    pub variant: Vec<String>,
    #[arg(long, value_parser = parse_pairing, default_value = "all-pairs")]
    pub pairing: PairingPolicy,
}

/// 1 for bad inputs, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    use polarfuse::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. }
                | E::Image { .. }
                | E::Json(_)
                | E::Archive(_)
                | E::Shape(_)
                | E::InvalidInput(_)
                | E::Config(_)
                | E::Singular(_)
                | E::UnknownTap { .. } => 1,
                E::Tensor(_) | E::NonFinite { .. } | E::Diverged { .. } => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
