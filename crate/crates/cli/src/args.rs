//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mirror_align::PairStrategy;

#[derive(Debug, Parser)]
#[command(
    name = "mirror-align",
    version,
    about = "Synthetic mirror-neuron alignment experiments"
)]
pub struct Cli {
    /// TOML file with `[gen]`, `[train]` and `[probe]` sections. Flags
    /// override the file, which overrides built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its train/test split.
    Gen(GenArgs),
    /// Train the action-understanding baseline.
    TrainAu(TrainArgs),
    /// Train the embodied-execution baseline.
    TrainEe(TrainArgs),
    /// Train both task models jointly with the alignment objective.
    TrainJoint(TrainArgs),
    /// Fit an alignment probe on frozen representations of one checkpoint.
    Probe(ProbeArgs),
    /// Probe every checkpoint shared by the given runs.
    Curve(CurveArgs),
    /// Compare alignment on execution successes and failures.
    Subsets(SubsetArgs),
    /// Joint training over a pairing-strategy by temperature grid.
    Ablate(AblateArgs),
    /// Write per-episode representations as delimited text.
    DumpEmbeddings(DumpArgs),
    /// Collect the summaries of finished runs into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Episode,
    Instruction,
    Class,
}

impl From<StrategyArg> for PairStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Episode => PairStrategy::ByEpisode,
            StrategyArg::Instruction => PairStrategy::ByInstruction,
            StrategyArg::Class => PairStrategy::ByClass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Share of episodes held out for evaluation.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

/// Overrides shared by every command that trains task models.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Alignment temperature.
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub lambda_ee: Option<f64>,
    #[arg(long)]
    pub lambda_align: Option<f64>,
    /// Shared latent width of the alignment head.
    #[arg(long)]
    pub dz: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Probability that a joint step applies the understanding loss.
    #[arg(long)]
    pub au_freq: Option<f64>,
    /// Let alignment gradients reach only the heads.
    #[arg(long)]
    pub stop_grad_encoders: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file written by `gen`.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

/// Overrides for the alignment probe.
#[derive(Debug, Args, Default)]
pub struct ProbeOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Probe temperature.
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub dz: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

/// Where the frozen task models come from.
#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Training output directory. Repeat to take the understanding model
    /// and the execution model from different runs.
    #[arg(long = "run", value_name = "DIR", required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Checkpoint tag such as `init`, `f0.25` or `final`.
    #[arg(long, default_value = "final")]
    pub checkpoint: String,
    /// Split the probe is evaluated on. It is always fit on the train split.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub probe: ProbeOverrides,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub probe: ProbeOverrides,
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, default_value = "final")]
    pub checkpoint: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub probe: ProbeOverrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "episode,instruction,class"
    )]
    pub strategies: Vec<StrategyArg>,
    #[arg(long, value_delimiter = ',', default_value = "0.02,0.1,0.2")]
    pub temps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Shorter training for smoke runs.
    #[arg(long)]
    pub fast: bool,
    #[arg(long)]
    pub lambda_ee: Option<f64>,
    #[arg(long)]
    pub lambda_align: Option<f64>,
    #[arg(long)]
    pub dz: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub au_freq: Option<f64>,
    #[arg(long)]
    pub stop_grad_encoders: bool,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, default_value = "final")]
    pub checkpoint: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a training, probe, curve, subsets or ablate
    /// command. Repeatable.
    #[arg(long = "run", value_name = "DIR", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
