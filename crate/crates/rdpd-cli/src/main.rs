//! Experiment driver for the distillation toolkit: teacher/student
//! training, sweep matrices, attention dumps, and checkpoint evaluation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rdpd::distill::LossTermSet;
use rdpd::Precision;

const AFTER_HELP: &str = "\
modes map bijectively to loss-term sets:
  direct   = hard
  kd       = hard + soft
  rdpd-r1  = hard + soft + comb
  rdpd-r2  = att + hard + soft
  rdpd     = att + hard + soft + comb

environment:
  DISTILL_PRECISION={32,64}   training arithmetic width (default 64)

exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence";

#[derive(Parser)]
#[command(name = "rdpd", version, about = "attention-imitation distillation experiments", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the rich view and freeze its bundle
    TrainTeacher(TrainTeacherArgs),
    /// Train students on a poor view under a loss-term preset
    TrainStudent(TrainStudentArgs),
    /// Run a sweep axis (rich-fraction, noise-amp, temperature)
    Sweep(SweepArgs),
    /// Dump attention weights and predicted probabilities per sample
    DumpAttention(DumpAttentionArgs),
    /// Re-evaluate a checkpoint on a split
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset manifest (TOML); subject CSV files live next to it
    #[arg(long, value_name = "PATH", conflicts_with = "synth")]
    pub manifest: Option<PathBuf>,
    /// Use the built-in synthetic dataset, optionally from a TOML config
    #[arg(long, value_name = "PATH", num_args = 0..=1)]
    pub synth: Option<Option<PathBuf>>,
    /// Skip per-channel standardization fitted on the training split
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Args, Clone)]
pub struct OptimArgs {
    /// Softmax temperature T for soft labels (and the teacher objective)
    #[arg(long, default_value_t = 5.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Training length in --iteration-unit units
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = UnitArg::Epochs)]
    pub iteration_unit: UnitArg,
    #[arg(long, value_enum, default_value_t = MetricArg::PrAuc)]
    pub early_stop_metric: MetricArg,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
}

#[derive(Args, Clone)]
pub struct TeacherSpecArgs {
    /// Teacher conv filters K
    #[arg(long, default_value_t = 32)]
    pub filters: usize,
    /// Teacher LSTM width U (split across two directions)
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub filter_width: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    /// Drop the dense-layer bias term
    #[arg(long)]
    pub no_dense_bias: bool,
}

#[derive(Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub spec: TeacherSpecArgs,
    /// Teacher initialization / batch-order seed
    #[arg(long, default_value_t = 1009)]
    pub seed: u64,
    /// Train the teacher against a plain T=1 softmax instead of the
    /// temperature-T objective
    #[arg(long)]
    pub teacher_t1: bool,
    /// Output directory (checkpoint, bundle, logs, eval, config)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainStudentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Teacher checkpoint (supplies the teacher spec)
    #[arg(long)]
    pub teacher: PathBuf,
    /// Frozen teacher outputs; required by kd/rdpd-* modes, refused by direct
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Channel group defining the poor view
    #[arg(long, default_value = "poor")]
    pub group: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub seeds: Vec<u64>,
    /// Additive noise amplitude applied to the poor view
    #[arg(long, default_value_t = 0.0)]
    pub noise_amp: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Normal)]
    pub noise_kind: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Combine-head bias as a broadcast scalar instead of per-class
    #[arg(long)]
    pub scalar_comb_bias: bool,
    /// Parallel worker threads for independent runs
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub spec: TeacherSpecArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Axis values; the temperature axis defaults to 1,2,5,10,20
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = [ModeArg::Direct, ModeArg::Kd, ModeArg::Rdpd])]
    pub modes: Vec<ModeArg>,
    #[arg(long, default_value = "poor")]
    pub group: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1009)]
    pub teacher_seed: u64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Normal)]
    pub noise_kind: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DumpAttentionArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to dump, as PATH or PATH:GROUP; repeatable
    #[arg(long = "ckpt", value_name = "PATH[:GROUP]", required = true)]
    pub ckpts: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Explicit sample ids (subject:window); empty takes the first --n-samples
    #[arg(long, value_delimiter = ',')]
    pub samples: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub n_samples: usize,
    /// Output directory; prints to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Channel group the checkpointed model sees
    #[arg(long, default_value = "all")]
    pub group: String,
    /// Output directory; prints to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Direct,
    Kd,
    #[value(name = "rdpd-r1")]
    RdpdR1,
    #[value(name = "rdpd-r2")]
    RdpdR2,
    Rdpd,
}

impl ModeArg {
    pub fn terms(self) -> LossTermSet {
        match self {
            ModeArg::Direct => LossTermSet::DIRECT,
            ModeArg::Kd => LossTermSet::KD,
            ModeArg::RdpdR1 => LossTermSet::RDPD_R1,
            ModeArg::RdpdR2 => LossTermSet::RDPD_R2,
            ModeArg::Rdpd => LossTermSet::RDPD,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeArg::Direct => "direct",
            ModeArg::Kd => "kd",
            ModeArg::RdpdR1 => "rdpd-r1",
            ModeArg::RdpdR2 => "rdpd-r2",
            ModeArg::Rdpd => "rdpd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Epochs,
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    PrAuc,
    RocAuc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Normal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Valid => "valid",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    RichFraction,
    NoiseAmp,
    Temperature,
}

impl AxisArg {
    pub fn name(self) -> &'static str {
        match self {
            AxisArg::RichFraction => "rich-fraction",
            AxisArg::NoiseAmp => "noise-amp",
            AxisArg::Temperature => "temperature",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let precision = match Precision::from_env() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::TrainTeacher(args) => commands::train_teacher_cmd(args, precision),
        Command::TrainStudent(args) => commands::train_student_cmd(args, precision),
        Command::Sweep(args) => commands::sweep_cmd(args, precision),
        Command::DumpAttention(args) => commands::dump_attention_cmd(args),
        Command::Eval(args) => commands::eval_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
