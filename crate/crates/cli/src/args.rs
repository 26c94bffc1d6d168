use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ltkd::grouping::GroupPolicy;
use ltkd::model::SgdConfig;
use ltkd::pipeline::{LrSchedule, Method};

#[derive(Debug, Parser)]
#[command(name = "ltkd", version, about = "Group-decomposed knowledge distillation for long-tailed data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a long-tailed synthetic train split and a balanced test split
    GenData(GenDataArgs),
    /// Train a teacher with cross-entropy
    TrainTeacher(TeacherArgs),
    /// Distill a trained teacher into a student
    Distill(DistillArgs),
    /// Evaluate a checkpoint per group
    Eval(EvalArgs),
    /// Run the randomized self-check suites
    Check(CheckArgs),
    /// Sweep α and β for the long-tailed objective
    Ablate(AblateArgs),
    /// Per-batch teacher group sums
    BiasTrace(BiasTraceArgs),
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("imbalance factor must be >= 1, got {v}"))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    /// Samples of the largest class
    #[arg(long, default_value_t = 500)]
    pub base: usize,
    /// Imbalance factor (largest over smallest class)
    #[arg(long, default_value_t = 100.0, value_parser = parse_gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Norm of the class centers
    #[arg(long, default_value_t = 3.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: $LTKD_RUNS_DIR/data-s<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyMode {
    RankThirds,
    CountThresholds,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    /// How classes are split into head, medium and tail
    #[arg(long, value_enum, default_value_t = PolicyMode::RankThirds)]
    pub group_policy: PolicyMode,
    /// Minimum training count of a head class (count-thresholds)
    #[arg(long)]
    pub t_head: Option<usize>,
    /// Maximum training count of a tail class (count-thresholds)
    #[arg(long)]
    pub t_tail: Option<usize>,
}

impl GroupArgs {
    pub fn policy(&self) -> Result<GroupPolicy, String> {
        match (self.group_policy, self.t_head, self.t_tail) {
            (PolicyMode::RankThirds, None, None) => Ok(GroupPolicy::RankThirds),
            (PolicyMode::RankThirds, _, _) => Err("--t-head/--t-tail need --group-policy count-thresholds".into()),
            (PolicyMode::CountThresholds, Some(t_head), Some(t_tail)) => {
                Ok(GroupPolicy::CountThresholds { t_head, t_tail })
            }
            (PolicyMode::CountThresholds, _, _) => Err("count-thresholds needs --t-head and --t-tail".into()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Fractions of training at which the learning rate drops
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.75])]
    pub lr_milestones: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            milestones: self.lr_milestones.clone(),
            factor: self.lr_factor,
        }
    }
}

#[derive(Debug, Args)]
pub struct TeacherArgs {
    /// Data directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Hidden layer widths
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128])]
    pub hidden: Vec<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub groups: GroupArgs,
    /// Output directory (default: $LTKD_RUNS_DIR/teacher-s<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Kd,
    Ltkd,
    Decomposed,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Kd => Method::Kd,
            MethodArg::Ltkd => Method::Ltkd,
            MethodArg::Decomposed => Method::Decomposed,
        }
    }
}

/// Student and objective settings shared by `distill` and `ablate`.
#[derive(Debug, Args)]
pub struct StudentArgs {
    /// Teacher checkpoint, or a run directory holding teacher.ckpt
    #[arg(long)]
    pub teacher: PathBuf,
    /// Data directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Temperature (default: 4 for kd, 1 otherwise)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Do not multiply distillation terms by τ²
    #[arg(long)]
    pub no_tau_squared: bool,
    #[arg(long, default_value_t = 1.0)]
    pub ce_weight: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [32])]
    pub student_hidden: Vec<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub groups: GroupArgs,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Ltkd)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 6.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 6.0)]
    pub beta: f64,
    #[command(flatten)]
    pub student: StudentArgs,
    /// Output directory (default: $LTKD_RUNS_DIR/<method>-s<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint, or a run directory holding student.ckpt or teacher.ckpt
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub groups: GroupArgs,
    /// Also write eval.json and config.json here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    #[arg(long, default_value_t = 200)]
    pub gradient_instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately break the checked code paths (harness self-test)
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    /// Also write check.json and config.json here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    pub seeds: Vec<u64>,
    /// Sweep α at a fixed β, then β at the best α
    #[arg(long)]
    pub two_sweep: bool,
    /// β held fixed during the α sweep of --two-sweep
    #[arg(long, default_value_t = 1.0)]
    pub fixed_beta: f64,
    /// Pin the α of the β sweep instead of picking the best
    #[arg(long)]
    pub fixed_alpha: Option<f64>,
    /// JSON grid file; replaces --alphas/--betas/--seeds/--two-sweep
    #[arg(long, conflicts_with_all = ["alphas", "betas", "two_sweep"])]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub student: StudentArgs,
    /// Output directory (default: $LTKD_RUNS_DIR/ablate-s<first seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BiasTraceArgs {
    /// Teacher checkpoint, or a run directory holding teacher.ckpt
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub groups: GroupArgs,
    /// Output directory (default: $LTKD_RUNS_DIR/bias-trace-s<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
