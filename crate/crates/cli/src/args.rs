use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use lodesched::scheduler::SchedulerConfig;
use lodesched::testbed::{DatasetConfig, SWEEP_LRS};
use lodesched::trajectory::ScheduleFamily;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Constant,
    Cosine,
    Onecycle,
    Expdecay,
}

impl From<FamilyArg> for ScheduleFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Constant => ScheduleFamily::Constant,
            FamilyArg::Cosine => ScheduleFamily::Cosine,
            FamilyArg::Onecycle => ScheduleFamily::Onecycle,
            FamilyArg::Expdecay => ScheduleFamily::Expdecay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunFamilyArg {
    Lode,
    Constant,
    Cosine,
    Onecycle,
    Expdecay,
}

impl RunFamilyArg {
    pub fn parametric(self) -> Option<ScheduleFamily> {
        match self {
            RunFamilyArg::Lode => None,
            RunFamilyArg::Constant => Some(ScheduleFamily::Constant),
            RunFamilyArg::Cosine => Some(ScheduleFamily::Cosine),
            RunFamilyArg::Onecycle => Some(ScheduleFamily::Onecycle),
            RunFamilyArg::Expdecay => Some(ScheduleFamily::Expdecay),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
}

/// The synthetic dataset the trainee is fitted to.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long, default_value_t = DatasetConfig::default().seed)]
    pub data_seed: u64,
    #[arg(long, default_value_t = DatasetConfig::default().radius)]
    pub radius: f64,
    #[arg(long, default_value_t = DatasetConfig::default().spread)]
    pub spread: f64,
    #[arg(long, default_value_t = DatasetConfig::default().y_scale)]
    pub y_scale: f64,
}

impl DataArgs {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.data_seed,
            radius: self.radius,
            spread: self.spread,
            y_scale: self.y_scale,
            ..DatasetConfig::default()
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedArgs {
    /// Update period and encoding length; defaults to 5% of the epochs, rounded up.
    #[arg(long)]
    pub mu: Option<usize>,
    /// Ensemble size.
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    /// Latent perturbation scale.
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    /// Epochs past the anchor at which predicted metrics are compared;
    /// defaults to the remaining run length.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub lr_lo: Option<f64>,
    #[arg(long)]
    pub lr_hi: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub sched_seed: u64,
}

impl SchedArgs {
    pub fn config(&self, total_epochs: usize) -> SchedulerConfig {
        let base = SchedulerConfig::new(total_epochs);
        SchedulerConfig {
            mu: self.mu.unwrap_or(base.mu),
            n: self.n,
            sigma: self.sigma,
            horizon: self.horizon,
            total_epochs,
            lr_lo: self.lr_lo,
            lr_hi: self.lr_hi,
            seed: self.sched_seed,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Number of trainee seeds per cell, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LRS.to_vec())]
    pub lrs: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "constant,cosine,onecycle,expdecay")]
    pub families: Vec<FamilyArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLodeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub pct_start: f64,
    #[arg(long, default_value_t = 0.05)]
    pub prefix_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub prefix_max: f64,
    #[arg(long, default_value_t = 20)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub mlp_width: usize,
    #[arg(long, default_value_t = 4)]
    pub substeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_path: f64,
    /// Runs withheld from training, listed in `<out>.holdout.json`.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value_t = 7)]
    pub holdout_seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub prefix_fraction: f64,
    /// Restrict to these run ids.
    #[arg(long, value_delimiter = ',')]
    pub runs: Vec<String>,
    /// Restrict to the held-out runs listed by `train-lode --holdout`.
    #[arg(long)]
    pub holdout_file: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub prefix_epochs: usize,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `lode` needs --model and --corpus; the parametric families need --lr.
    #[arg(long, value_enum, default_value = "lode")]
    pub family: RunFamilyArg,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Trainee seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub sched: SchedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of trainee seeds, counted up from --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 100)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub sharpness_every: usize,
    #[arg(long, default_value_t = 100)]
    pub sharpness_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub sharpness_tol: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub sched: SchedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long)]
    pub lr: f64,
    /// Trainee seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Sampling period in epochs; the final epoch is always sampled.
    #[arg(long, default_value_t = 5)]
    pub every: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub probe_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportArgs {
    /// Corpus JSONL files or comparison reports, all of one kind.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Train every (family, lr, seed) cell of the grid and write a JSONL corpus.
    Sweep(SweepArgs),
    /// Fit a LODE model to a corpus.
    TrainLode(TrainLodeArgs),
    /// Predict whole runs from a prefix and report relative MSE per channel.
    Reconstruct(ReconstructArgs),
    /// Rank corpus runs by their predicted final validation metric.
    Rank(RankArgs),
    /// Train one trainee under the LODE scheduler or a parametric baseline.
    Run(RunArgs),
    /// Baselines at their best sweep rate against the LODE arm.
    Compare(CompareArgs),
    /// Track the largest Hessian eigenvalue along one baseline run.
    Sharpness(SharpnessArgs),
    /// Flatten corpora or comparison reports into CSV.
    Export(ExportArgs),
}

impl Command {
    pub fn out(&self) -> &PathBuf {
        match self {
            Command::Sweep(a) => &a.out,
            Command::TrainLode(a) => &a.out,
            Command::Reconstruct(a) => &a.out,
            Command::Rank(a) => &a.out,
            Command::Run(a) => &a.out,
            Command::Compare(a) => &a.out,
            Command::Sharpness(a) => &a.out,
            Command::Export(a) => &a.out,
        }
    }

    pub fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Sweep(a) => &mut a.out,
            Command::TrainLode(a) => &mut a.out,
            Command::Reconstruct(a) => &mut a.out,
            Command::Rank(a) => &mut a.out,
            Command::Run(a) => &mut a.out,
            Command::Compare(a) => &mut a.out,
            Command::Sharpness(a) => &mut a.out,
            Command::Export(a) => &mut a.out,
        }
    }
}
