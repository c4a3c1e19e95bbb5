//! Command-line arguments and the fully resolved configs written next to
//! every output.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use pde_refiner::ks::ParamSampler;
use pde_refiner::operator::OperatorConfig;
use pde_refiner::refiner::Correction;
use pde_refiner::train::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable overriding the seed of any command.
pub const SEED_ENV: &str = "PDER_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reduced scale that runs on a laptop CPU.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorrectionArg {
    None,
    Band60,
}

impl From<CorrectionArg> for Correction {
    fn from(c: CorrectionArg) -> Self {
        match c {
            CorrectionArg::None => Correction::None,
            CorrectionArg::Band60 => Correction::Band60,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Train split: 140 frames per trajectory; test split: 640.
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Recorded frames per trajectory.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Discarded frames before recording starts.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub nu_min: Option<f64>,
    #[arg(long)]
    pub nu_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_traj: usize,
    pub n_points: usize,
    pub frames: usize,
    pub warmup: usize,
    pub substeps: usize,
    pub nu_min: f64,
    pub nu_max: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl GenerateArgs {
    pub fn resolve(self) -> GenerateConfig {
        let base = ParamSampler::default();
        let (n_traj, frames, seed) = match (self.preset, self.split) {
            (Some(Preset::Desk), Split::Train) => (256, 140, 0),
            (Some(Preset::Desk), Split::Test) => (32, 640, 1),
            (None, Split::Train) => (2048, 140, 0),
            (None, Split::Test) => (128, 640, 1),
        };
        GenerateConfig {
            n_traj: self.n_traj.unwrap_or(n_traj),
            n_points: self.n_points.unwrap_or(base.n_points),
            frames: self.frames.unwrap_or(frames),
            warmup: self.warmup.unwrap_or(base.warmup_steps),
            substeps: base.substeps,
            nu_min: self.nu_min.unwrap_or(base.nu_range.0),
            nu_max: self.nu_max.unwrap_or(base.nu_range.1),
            length_min: base.length_range.0,
            length_max: base.length_range.1,
            dt_min: base.dt_range.0,
            dt_max: base.dt_range.1,
            seed: self.seed.unwrap_or(seed),
            out: self.out,
        }
    }
}

impl GenerateConfig {
    pub fn sampler(&self) -> ParamSampler {
        ParamSampler {
            length_range: (self.length_min, self.length_max),
            dt_range: (self.dt_min, self.dt_max),
            nu_range: (self.nu_min, self.nu_max),
            n_points: self.n_points,
            substeps: self.substeps,
            warmup_steps: self.warmup,
            n_record: self.frames,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training trajectories (PDER file).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// mse, refiner, diffusion, sobolev0, sobolev1, sobolev2, pushforward or error-pred.
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub k_steps: Option<usize>,
    #[arg(long)]
    pub sigma_min_sq: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub pairs_per_traj: Option<usize>,
    /// Recorded frames per prediction step.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Past frames fed to the network.
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub hidden_channels: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub max_unroll: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl TrainArgs {
    pub fn resolve(self) -> TrainRun {
        let mut c = TrainConfig::default();
        if self.preset == Some(Preset::Desk) {
            c.epochs = 40;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            objective,
            k_steps,
            sigma_min_sq,
            epochs,
            batch_size,
            lr_max,
            lr_min,
            weight_decay
        );
        set!(ema_decay, pairs_per_traj, stride, history, max_unroll, seed);
        c.operator = OperatorConfig {
            hidden_channels: self.hidden_channels.unwrap_or(c.operator.hidden_channels),
            n_blocks: self.n_blocks.unwrap_or(c.operator.n_blocks),
            kernel_size: self.kernel_size.unwrap_or(c.operator.kernel_size),
            ..c.operator
        };
        c.operator = c.operator_config();
        TrainRun {
            data: self.data,
            out: self.out,
            train: c,
        }
    }
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Trajectories whose first frames start the rollouts.
    #[arg(long)]
    pub data: PathBuf,
    /// Predicted trajectories (PDER file).
    #[arg(long)]
    pub out: PathBuf,
    /// Prediction steps; defaults to the length of each reference trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Independent predictions averaged per step.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "none")]
    pub correction: CorrectionArg,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub samples: usize,
    pub correction: Correction,
    pub seed: u64,
}

impl RolloutArgs {
    pub fn resolve(self) -> RolloutConfig {
        RolloutConfig {
            checkpoint: self.checkpoint,
            data: self.data,
            out: self.out,
            steps: self.steps,
            samples: self.samples,
            correction: self.correction.into(),
            seed: self.seed.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct EvaluateConfig {
    /// Predicted trajectories, as written by `rollout`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference trajectories.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output directory for report.csv, curves.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Leading predicted frames that are copies of the reference.
    #[arg(long, default_value_t = 1)]
    pub skip: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct SpectrumConfig {
    /// Amplitude spectrum of a dataset (`wavenumber,amplitude`).
    #[arg(long, conflicts_with_all = ["pred", "truth"])]
    pub data: Option<PathBuf>,
    /// Predicted trajectories; with `--truth`, writes error spectra.
    #[arg(long, requires = "truth")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub skip: usize,
    /// Only the first predicted frames of each trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for uncertainty.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub samples: usize,
    pub threshold: f64,
    pub steps: Option<usize>,
    pub seed: u64,
}

impl UncertaintyArgs {
    pub fn resolve(self) -> UncertaintyConfig {
        UncertaintyConfig {
            checkpoint: self.checkpoint,
            data: self.data,
            out: self.out,
            samples: self.samples,
            threshold: self.threshold,
            steps: self.steps,
            seed: self.seed.unwrap_or(0),
        }
    }
}

/// A resolved run, as stored in the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Generate(GenerateConfig),
    Train(TrainRun),
    Rollout(RolloutConfig),
    Evaluate(EvaluateConfig),
    Spectrum(SpectrumConfig),
    Uncertainty(UncertaintyConfig),
}

impl RunConfig {
    /// Applies the seed override from the environment.
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            match &mut self {
                RunConfig::Generate(c) => c.seed = s,
                RunConfig::Train(c) => c.train.seed = s,
                RunConfig::Rollout(c) => c.seed = s,
                RunConfig::Uncertainty(c) => c.seed = s,
                RunConfig::Evaluate(_) | RunConfig::Spectrum(_) => {}
            }
        }
        self
    }

    /// Where the sidecar goes: inside output directories, next to files.
    pub fn sidecar_path(&self) -> PathBuf {
        match self {
            RunConfig::Evaluate(c) => c.out.join("config.json"),
            RunConfig::Uncertainty(c) => c.out.join("config.json"),
            RunConfig::Generate(GenerateConfig { out, .. })
            | RunConfig::Train(TrainRun { out, .. })
            | RunConfig::Rollout(RolloutConfig { out, .. })
            | RunConfig::Spectrum(SpectrumConfig { out, .. }) => {
                let mut name = out.as_os_str().to_owned();
                name.push(".config.json");
                PathBuf::from(name)
            }
        }
    }
}
