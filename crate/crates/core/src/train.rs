//! Training loop shared by every objective, trained-model bundles and the
//! checkpoint file.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PREF"  version:u32  meta_len:u32  meta (JSON, meta_len bytes)
//! then for each stored network: n_params:u32, weights f32 x n, EMA f32 x n
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    error_prediction_step, error_scale, mse_step, pushforward_probability, pushforward_step, sobolev_step,
    ErrorCorrected,
};
use crate::dataset::{sample_pairs, ResidualNormalizer, SampleBatch, TargetEncoding};
use crate::error::{Error, FormatError, Result};
use crate::ks::{mix_seed, Trajectory};
use crate::operator::{cosine_lr, AdamW, Operator, OperatorConfig, ParameterSet};
use crate::refiner::{train_step, Formulation, NetworkDenoiser, OneStep, Refiner, RefinerConfig, DEFAULT_SIGMA_MIN_SQ};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PREF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Pairs used to measure the base model's error scale for error prediction.
const ERROR_SCALE_PAIRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mse,
    Refiner,
    Diffusion,
    Sobolev0,
    Sobolev1,
    Sobolev2,
    Pushforward,
    ErrorPred,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Mse,
        Objective::Refiner,
        Objective::Diffusion,
        Objective::Sobolev0,
        Objective::Sobolev1,
        Objective::Sobolev2,
        Objective::Pushforward,
        Objective::ErrorPred,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Mse => "mse",
            Objective::Refiner => "refiner",
            Objective::Diffusion => "diffusion",
            Objective::Sobolev0 => "sobolev0",
            Objective::Sobolev1 => "sobolev1",
            Objective::Sobolev2 => "sobolev2",
            Objective::Pushforward => "pushforward",
            Objective::ErrorPred => "error-pred",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Full training configuration. Defaults follow the reference
/// hyperparameters (batch 128, AdamW, cosine 1e-4 to 1e-6, weight decay
/// 1e-5, EMA 0.995, 100 pairs per trajectory per epoch, stride 4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub k_steps: usize,
    pub sigma_min_sq: f64,
    pub operator: OperatorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub pairs_per_traj: usize,
    pub stride: usize,
    pub history: usize,
    pub output_factor: f64,
    pub max_unroll: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Refiner,
            k_steps: 3,
            sigma_min_sq: DEFAULT_SIGMA_MIN_SQ,
            operator: OperatorConfig::default(),
            epochs: 400,
            batch_size: 128,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-5,
            ema_decay: 0.995,
            pairs_per_traj: 100,
            stride: 4,
            history: 1,
            output_factor: 0.3,
            max_unroll: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_traj == 0 {
            return Err(Error::Config(
                "epochs, batch size and pairs per trajectory must be positive".into(),
            ));
        }
        if self.stride == 0 || self.history == 0 {
            return Err(Error::Config("stride and history must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.objective == Objective::Pushforward && self.max_unroll == 0 {
            return Err(Error::Config("pushforward needs max_unroll >= 1".into()));
        }
        ResidualNormalizer::new(self.output_factor)?;
        self.refiner_config()?;
        self.operator_config().validate()
    }

    /// Operator configuration with the input width implied by `history`.
    pub fn operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            in_channels: 1 + self.history,
            ..self.operator.clone()
        }
    }

    /// Inference schedule of the trained model.
    pub fn refiner_config(&self) -> Result<RefinerConfig> {
        match self.objective {
            Objective::Refiner => RefinerConfig::explicit(self.k_steps, self.sigma_min_sq),
            Objective::Diffusion => RefinerConfig::diffusion(self.k_steps, self.sigma_min_sq),
            _ => Ok(RefinerConfig::one_step()),
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Everything needed to run a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: TrainConfig,
    pub encoding: TargetEncoding,
    /// Error scale of the base network (error prediction only).
    pub error_scale: Option<f64>,
    pub history_losses: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    operator: Operator,
    pub params: ParameterSet<f32>,
    /// Frozen first network of the error-prediction pair.
    pub base: Option<ParameterSet<f32>>,
}

impl TrainedModel {
    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    /// Inference model on the EMA weights.
    pub fn one_step(&self) -> Result<Box<dyn OneStep + '_>> {
        let denoiser = NetworkDenoiser {
            operator: &self.operator,
            params: &self.params.ema,
        };
        match (&self.base, self.meta.error_scale) {
            (Some(base), Some(scale)) => Ok(Box::new(ErrorCorrected {
                base: NetworkDenoiser {
                    operator: &self.operator,
                    params: &base.ema,
                },
                corrector: denoiser,
                error_scale: scale,
                encoding: self.meta.encoding,
            })),
            (None, None) => Ok(Box::new(Refiner {
                denoiser,
                config: self.meta.config.refiner_config()?,
                encoding: self.meta.encoding,
            })),
            _ => Err(Error::Config(
                "error-prediction model is missing its base network".into(),
            )),
        }
    }

    /// The refiner view of the model, for step-by-step diagnostics.
    pub fn refiner(&self) -> Result<Refiner<NetworkDenoiser<'_, f32>>> {
        Ok(Refiner {
            denoiser: NetworkDenoiser {
                operator: &self.operator,
                params: &self.params.ema,
            },
            config: self.meta.config.refiner_config()?,
            encoding: self.meta.encoding,
        })
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        let meta =
            serde_json::to_vec(&self.meta).map_err(|e| FormatError::Header(format!("cannot encode metadata: {e}")))?;
        writer.write_all(&CHECKPOINT_MAGIC)?;
        writer.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        writer.write_all(&(meta.len() as u32).to_le_bytes())?;
        writer.write_all(&meta)?;
        let mut networks = vec![&self.params];
        networks.extend(self.base.as_ref());
        for set in networks {
            writer.write_all(&(set.len() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(set.len() * 8);
            for v in set.weights.iter().chain(&set.ema) {
                if !v.is_finite() {
                    return Err(FormatError::NonFinite("checkpoint weights".into()).into());
                }
                buf.extend_from_slice(&v.to_le_bytes());
            }
            writer.write_all(&buf)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        let mut pos = 0;
        let mut take = |len: usize, what: &str| -> Result<&[u8], FormatError> {
            if buf.len() - pos < len {
                return Err(FormatError::LengthMismatch(format!(
                    "{what}: need {len} bytes at offset {pos}, file has {}",
                    buf.len()
                )));
            }
            pos += len;
            Ok(&buf[pos - len..pos])
        };
        let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let meta_len = u32::from_le_bytes(take(4, "metadata length")?.try_into().unwrap()) as usize;
        let meta: ModelMeta = serde_json::from_slice(take(meta_len, "metadata")?)
            .map_err(|e| FormatError::Header(format!("bad metadata: {e}")))?;
        let operator = Operator::new(meta.config.operator_config())?;
        let n_networks = if meta.error_scale.is_some() { 2 } else { 1 };
        let mut sets = Vec::with_capacity(n_networks);
        for i in 0..n_networks {
            let n = u32::from_le_bytes(take(4, "parameter count")?.try_into().unwrap()) as usize;
            if n != operator.n_params() {
                return Err(FormatError::LengthMismatch(format!(
                    "network {i} stores {n} parameters, configuration needs {}",
                    operator.n_params()
                ))
                .into());
            }
            let raw = take(8 * n, "weights")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite(format!("network {i} weights")).into());
            }
            let (w, e) = values.split_at(n);
            sets.push(ParameterSet::from_parts(w.to_vec(), e.to_vec())?);
        }
        if pos != buf.len() {
            return Err(FormatError::LengthMismatch(format!("{} trailing bytes", buf.len() - pos)).into());
        }
        let mut sets = sets.into_iter();
        let params = sets.next().expect("one network");
        Ok(Self {
            meta,
            operator,
            params,
            base: sets.next(),
        })
    }
}

/// Prediction-step encoding for a training set: residual when the mean
/// prediction step `stride * dt_record` is below two seconds.
pub fn encoding_for(trajectories: &[Trajectory], stride: usize, output_factor: f64) -> Result<TargetEncoding> {
    if trajectories.is_empty() {
        return Err(Error::Config("no training trajectories".into()));
    }
    let mean_dt = trajectories.iter().map(|t| t.dt_record).sum::<f64>() / trajectories.len() as f64;
    Ok(TargetEncoding::for_step(
        stride as f64 * mean_dt,
        ResidualNormalizer::new(output_factor)?,
    ))
}

/// Trains a model on `trajectories`. `progress` is called after each epoch.
pub fn train(
    trajectories: &[Trajectory],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    config.validate()?;
    let encoding = encoding_for(trajectories, config.stride, config.output_factor)?;
    let operator = Operator::new(config.operator_config())?;
    if config.objective == Objective::ErrorPred {
        let base_config = TrainConfig {
            objective: Objective::Mse,
            ..config.clone()
        };
        let (base, _) = fit(&operator, trajectories, &base_config, encoding, None, &mut progress)?;
        let base_model = NetworkDenoiser {
            operator: &operator,
            params: &base.ema,
        };
        let pairs = sample_pairs(
            trajectories,
            config.stride,
            config.history,
            ERROR_SCALE_PAIRS,
            config.seed,
            u64::MAX,
        )?;
        let batch = SampleBatch::gather(trajectories, &pairs, config.stride, config.history)?;
        let scale = error_scale(&base_model, &batch, &encoding)?;
        let corrector_config = TrainConfig {
            seed: mix_seed(config.seed, 0xE44, 0),
            ..config.clone()
        };
        let (params, history) = fit(
            &operator,
            trajectories,
            &corrector_config,
            encoding,
            Some((&base, scale)),
            &mut progress,
        )?;
        return Ok(TrainedModel {
            meta: ModelMeta {
                config: config.clone(),
                encoding,
                error_scale: Some(scale),
                history_losses: history,
            },
            operator,
            params,
            base: Some(base),
        });
    }
    let (params, history) = fit(&operator, trajectories, config, encoding, None, &mut progress)?;
    Ok(TrainedModel {
        meta: ModelMeta {
            config: config.clone(),
            encoding,
            error_scale: None,
            history_losses: history,
        },
        operator,
        params,
        base: None,
    })
}

fn fit(
    operator: &Operator,
    trajectories: &[Trajectory],
    config: &TrainConfig,
    encoding: TargetEncoding,
    base: Option<(&ParameterSet<f32>, f64)>,
    progress: &mut impl FnMut(&EpochStats),
) -> Result<(ParameterSet<f32>, Vec<EpochStats>)> {
    let mut params = ParameterSet::new(operator.init_params::<f32>(config.seed));
    let optimizer = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let refiner_config = config.refiner_config()?;
    let steps_per_epoch = (trajectories.len() * config.pairs_per_traj).div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let pairs = sample_pairs(
            trajectories,
            config.stride,
            config.history,
            config.pairs_per_traj,
            config.seed,
            epoch as u64,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 1));
        let mut loss_sum = 0.0;
        let mut lr = config.lr_max;
        for chunk in pairs.chunks(config.batch_size) {
            lr = cosine_lr(params.step(), total_steps, config.lr_max, config.lr_min);
            params.zero_grads();
            let loss = match config.objective {
                Objective::Mse => {
                    let batch = SampleBatch::gather(trajectories, chunk, config.stride, config.history)?;
                    mse_step(operator, &params.weights, &mut params.grads, &batch, &encoding)
                }
                Objective::Refiner | Objective::Diffusion => {
                    let batch = SampleBatch::gather(trajectories, chunk, config.stride, config.history)?;
                    train_step(
                        operator,
                        &params.weights,
                        &mut params.grads,
                        &batch,
                        &encoding,
                        &refiner_config,
                        &mut rng,
                    )
                }
                Objective::Sobolev0 | Objective::Sobolev1 | Objective::Sobolev2 => {
                    let order = match config.objective {
                        Objective::Sobolev0 => 0,
                        Objective::Sobolev1 => 1,
                        _ => 2,
                    };
                    let batch = SampleBatch::gather(trajectories, chunk, config.stride, config.history)?;
                    sobolev_step(operator, &params.weights, &mut params.grads, &batch, &encoding, order)
                }
                Objective::Pushforward => pushforward_step(
                    operator,
                    &mut params,
                    trajectories,
                    chunk,
                    &encoding,
                    config.stride,
                    config.history,
                    pushforward_probability(epoch, config.max_unroll),
                    config.max_unroll,
                    &mut rng,
                ),
                Objective::ErrorPred => {
                    let batch = SampleBatch::gather(trajectories, chunk, config.stride, config.history)?;
                    let (base_params, scale) =
                        base.ok_or_else(|| Error::Config("error prediction needs a trained base network".into()))?;
                    let base_model = NetworkDenoiser {
                        operator,
                        params: &base_params.ema,
                    };
                    error_prediction_step(
                        operator,
                        &params.weights,
                        &mut params.grads,
                        &batch,
                        &encoding,
                        &base_model,
                        scale,
                    )
                }
            }?;
            optimizer.step(&mut params, lr)?;
            params.ema_update(config.ema_decay);
            loss_sum += loss;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            lr,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.6e}, lr {:.3e}",
            config.objective.name(),
            stats.mean_loss,
            lr
        );
        progress(&stats);
        history.push(stats);
    }
    Ok((params, history))
}

/// Whether the model samples noise at inference.
pub fn formulation_of(config: &TrainConfig) -> Option<Formulation> {
    match config.objective {
        Objective::Refiner => Some(Formulation::Explicit),
        Objective::Diffusion => Some(Formulation::DiffusionVPrediction),
        _ => None,
    }
}
