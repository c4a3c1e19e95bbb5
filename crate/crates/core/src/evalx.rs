//! Rollout metrics: correlation and MSE curves, high-correlation times,
//! error spectra and sample-based uncertainty estimates.

use rayon::prelude::*;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ks::{mix_seed, Trajectory};
use crate::operator::ConditioningSet;
use crate::refiner::{GaussianNoise, OneStep};
use crate::spectral::RealTransform;

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cannot correlate {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 || !(saa.is_finite() && sbb.is_finite()) {
        return Err(Error::UndefinedCorrelation(format!(
            "variances {} and {}",
            saa / n,
            sbb / n
        )));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// How long a rollout stays above a correlation threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTime {
    pub seconds: f64,
    /// Number of leading frames at or above the threshold.
    pub frames: usize,
    /// The threshold was never crossed within the horizon.
    pub censored: bool,
}

/// Time of the first frame whose correlation is below `threshold`, as the
/// number of preceding frames times `dt_step`; the full horizon (censored)
/// when no frame falls below.
pub fn first_crossing(curve: &[f64], threshold: f64, dt_step: f64) -> CorrelationTime {
    match curve.iter().position(|&c| c.is_nan() || c < threshold) {
        Some(i) => CorrelationTime {
            seconds: i as f64 * dt_step,
            frames: i,
            censored: false,
        },
        None => CorrelationTime {
            seconds: curve.len() as f64 * dt_step,
            frames: curve.len(),
            censored: true,
        },
    }
}

/// Per-frame correlation between two frame sequences. Frames missing from
/// `pred` (a truncated rollout) count as uncorrelated.
pub fn correlation_curve(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() > truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames for {} reference frames",
            pred.len(),
            truth.len()
        )));
    }
    let mut curve = Vec::with_capacity(truth.len());
    for (p, t) in pred.iter().zip(truth) {
        curve.push(pearson_correlation(p, t)?);
    }
    curve.resize(truth.len(), 0.0);
    Ok(curve)
}

/// Per-frame mean squared error; missing predicted frames are infinite.
pub fn rollout_mse_curve(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() > truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames for {} reference frames",
            pred.len(),
            truth.len()
        )));
    }
    let mut curve = Vec::with_capacity(truth.len());
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Shape("frame sizes differ".into()));
        }
        curve.push(crate::baselines::mse_loss(p, t));
    }
    curve.resize(truth.len(), f64::INFINITY);
    Ok(curve)
}

/// Element-wise mean of equally long curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = curves
        .first()
        .ok_or_else(|| Error::Shape("no curves to average".into()))?
        .len();
    if curves.iter().any(|c| c.len() != len) {
        return Err(Error::Shape("curves differ in length".into()));
    }
    let inv = 1.0 / curves.len() as f64;
    Ok((0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() * inv)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Threshold on the correlation averaged across trajectories.
    Batch,
    /// Threshold on each trajectory's own correlation.
    Single,
}

fn frames_of(traj: &Trajectory) -> Vec<Vec<f64>> {
    (0..traj.n_frames())
        .map(|t| traj.frame(t).iter().map(|&v| v as f64).collect())
        .collect()
}

fn check_aligned(pred: &Trajectory, truth: &Trajectory) -> Result<()> {
    if pred.n_points != truth.n_points
        || pred.n_frames() != truth.n_frames()
        || (pred.dt_record - truth.dt_record).abs() > 1e-12 * truth.dt_record.abs()
    {
        return Err(Error::Shape(format!(
            "prediction ({} x {}, dt {}) and reference ({} x {}, dt {}) are not aligned",
            pred.n_frames(),
            pred.n_points,
            pred.dt_record,
            truth.n_frames(),
            truth.n_points,
            truth.dt_record
        )));
    }
    Ok(())
}

/// High-correlation time of aligned predicted and reference trajectories,
/// with frames `dt_record` apart. Batch mode returns a single entry.
pub fn high_correlation_time(
    preds: &[Trajectory],
    truths: &[Trajectory],
    threshold: f64,
    mode: CorrelationMode,
) -> Result<Vec<CorrelationTime>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            preds.len(),
            truths.len()
        )));
    }
    let mut curves = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        check_aligned(p, t)?;
        curves.push(correlation_curve(&frames_of(p), &frames_of(t))?);
    }
    let dt = truths[0].dt_record;
    match mode {
        CorrelationMode::Single => Ok(curves.iter().map(|c| first_crossing(c, threshold, dt)).collect()),
        CorrelationMode::Batch => {
            if truths.iter().any(|t| (t.dt_record - dt).abs() > 1e-12 * dt) {
                return Err(Error::Shape("batch mode needs a common time step".into()));
            }
            Ok(vec![first_crossing(&mean_curve(&curves)?, threshold, dt)])
        }
    }
}

/// Mean over frames of `|FFT(truth - pred)|` per wavenumber `0..=N/2`.
pub fn frequency_error_report(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = truth.first().ok_or_else(|| Error::Shape("no frames".into()))?.len();
    if pred.len() != truth.len() || pred.iter().chain(truth).any(|f| f.len() != n) {
        return Err(Error::Shape("prediction and reference frames are not aligned".into()));
    }
    let mut transform = RealTransform::new(n);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
    let mut sum = vec![0.0; n / 2 + 1];
    let mut diff = vec![0.0; n];
    for (p, t) in pred.iter().zip(truth) {
        for ((d, a), b) in diff.iter_mut().zip(t).zip(p) {
            *d = a - b;
        }
        transform.forward(&diff, &mut spectrum);
        for (s, c) in sum.iter_mut().zip(&spectrum) {
            *s += c.norm();
        }
    }
    let inv = 1.0 / truth.len() as f64;
    Ok(sum.into_iter().map(|s| s * inv).collect())
}

/// Mean `|FFT(u)|` per wavenumber over frames.
pub fn mean_amplitude_spectrum(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let zeros: Vec<Vec<f64>> = frames.iter().map(|f| vec![0.0; f.len()]).collect();
    frequency_error_report(&zeros, frames)
}

/// Summary of an evaluated set of rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    /// Mean correlation across trajectories per predicted frame.
    pub correlation: Vec<f64>,
    /// Mean MSE across trajectories per predicted frame.
    pub mse: Vec<f64>,
    pub high_corr_time_08: CorrelationTime,
    pub high_corr_time_09: CorrelationTime,
    /// Seconds between predicted frames.
    pub dt_step: f64,
    /// Per-trajectory times at thresholds 0.8 and 0.9.
    pub per_trajectory: Vec<(CorrelationTime, CorrelationTime)>,
    /// Trajectories left out because a correlation was undefined.
    pub excluded: Vec<usize>,
}

/// Builds a report from per-trajectory predicted and reference frames.
pub fn rollout_report(preds: &[Vec<Vec<f64>>], truths: &[Vec<Vec<f64>>], dt_step: f64) -> Result<RolloutReport> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            preds.len(),
            truths.len()
        )));
    }
    let mut corr_curves = Vec::new();
    let mut mse_curves = Vec::new();
    let mut per_trajectory = Vec::new();
    let mut excluded = Vec::new();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        match correlation_curve(p, t) {
            Ok(curve) => {
                per_trajectory.push((
                    first_crossing(&curve, 0.8, dt_step),
                    first_crossing(&curve, 0.9, dt_step),
                ));
                corr_curves.push(curve);
                mse_curves.push(rollout_mse_curve(p, t)?);
            }
            Err(Error::UndefinedCorrelation(msg)) => {
                log::warn!("trajectory {i} excluded: {msg}");
                excluded.push(i);
            }
            Err(other) => return Err(other),
        }
    }
    let correlation = mean_curve(&corr_curves)?;
    let mse = mean_curve(&mse_curves)?;
    Ok(RolloutReport {
        high_corr_time_08: first_crossing(&correlation, 0.8, dt_step),
        high_corr_time_09: first_crossing(&correlation, 0.9, dt_step),
        correlation,
        mse,
        dt_step,
        per_trajectory,
        excluded,
    })
}

/// Mean pairwise correlation between samples at each frame. A sample
/// missing a frame (truncated rollout) counts as uncorrelated.
pub fn sample_agreement_curve(samples: &[Vec<Vec<f64>>], n_frames: usize) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    (0..n_frames)
        .map(|f| {
            let frames: Vec<Option<&[f64]>> = samples.iter().map(|s| s.get(f).map(Vec::as_slice)).collect();
            frame_agreement(&frames)
        })
        .collect()
}

fn frame_agreement(frames: &[Option<&[f64]>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, a) in frames.iter().enumerate() {
        for b in &frames[i + 1..] {
            if let (Some(a), Some(b)) = (a, b) {
                sum += pearson_correlation(a, b)?;
            }
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Settings for sample-based divergence-time estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyOptions {
    pub n_samples: usize,
    pub threshold: f64,
    pub n_steps: usize,
}

impl Default for UncertaintyOptions {
    fn default() -> Self {
        Self {
            n_samples: 32,
            threshold: 0.8,
            n_steps: 1,
        }
    }
}

/// Noise seed of sample `sample` of trajectory `trajectory`.
pub fn sample_seed(seed: u64, trajectory: u64, sample: u64) -> u64 {
    mix_seed(seed, trajectory, sample)
}

/// Time at which independent stochastic rollouts from the same initial
/// state stop agreeing: the first frame where their mean pairwise
/// correlation falls below the threshold.
#[allow(clippy::too_many_arguments)]
pub fn estimate_uncertainty<M: OneStep + ?Sized>(
    model: &M,
    initial: &[Vec<f64>],
    cond: &ConditioningSet,
    options: &UncertaintyOptions,
    dt_step: f64,
    seed: u64,
    trajectory: u64,
) -> Result<CorrelationTime> {
    let seeds: Vec<u64> = (0..options.n_samples as u64)
        .map(|s| sample_seed(seed, trajectory, s))
        .collect();
    estimate_uncertainty_with_seeds(model, initial, cond, options, dt_step, &seeds)
}

/// As [`estimate_uncertainty`] with explicit per-sample noise seeds.
///
/// Samples advance in lockstep and stop at the first frame below the
/// threshold; later frames cannot change the result.
pub fn estimate_uncertainty_with_seeds<M: OneStep + ?Sized>(
    model: &M,
    initial: &[Vec<f64>],
    cond: &ConditioningSet,
    options: &UncertaintyOptions,
    dt_step: f64,
    seeds: &[u64],
) -> Result<CorrelationTime> {
    if !model.is_stochastic() {
        return Err(Error::Config(
            "uncertainty estimation needs a stochastic model (at least one refinement step)".into(),
        ));
    }
    if seeds.len() < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    let n = initial.first().map_or(0, Vec::len);
    if n == 0 || initial.iter().any(|f| f.len() != n) {
        return Err(Error::Shape(
            "initial frames must be non-empty and equally sized".into(),
        ));
    }
    struct Sample {
        history: Vec<f64>,
        noise: GaussianNoise,
        alive: bool,
    }
    let history: Vec<f64> = initial.iter().rev().flatten().copied().collect();
    let mut samples: Vec<Sample> = seeds
        .iter()
        .map(|&s| Sample {
            history: history.clone(),
            noise: GaussianNoise::new(s),
            alive: true,
        })
        .collect();
    let mut curve = Vec::with_capacity(options.n_steps);
    for _ in 0..options.n_steps {
        samples.par_iter_mut().try_for_each(|s| -> Result<()> {
            if !s.alive {
                return Ok(());
            }
            match model.predict(&s.history, n, cond, &mut s.noise) {
                Ok(next) if next.iter().all(|v| v.is_finite()) => {
                    s.history.rotate_right(n);
                    s.history[..n].copy_from_slice(&next);
                }
                Ok(_) | Err(Error::Inference { .. }) => s.alive = false,
                Err(other) => return Err(other),
            }
            Ok(())
        })?;
        let frames: Vec<Option<&[f64]>> = samples.iter().map(|s| s.alive.then(|| &s.history[..n])).collect();
        let agreement = frame_agreement(&frames)?;
        curve.push(agreement);
        if agreement.is_nan() || agreement < options.threshold {
            break;
        }
    }
    Ok(first_crossing(&curve, options.threshold, dt_step))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyFit {
    /// Coefficient of determination of the least-squares line of actual on
    /// estimated times.
    pub r_squared: f64,
    pub pearson: f64,
}

pub fn uncertainty_fit(estimated: &[f64], actual: &[f64]) -> Result<UncertaintyFit> {
    if estimated.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} estimated and {} actual times",
            estimated.len(),
            actual.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::Parameter("need at least two trajectories".into()));
    }
    let pearson = pearson_correlation(estimated, actual)?;
    // simple linear regression: R^2 equals the squared correlation
    Ok(UncertaintyFit {
        r_squared: pearson * pearson,
        pearson,
    })
}
