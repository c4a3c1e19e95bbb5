//! Baseline objectives: one-step MSE, Sobolev-norm loss, the pushforward
//! trick, invariant correction and error prediction.

use rand::Rng;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairIndex, SampleBatch, TargetEncoding};
use crate::error::{Error, Result};
use crate::ks::Trajectory;
use crate::operator::{ConditioningSet, Operator, ParameterSet};
use crate::refiner::{
    accumulate_mse, encoded_target, network_input, Denoiser, NetworkDenoiser, NoiseSource, OneStep,
    BAND_CORRECTION_MAX_WAVENUMBER,
};
use crate::scalar::Scalar;
use crate::spectral::{band_filter, wavenumber, FieldLine, RealTransform};

/// Epochs over which the pushforward replacement probability ramps up.
pub const PUSHFORWARD_RAMP_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossConfig {
    Mse,
    Sobolev { order: u32 },
    Pushforward { max_unroll: usize },
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossConfig::Sobolev { order } if order > 2 => Err(Error::Parameter(format!(
                "Sobolev order must be 0, 1 or 2, got {order}"
            ))),
            LossConfig::Pushforward { max_unroll: 0 } => {
                Err(Error::Parameter("pushforward needs max_unroll >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().min(target.len());
    if n == 0 {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64
}

/// Weight `(1 + kappa_m^2)^order` of wavenumber `m`.
fn sobolev_weight(m: usize, length: f64, order: u32) -> f64 {
    (1.0 + wavenumber(m, length).powi(2)).powi(order as i32)
}

/// Sobolev-weighted squared error and its gradient with respect to `pred`.
///
/// With `E = DFT(pred - target)` the loss is `(1/N^2) sum_m w_m |E_m|^2`
/// over all two-sided wavenumbers, so order 0 equals the mean squared
/// error.
pub fn sobolev_loss_and_grad(pred: &[f64], target: &[f64], order: u32, length: f64) -> (f64, Vec<f64>) {
    let n = pred.len();
    let error: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let mut transform = RealTransform::new(n);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
    transform.forward(&error, &mut spectrum);
    let half = n / 2;
    let mut loss = 0.0;
    for (m, c) in spectrum.iter_mut().enumerate() {
        let w = sobolev_weight(m, length, order);
        let multiplicity = if m == 0 || m == half { 1.0 } else { 2.0 };
        loss += multiplicity * w * c.norm_sqr();
        *c *= w;
    }
    let mut grad = vec![0.0; n];
    transform.inverse(&spectrum, &mut grad);
    let scale = 2.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss / (n * n) as f64, grad)
}

pub fn sobolev_loss(pred: &[f64], target: &[f64], order: u32, length: f64) -> f64 {
    sobolev_loss_and_grad(pred, target, order, length).0
}

/// One-step MSE training pass: zero estimate, refinement step 0.
pub fn mse_step<T: Scalar>(
    operator: &Operator,
    params: &[T],
    grads: &mut [T],
    batch: &SampleBatch,
    encoding: &TargetEncoding,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let n = batch.n_points;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let zeros = vec![0.0; n];
    for b in 0..batch.len() {
        let target = encoded_target(batch, b, encoding);
        let input = network_input::<T>(&zeros, batch.input(b));
        let cond = batch.conditioning[b].at_step(0);
        total += accumulate_mse(operator, params, grads, &input, &target, &cond, scale)?;
    }
    finite_loss(total * scale)
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training(format!("loss ({loss})")))
    }
}

/// One-step training pass under the Sobolev loss of the given order.
pub fn sobolev_step<T: Scalar>(
    operator: &Operator,
    params: &[T],
    grads: &mut [T],
    batch: &SampleBatch,
    encoding: &TargetEncoding,
    order: u32,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let n = batch.n_points;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let zeros = vec![0.0; n];
    for b in 0..batch.len() {
        let target = encoded_target(batch, b, encoding);
        let input = network_input::<T>(&zeros, batch.input(b));
        let cond = batch.conditioning[b].at_step(0);
        let length = cond.dx * n as f64;
        let (pred, cache) = operator.forward_with_cache(params, &input, n, &cond)?;
        let pred: Vec<f64> = pred.iter().map(|v| v.to_f64_lossy()).collect();
        let (loss, grad) = sobolev_loss_and_grad(&pred, &target, order, length);
        let out_grad: Vec<T> = grad.iter().map(|g| T::of(g * scale)).collect();
        operator.backward(params, &cache, &out_grad, grads)?;
        total += loss;
    }
    finite_loss(total * scale)
}

/// Probability of replacing the ground-truth input at `epoch`: ramps
/// linearly over the first [`PUSHFORWARD_RAMP_EPOCHS`] epochs to
/// `max_unroll / (max_unroll + 1)`, the rate of drawing the unroll length
/// uniformly from `0..=max_unroll`.
pub fn pushforward_probability(epoch: usize, max_unroll: usize) -> f64 {
    let full = max_unroll as f64 / (max_unroll + 1) as f64;
    full * (epoch as f64 / PUSHFORWARD_RAMP_EPOCHS as f64).min(1.0)
}

/// Replaces the inputs of `batch` with predictions of `model` (typically
/// the EMA weights) unrolled from earlier ground-truth frames. Each sample
/// is replaced with probability `probability`, using `1..=max_unroll`
/// model steps where the trajectory has enough earlier frames.
#[allow(clippy::too_many_arguments)]
pub fn pushforward_inputs<M: OneStep + ?Sized, R: Rng + ?Sized>(
    model: &M,
    trajectories: &[Trajectory],
    pairs: &[PairIndex],
    batch: &mut SampleBatch,
    probability: f64,
    max_unroll: usize,
    rng: &mut R,
    noise: &mut dyn NoiseSource,
) -> Result<usize> {
    let (stride, history, n) = (batch.stride, batch.history, batch.n_points);
    let mut replaced = 0;
    for (b, pair) in pairs.iter().enumerate() {
        if probability <= 0.0 || rng.random::<f64>() >= probability {
            continue;
        }
        let available = (pair.t / stride).saturating_sub(history);
        let unroll = rng.random_range(1..=max_unroll).min(available);
        if unroll == 0 {
            continue;
        }
        let traj = &trajectories[pair.traj];
        // most recent first, starting `unroll` strides before the real input
        let mut window: Vec<f64> = (1..=history)
            .flat_map(|h| traj.frame(pair.t - (h + unroll) * stride).iter().map(|&v| v as f64))
            .collect();
        let cond = batch.conditioning[b];
        for _ in 0..unroll {
            let next = model
                .predict(&window, n, &cond, noise)
                .map_err(|e| Error::Training(format!("pushforward prediction failed: {e}")))?;
            window.rotate_right(n);
            window[..n].copy_from_slice(&next);
        }
        let w = history * n;
        for (dst, src) in batch.inputs[b * w..(b + 1) * w].iter_mut().zip(&window) {
            *dst = *src as f32;
        }
        replaced += 1;
    }
    Ok(replaced)
}

/// Pushforward training pass: replaces inputs with detached predictions
/// from the EMA weights, then takes the one-step MSE loss. Gradients never
/// flow through the replaced inputs.
#[allow(clippy::too_many_arguments)]
pub fn pushforward_step<T: Scalar, R: Rng + ?Sized>(
    operator: &Operator,
    params: &mut ParameterSet<T>,
    trajectories: &[Trajectory],
    pairs: &[PairIndex],
    encoding: &TargetEncoding,
    stride: usize,
    history: usize,
    probability: f64,
    max_unroll: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut batch = SampleBatch::gather(trajectories, pairs, stride, history)?;
    let model = crate::refiner::Refiner {
        denoiser: NetworkDenoiser {
            operator,
            params: &params.ema,
        },
        config: crate::refiner::RefinerConfig::one_step(),
        encoding: *encoding,
    };
    let mut no_noise = crate::refiner::GaussianNoise::new(0);
    pushforward_inputs(
        &model,
        trajectories,
        pairs,
        &mut batch,
        probability,
        max_unroll,
        rng,
        &mut no_noise,
    )?;
    let ParameterSet { weights, grads, .. } = params;
    mse_step(operator, weights, grads, &batch, encoding)
}

/// Zeroes the mean and every wavenumber above 60 (clipped to `N/2`).
pub fn correct_invariants(field: &FieldLine) -> Result<FieldLine> {
    let half = field.len() / 2;
    let max = if half < BAND_CORRECTION_MAX_WAVENUMBER {
        log::warn!(
            "grid of {} points cannot hold wavenumber {BAND_CORRECTION_MAX_WAVENUMBER}; clipping at {half}",
            field.len()
        );
        half
    } else {
        BAND_CORRECTION_MAX_WAVENUMBER
    };
    band_filter(field, true, max)
}

/// A one-step model whose output is corrected by a second network trained
/// on its errors: `y = a + scale * B(a, history)` in network space.
#[derive(Debug, Clone, Copy)]
pub struct ErrorCorrected<D1, D2> {
    pub base: D1,
    pub corrector: D2,
    pub error_scale: f64,
    pub encoding: TargetEncoding,
}

impl<D1: Denoiser, D2: Denoiser> OneStep for ErrorCorrected<D1, D2> {
    fn predict(
        &self,
        history: &[f64],
        n: usize,
        cond: &ConditioningSet,
        _noise: &mut dyn NoiseSource,
    ) -> Result<Vec<f64>> {
        let cond = cond.at_step(0);
        let base = self.base.denoise(&vec![0.0; n], history, &cond)?;
        let correction = self.corrector.denoise(&base, history, &cond)?;
        let y: Vec<f64> = base
            .iter()
            .zip(&correction)
            .map(|(a, c)| a + self.error_scale * c)
            .collect();
        let out = self.encoding.decode(&y, &history[..n]);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inference {
                rollout_step: 0,
                refinement_step: 0,
            });
        }
        Ok(out)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

/// Average per-sample standard deviation of the base model's errors in
/// network space; errors are divided by this before training the corrector.
pub fn error_scale<D: Denoiser>(base: &D, batch: &SampleBatch, encoding: &TargetEncoding) -> Result<f64> {
    let n = batch.n_points;
    let mut total = 0.0;
    for b in 0..batch.len() {
        let history: Vec<f64> = batch.input(b).iter().map(|&v| v as f64).collect();
        let pred = base.denoise(&vec![0.0; n], &history, &batch.conditioning[b].at_step(0))?;
        let target = encoded_target(batch, b, encoding);
        let err: Vec<f64> = target.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let mean = err.iter().sum::<f64>() / n as f64;
        total += (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    let scale = total / batch.len().max(1) as f64;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Training(format!("error scale ({scale})")));
    }
    Ok(scale)
}

/// Trains the corrector on `(target - base) / error_scale`, with the base
/// prediction as its estimate channel.
pub fn error_prediction_step<T: Scalar, D: Denoiser>(
    operator: &Operator,
    params: &[T],
    grads: &mut [T],
    batch: &SampleBatch,
    encoding: &TargetEncoding,
    base: &D,
    error_scale: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let n = batch.n_points;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for b in 0..batch.len() {
        let history: Vec<f64> = batch.input(b).iter().map(|&v| v as f64).collect();
        let cond = batch.conditioning[b].at_step(0);
        let base_pred = base.denoise(&vec![0.0; n], &history, &cond)?;
        let target: Vec<f64> = encoded_target(batch, b, encoding)
            .iter()
            .zip(&base_pred)
            .map(|(t, p)| (t - p) / error_scale)
            .collect();
        let input = network_input::<T>(&base_pred, batch.input(b));
        total += accumulate_mse(operator, params, grads, &input, &target, &cond, scale)?;
    }
    finite_loss(total * scale)
}
