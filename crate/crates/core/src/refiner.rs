//! Iterative denoising refinement: noise schedules, the training objective
//! and multi-step inference, in both the explicit formulation and the
//! equivalent DDPM formulation with v-prediction.
//!
//! Step `k = 0` is a plain one-step prediction from a zero estimate. Each
//! later step adds Gaussian noise of standard deviation `sigma_k` to the
//! current estimate and removes the noise the network predicts:
//!
//! ```text
//! u~ = u^ + sigma_k * eps,   u^ <- u~ - sigma_k * NO(u~, u_prev, k)
//! ```
//!
//! with `sigma_k^2 = sigma_min_sq^(k/K)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{SampleBatch, TargetEncoding};
use crate::error::{Error, Result};
use crate::operator::{ConditioningSet, Operator};
use crate::scalar::Scalar;
use crate::spectral::band_filter;
use crate::spectral::FieldLine;

/// Minimum noise variance used for the Kuramoto-Sivashinsky experiments.
pub const DEFAULT_SIGMA_MIN_SQ: f64 = 2e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Number of refinement steps after the initial prediction.
    pub k_steps: usize,
    /// Noise variance at the last step.
    pub sigma_min_sq: f64,
}

impl NoiseSchedule {
    pub fn new(k_steps: usize, sigma_min_sq: f64) -> Result<Self> {
        if !(sigma_min_sq > 0.0 && sigma_min_sq < 1.0) {
            return Err(Error::Parameter(format!(
                "sigma_min_sq must lie in (0, 1), got {sigma_min_sq}"
            )));
        }
        Ok(Self { k_steps, sigma_min_sq })
    }

    /// `sigma_min_sq^(k/K)` for `1 <= k <= K`.
    pub fn sigma_sq_at(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.k_steps {
            return Err(Error::Parameter(format!(
                "refinement step {k} outside 1..={}",
                self.k_steps
            )));
        }
        if k == self.k_steps {
            return Ok(self.sigma_min_sq);
        }
        Ok(self.sigma_min_sq.powf(k as f64 / self.k_steps as f64))
    }

    /// Noise standard deviation at step `k`.
    pub fn sigma_at(&self, k: usize) -> Result<f64> {
        self.sigma_sq_at(k).map(f64::sqrt)
    }
}

/// Free function form of [`NoiseSchedule::sigma_at`].
pub fn sigma_at(schedule: &NoiseSchedule, k: usize) -> Result<f64> {
    schedule.sigma_at(k)
}

/// DDPM variance schedule whose betas are the refinement variances in
/// reverse order. Indexed by scheduler time `t = K - k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    k_steps: usize,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    sigma_sq: Vec<f64>,
}

/// `betas[t] = sigma_min_sq^((K - t)/K)` for `t = 0..=K`, so `betas[0]`
/// is the minimum variance and `betas[K] = 1`.
pub fn build_diffusion_schedule(sigma_min_sq: f64, k_steps: usize) -> Result<DiffusionSchedule> {
    if !(sigma_min_sq > 0.0 && sigma_min_sq < 1.0) || k_steps == 0 {
        return Err(Error::Parameter(format!(
            "diffusion schedule needs 0 < sigma_min_sq < 1 and K >= 1, got {sigma_min_sq}, {k_steps}"
        )));
    }
    let betas: Vec<f64> = (0..=k_steps)
        .rev()
        .map(|k| sigma_min_sq.powf(k as f64 / k_steps as f64))
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(betas.len());
    let mut sigma_sq = Vec::with_capacity(betas.len());
    let mut prod = 1.0;
    let mut var: f64 = 0.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alphas_cumprod.push(prod);
        // 1 - prod accumulated without cancellation, exact at both ends
        var = if b == 1.0 { 1.0 } else { var + b * (1.0 - var) };
        sigma_sq.push(var);
    }
    let schedule = DiffusionSchedule {
        k_steps,
        betas,
        alphas_cumprod,
        sigma_sq,
    };
    debug_assert_eq!(schedule.sigma_sq(0), sigma_min_sq);
    debug_assert_eq!(schedule.sigma_sq(k_steps), 1.0);
    Ok(schedule)
}

impl DiffusionSchedule {
    pub fn k_steps(&self) -> usize {
        self.k_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// Noise variance `1 - alpha_bar_t` at scheduler time `t`.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[t]
    }

    /// Noise variance seen at refinement step `k`.
    pub fn sigma_sq_for_step(&self, k: usize) -> f64 {
        self.sigma_sq(self.k_steps - k)
    }

    /// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`
    pub fn add_noise(&self, x0: &[f64], noise: &[f64], t: usize) -> Vec<f64> {
        let a = self.alphas_cumprod[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.iter().zip(noise).map(|(x, e)| sa * x + sn * e).collect()
    }

    /// `sqrt(alpha_bar) eps - sqrt(1 - alpha_bar) x0`
    pub fn v_target(&self, x0: &[f64], noise: &[f64], t: usize) -> Vec<f64> {
        let a = self.alphas_cumprod[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.iter().zip(noise).map(|(x, e)| sa * e - sn * x).collect()
    }

    /// One ancestral DDPM step from time `t` given a v-prediction, with the
    /// posterior variance; no noise is added at `t = 0`.
    pub fn step(&self, v: &[f64], t: usize, sample: &[f64], noise: &mut dyn NoiseSource) -> Vec<f64> {
        let a_t = self.alphas_cumprod[t];
        let a_prev = if t == 0 { 1.0 } else { self.alphas_cumprod[t - 1] };
        let beta_prod = 1.0 - a_t;
        let beta_prod_prev = 1.0 - a_prev;
        let alpha_cur = a_t / a_prev;
        let beta_cur = 1.0 - alpha_cur;
        let coeff_x0 = a_prev.sqrt() * beta_cur / beta_prod;
        let coeff_xt = alpha_cur.sqrt() * beta_prod_prev / beta_prod;
        let mut out: Vec<f64> = v
            .iter()
            .zip(sample)
            .map(|(&v, &x)| {
                let x0 = a_t.sqrt() * x - beta_prod.sqrt() * v;
                coeff_x0 * x0 + coeff_xt * x
            })
            .collect();
        if t > 0 {
            let std = (beta_prod_prev / beta_prod * beta_cur).max(1e-20).sqrt();
            let mut eps = vec![0.0; out.len()];
            noise.fill(&mut eps);
            for (o, e) in out.iter_mut().zip(&eps) {
                *o += std * e;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Explicit,
    DiffusionVPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub schedule: NoiseSchedule,
    pub formulation: Formulation,
}

impl RefinerConfig {
    pub fn explicit(k_steps: usize, sigma_min_sq: f64) -> Result<Self> {
        Ok(Self {
            schedule: NoiseSchedule::new(k_steps, sigma_min_sq)?,
            formulation: Formulation::Explicit,
        })
    }

    pub fn diffusion(k_steps: usize, sigma_min_sq: f64) -> Result<Self> {
        build_diffusion_schedule(sigma_min_sq, k_steps)?;
        Ok(Self {
            schedule: NoiseSchedule::new(k_steps, sigma_min_sq)?,
            formulation: Formulation::DiffusionVPrediction,
        })
    }

    /// Plain one-step prediction (no refinement).
    pub fn one_step() -> Self {
        Self {
            schedule: NoiseSchedule {
                k_steps: 0,
                sigma_min_sq: DEFAULT_SIGMA_MIN_SQ,
            },
            formulation: Formulation::Explicit,
        }
    }

    pub fn k_steps(&self) -> usize {
        self.schedule.k_steps
    }

    pub fn is_stochastic(&self) -> bool {
        self.schedule.k_steps > 0
    }

    fn diffusion_schedule(&self) -> Result<DiffusionSchedule> {
        build_diffusion_schedule(self.schedule.sigma_min_sq, self.schedule.k_steps)
    }
}

/// Source of standard normal draws for inference.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

/// Gaussian noise from a seeded ChaCha stream.
#[derive(Debug, Clone)]
pub struct GaussianNoise(ChaCha8Rng);

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoiseSource for GaussianNoise {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.0.sample(StandardNormal);
        }
    }
}

/// Network evaluation in the space the model is trained in.
pub trait Denoiser: Sync {
    /// `estimate` is `N` values; `history` is `h x N`, most recent first.
    fn denoise(&self, estimate: &[f64], history: &[f64], cond: &ConditioningSet) -> Result<Vec<f64>>;
}

/// An [`Operator`] with a fixed weight vector.
#[derive(Debug, Clone, Copy)]
pub struct NetworkDenoiser<'a, T> {
    pub operator: &'a Operator,
    pub params: &'a [T],
}

impl<T: Scalar> Denoiser for NetworkDenoiser<'_, T> {
    fn denoise(&self, estimate: &[f64], history: &[f64], cond: &ConditioningSet) -> Result<Vec<f64>> {
        let n = estimate.len();
        let input: Vec<T> = estimate.iter().chain(history).map(|&v| T::of(v)).collect();
        let out = self.operator.forward(self.params, &input, n, cond)?;
        Ok(out.into_iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// A model that advances the physical state by one prediction step.
pub trait OneStep: Sync {
    /// Predicted next state from `history` (`h x N`, most recent first).
    /// Non-finite intermediates are reported as [`Error::Inference`] with
    /// `rollout_step` 0.
    fn predict(
        &self,
        history: &[f64],
        n: usize,
        cond: &ConditioningSet,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<f64>>;

    /// Whether repeated predictions from the same input can differ.
    fn is_stochastic(&self) -> bool;
}

/// A denoiser run through the refinement process.
#[derive(Debug, Clone, Copy)]
pub struct Refiner<D> {
    pub denoiser: D,
    pub config: RefinerConfig,
    pub encoding: TargetEncoding,
}

fn check_finite(values: &[f64], refinement_step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Inference {
            rollout_step: 0,
            refinement_step,
        })
    }
}

impl<D: Denoiser> Refiner<D> {
    /// Estimates `u^1 .. u^{K+1}` in network space (for the diffusion
    /// formulation, the sample after each scheduler step).
    pub fn refine(
        &self,
        history: &[f64],
        n: usize,
        cond: &ConditioningSet,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<Vec<f64>>> {
        let k_steps = self.config.k_steps();
        let mut estimates = Vec::with_capacity(k_steps + 1);
        match self.config.formulation {
            Formulation::Explicit => {
                let mut estimate = self.denoiser.denoise(&vec![0.0; n], history, &cond.at_step(0))?;
                check_finite(&estimate, 0)?;
                estimates.push(estimate.clone());
                let mut eps = vec![0.0; n];
                for k in 1..=k_steps {
                    let sigma = self.config.schedule.sigma_at(k)?;
                    noise.fill(&mut eps);
                    let noised: Vec<f64> = estimate.iter().zip(&eps).map(|(u, e)| u + sigma * e).collect();
                    let pred = self.denoiser.denoise(&noised, history, &cond.at_step(k))?;
                    estimate = noised.iter().zip(&pred).map(|(u, p)| u - sigma * p).collect();
                    check_finite(&estimate, k)?;
                    estimates.push(estimate.clone());
                }
            }
            Formulation::DiffusionVPrediction => {
                let schedule = self.config.diffusion_schedule()?;
                let mut sample = vec![0.0; n];
                noise.fill(&mut sample);
                for t in (0..=k_steps).rev() {
                    let k = k_steps - t;
                    let v = self.denoiser.denoise(&sample, history, &cond.at_step(k))?;
                    sample = schedule.step(&v, t, &sample, noise);
                    check_finite(&sample, k)?;
                    estimates.push(sample.clone());
                }
            }
        }
        Ok(estimates)
    }
}

impl<D: Denoiser> OneStep for Refiner<D> {
    fn predict(
        &self,
        history: &[f64],
        n: usize,
        cond: &ConditioningSet,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<f64>> {
        if n == 0 || history.is_empty() || !history.len().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "history of {} values is not a whole number of {n}-point frames",
                history.len()
            )));
        }
        let estimates = self.refine(history, n, cond, noise)?;
        let last = estimates.last().expect("at least one estimate");
        let out = self.encoding.decode(last, &history[..n]);
        check_finite(&out, self.config.k_steps())?;
        Ok(out)
    }

    fn is_stochastic(&self) -> bool {
        self.config.is_stochastic()
    }
}

/// Next physical state from the refiner; `history` is `h x n` values.
pub fn predict_next_solution<D: Denoiser>(
    refiner: &Refiner<D>,
    history: &[f64],
    n: usize,
    cond: &ConditioningSet,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    refiner.predict(history, n, cond, noise)
}

/// Post-processing applied to every predicted frame during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    #[default]
    None,
    /// Zero the mean and every wavenumber above 60.
    Band60,
}

/// Wavenumber cutoff of [`Correction::Band60`].
pub const BAND_CORRECTION_MAX_WAVENUMBER: usize = 60;

impl Correction {
    pub fn apply(&self, state: Vec<f64>, length: f64) -> Result<Vec<f64>> {
        match self {
            Correction::None => Ok(state),
            Correction::Band60 => {
                let field = FieldLine::new(state, length)?;
                let max = BAND_CORRECTION_MAX_WAVENUMBER.min(field.len() / 2);
                if max < BAND_CORRECTION_MAX_WAVENUMBER {
                    log::warn!(
                        "grid of {} points cannot hold wavenumber {}; clipping correction at {max}",
                        field.len(),
                        BAND_CORRECTION_MAX_WAVENUMBER
                    );
                }
                Ok(band_filter(&field, true, max)?.into_values())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub n_steps: usize,
    /// Independent predictions averaged per step.
    pub samples_per_step: usize,
    pub correction: Correction,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            n_steps: 1,
            samples_per_step: 1,
            correction: Correction::None,
        }
    }
}

/// Predicted frames of one autoregressive rollout.
#[derive(Debug)]
pub struct RolloutResult {
    /// `frames[i]` predicts the state `i + 1` steps after the last initial frame.
    pub frames: Vec<Vec<f64>>,
    /// Set when the rollout stopped early on non-finite values.
    pub failure: Option<Error>,
}

impl RolloutResult {
    pub fn is_complete(&self, n_steps: usize) -> bool {
        self.failure.is_none() && self.frames.len() == n_steps
    }
}

/// Autoregressive rollout. `initial` holds `h` frames, oldest first.
pub fn rollout<M: OneStep + ?Sized>(
    model: &M,
    initial: &[Vec<f64>],
    length: f64,
    cond: &ConditioningSet,
    options: &RolloutOptions,
    noise: &mut dyn NoiseSource,
) -> Result<RolloutResult> {
    if options.n_steps == 0 || options.samples_per_step == 0 {
        return Err(Error::Parameter(
            "rollout needs at least one step and one sample".into(),
        ));
    }
    let n = initial.first().map_or(0, Vec::len);
    if n == 0 || initial.iter().any(|f| f.len() != n) {
        return Err(Error::Shape(
            "initial frames must be non-empty and equally sized".into(),
        ));
    }
    // most recent first
    let mut history: Vec<f64> = initial.iter().rev().flatten().copied().collect();
    let mut frames = Vec::with_capacity(options.n_steps);
    for step in 0..options.n_steps {
        let next = match predict_averaged(model, &history, n, cond, options.samples_per_step, noise)
            .and_then(|s| options.correction.apply(s, length))
        {
            Ok(state) if state.iter().all(|v| v.is_finite()) => state,
            // models that do not check their own output
            Ok(_) => {
                return Ok(RolloutResult {
                    frames,
                    failure: Some(Error::Inference {
                        rollout_step: step,
                        refinement_step: 0,
                    }),
                })
            }
            Err(Error::Inference { refinement_step, .. }) => {
                return Ok(RolloutResult {
                    frames,
                    failure: Some(Error::Inference {
                        rollout_step: step,
                        refinement_step,
                    }),
                })
            }
            Err(other) => return Err(other),
        };
        history.rotate_right(n);
        history[..n].copy_from_slice(&next);
        frames.push(next);
    }
    Ok(RolloutResult { frames, failure: None })
}

fn predict_averaged<M: OneStep + ?Sized>(
    model: &M,
    history: &[f64],
    n: usize,
    cond: &ConditioningSet,
    samples: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    let mut mean = model.predict(history, n, cond, noise)?;
    if samples > 1 {
        for _ in 1..samples {
            for (m, v) in mean.iter_mut().zip(model.predict(history, n, cond, noise)?) {
                *m += v;
            }
        }
        let inv = 1.0 / samples as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
    }
    Ok(mean)
}

/// Per-sample network input `[estimate, history...]` in precision `T`.
pub(crate) fn network_input<T: Scalar>(estimate: &[f64], history: &[f32]) -> Vec<T> {
    estimate
        .iter()
        .map(|&v| T::of(v))
        .chain(history.iter().map(|&v| T::of(v as f64)))
        .collect()
}

/// Squared-error loss of one sample; accumulates `scale * d loss / d params`
/// into `grads` and returns the mean squared error.
pub(crate) fn accumulate_mse<T: Scalar>(
    operator: &Operator,
    params: &[T],
    grads: &mut [T],
    input: &[T],
    target: &[f64],
    cond: &ConditioningSet,
    scale: f64,
) -> Result<f64> {
    let n = target.len();
    let (pred, cache) = operator.forward_with_cache(params, input, n, cond)?;
    let mut loss = 0.0;
    let coeff = T::of(2.0 * scale / n as f64);
    let out_grad: Vec<T> = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let diff = p - T::of(t);
            let d = diff.to_f64_lossy();
            loss += d * d;
            coeff * diff
        })
        .collect();
    operator.backward(params, &cache, &out_grad, grads)?;
    Ok(loss / n as f64)
}

/// Encoded target of sample `b` (network space).
pub(crate) fn encoded_target(batch: &SampleBatch, b: usize, encoding: &TargetEncoding) -> Vec<f64> {
    let target: Vec<f64> = batch.target(b).iter().map(|&v| v as f64).collect();
    let last: Vec<f64> = batch.last_input(b).iter().map(|&v| v as f64).collect();
    encoding.encode(&target, &last)
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One denoising training pass over `batch`: accumulates the gradient of
/// the batch-mean loss into `grads` and returns that loss.
///
/// Each sample draws `k` uniformly from `0..=K`. In the explicit
/// formulation `k = 0` regresses the target from a zero estimate and
/// `k >= 1` predicts the noise added to the target. The diffusion
/// formulation regresses the v-target at scheduler time `K - k`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    operator: &Operator,
    params: &[T],
    grads: &mut [T],
    batch: &SampleBatch,
    encoding: &TargetEncoding,
    config: &RefinerConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let k_steps = config.k_steps();
    let diffusion = match config.formulation {
        Formulation::DiffusionVPrediction => Some(config.diffusion_schedule()?),
        Formulation::Explicit => None,
    };
    let n = batch.n_points;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for b in 0..batch.len() {
        let y = encoded_target(batch, b, encoding);
        let k = if k_steps == 0 { 0 } else { rng.random_range(0..=k_steps) };
        let (estimate, target) = match &diffusion {
            None if k == 0 => (vec![0.0; n], y),
            None => {
                let sigma = config.schedule.sigma_at(k)?;
                let eps = standard_normal_vec(rng, n);
                let noised = y.iter().zip(&eps).map(|(u, e)| u + sigma * e).collect();
                (noised, eps)
            }
            Some(schedule) => {
                let t = k_steps - k;
                let eps = standard_normal_vec(rng, n);
                (schedule.add_noise(&y, &eps, t), schedule.v_target(&y, &eps, t))
            }
        };
        let input = network_input::<T>(&estimate, batch.input(b));
        let cond = batch.conditioning[b].at_step(k);
        total += accumulate_mse(operator, params, grads, &input, &target, &cond, scale)?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Training(format!("loss ({loss})")));
    }
    Ok(loss)
}
