//! Parameter storage, AdamW, cosine learning-rate schedule and EMA shadow.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat weights with matching gradient, EMA shadow and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    pub weights: Vec<T>,
    pub grads: Vec<T>,
    pub ema: Vec<T>,
    step: u64,
    ema_updates: u64,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Scalar> ParameterSet<T> {
    /// The EMA shadow starts as a copy of `weights`.
    pub fn new(weights: Vec<T>) -> Self {
        let n = weights.len();
        Self {
            ema: weights.clone(),
            weights,
            grads: vec![T::zero(); n],
            step: 0,
            ema_updates: 0,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        }
    }

    /// Restores a checkpointed set; optimizer moments restart from zero.
    pub fn from_parts(weights: Vec<T>, ema: Vec<T>) -> Result<Self> {
        if weights.len() != ema.len() {
            return Err(Error::Shape(format!(
                "{} weights but {} EMA values",
                weights.len(),
                ema.len()
            )));
        }
        let mut set = Self::new(weights);
        set.ema = ema;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// `shadow <- decay * shadow + (1 - decay) * weights`; the first call
    /// copies the weights.
    pub fn ema_update(&mut self, decay: f64) {
        if self.ema_updates == 0 {
            self.ema.copy_from_slice(&self.weights);
        } else {
            let d = T::of(decay);
            let one_minus = T::of(1.0 - decay);
            for (s, &w) in self.ema.iter_mut().zip(&self.weights) {
                *s = d * *s + one_minus * w;
            }
        }
        self.ema_updates += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update from `params.grads`.
    /// Nothing is modified when a gradient is not finite.
    pub fn step<T: Scalar>(&self, params: &mut ParameterSet<T>, lr: f64) -> Result<()> {
        if let Some(i) = params.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter {i} (step {})",
                params.step
            )));
        }
        params.step += 1;
        let t = params.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let correction1 = T::of(1.0 - self.beta1.powi(t));
        let correction2 = T::of(1.0 - self.beta2.powi(t));
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let eps = T::of(self.eps);
        for (((w, &g), m), v) in params
            .weights
            .iter_mut()
            .zip(&params.grads)
            .zip(&mut params.first_moment)
            .zip(&mut params.second_moment)
        {
            *w *= decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
