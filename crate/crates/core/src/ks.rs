//! Pseudo-spectral solver for the 1D Kuramoto-Sivashinsky equation
//!
//! ```text
//! u_t + u u_x + u_xx + nu u_xxxx = 0,   x in [0, L) periodic
//! ```
//!
//! The stiff linear part is integrated exactly in Fourier space with
//! fourth-order exponential time differencing (ETDRK4); the phi-function
//! weights are evaluated by contour integrals to avoid cancellation near
//! zero eigenvalues. The nonlinear term is formed as `-(u^2)_x / 2` in
//! physical space with the 2/3 rule applied to the product.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, FieldLine, RealTransform};

/// Points on the contour used for the ETDRK4 coefficients.
const CONTOUR_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsParams {
    /// Domain length `L`.
    pub length: f64,
    /// Coefficient of the fourth-derivative term.
    pub nu: f64,
    /// Inner integrator step.
    pub dt_solver: f64,
    pub n_points: usize,
    /// Recorded-frame intervals integrated and discarded before recording
    /// (each interval is `record_every` solver steps).
    pub warmup_steps: usize,
    /// Solver steps between recorded frames.
    pub record_every: usize,
    /// Number of recorded frames, including the first one after warmup.
    pub n_record: usize,
}

impl KsParams {
    pub fn dt_record(&self) -> f64 {
        self.dt_solver * self.record_every as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.length) || !positive(self.nu) || !positive(self.dt_solver) {
            return Err(Error::Parameter(format!(
                "length, nu and dt_solver must be positive: {self:?}"
            )));
        }
        if !self.n_points.is_power_of_two() || self.n_points < 4 {
            return Err(Error::Parameter(format!(
                "n_points must be a power of two >= 4, got {}",
                self.n_points
            )));
        }
        if self.record_every == 0 || self.n_record == 0 {
            return Err(Error::Parameter("record_every and n_record must be positive".into()));
        }
        Ok(())
    }
}

/// Distribution of the random truncated Fourier series initial condition
/// `u0(x) = sum_m A_m sin(2 pi l_m x / L + phi_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditionSpec {
    pub n_terms: usize,
    pub amplitude_range: (f64, f64),
    pub wavenumbers: Vec<usize>,
    pub phase_range: (f64, f64),
    pub seed: u64,
}

impl Default for InitialConditionSpec {
    fn default() -> Self {
        Self {
            n_terms: 10,
            amplitude_range: (-0.5, 0.5),
            wavenumbers: (1..=8).collect(),
            phase_range: (0.0, 2.0 * PI),
            seed: 0,
        }
    }
}

impl InitialConditionSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self, n_points: usize) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.amplitude_range) || !ordered(self.phase_range) {
            return Err(Error::Parameter("empty amplitude or phase range".into()));
        }
        if self.n_terms > 0 && self.wavenumbers.is_empty() {
            return Err(Error::Parameter("wavenumber set is empty".into()));
        }
        if let Some(l) = self.wavenumbers.iter().find(|&&l| l == 0 || l >= n_points / 2) {
            return Err(Error::Parameter(format!("wavenumber {l} outside 1..{}", n_points / 2)));
        }
        Ok(())
    }
}

/// Uniform draw on `[lo, hi]` that tolerates a degenerate interval.
pub(crate) fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_initial_condition(spec: &InitialConditionSpec, n_points: usize, length: f64) -> Result<FieldLine> {
    spec.validate(n_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let terms: Vec<(f64, f64, f64)> = (0..spec.n_terms)
        .map(|_| {
            let amplitude = uniform(&mut rng, spec.amplitude_range);
            let l = spec.wavenumbers[rng.random_range(0..spec.wavenumbers.len())] as f64;
            let phase = uniform(&mut rng, spec.phase_range);
            (amplitude, l, phase)
        })
        .collect();
    FieldLine::from_fn(n_points, length, |x| {
        terms
            .iter()
            .map(|(a, l, phi)| a * (2.0 * PI * l * x / length + phi).sin())
            .sum()
    })
}

/// `-u u_x - u_xx - nu u_xxxx` evaluated pseudo-spectrally.
pub fn ks_rhs(u: &FieldLine, nu: f64) -> FieldLine {
    let n = u.len();
    let length = u.length();
    let mut transform = RealTransform::new(n);
    let mut u_hat = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
    transform.forward(u.values(), &mut u_hat);
    let mut nonlinear = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
    let mut phys = vec![0.0; n];
    nonlinear_term(&mut transform, &u_hat, length, &mut phys, &mut nonlinear);
    for (m, (out, u_m)) in nonlinear.iter_mut().zip(&u_hat).enumerate() {
        let k = spectral::wavenumber(m, length);
        *out += u_m * (k * k - nu * k.powi(4));
    }
    let mut values = vec![0.0; n];
    transform.inverse(&nonlinear, &mut values);
    FieldLine::new(values, length).expect("finite input gives finite rhs")
}

/// Highest mode kept in the dealiased quadratic product.
fn dealias_cutoff(n: usize) -> usize {
    n / 3
}

/// Fourier coefficients of `-(u^2)_x / 2` with 2/3-rule dealiasing.
fn nonlinear_term(
    transform: &mut RealTransform,
    u_hat: &[Complex64],
    length: f64,
    phys: &mut [f64],
    out: &mut [Complex64],
) {
    let n = transform.n();
    transform.inverse(u_hat, phys);
    phys.iter_mut().for_each(|v| *v = *v * *v);
    transform.forward(phys, out);
    let cutoff = dealias_cutoff(n);
    for (m, c) in out.iter_mut().enumerate() {
        if m > cutoff {
            *c = Complex64::new(0.0, 0.0);
        } else {
            *c *= Complex64::new(0.0, -0.5 * spectral::wavenumber(m, length));
        }
    }
}

/// ETDRK4 stepper for a fixed grid, viscosity and step size.
pub struct Etdrk4 {
    n: usize,
    length: f64,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    transform: RealTransform,
    phys: Vec<f64>,
    nv: Vec<Complex64>,
    na: Vec<Complex64>,
    nb: Vec<Complex64>,
    nc: Vec<Complex64>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
}

impl Etdrk4 {
    pub fn new(n: usize, length: f64, nu: f64, h: f64) -> Result<Self> {
        let modes = n / 2 + 1;
        let mut stepper = Self {
            n,
            length,
            e: Vec::with_capacity(modes),
            e2: Vec::with_capacity(modes),
            q: Vec::with_capacity(modes),
            f1: Vec::with_capacity(modes),
            f2: Vec::with_capacity(modes),
            f3: Vec::with_capacity(modes),
            transform: RealTransform::new(n),
            phys: vec![0.0; n],
            nv: vec![Complex64::new(0.0, 0.0); modes],
            na: vec![Complex64::new(0.0, 0.0); modes],
            nb: vec![Complex64::new(0.0, 0.0); modes],
            nc: vec![Complex64::new(0.0, 0.0); modes],
            a: vec![Complex64::new(0.0, 0.0); modes],
            b: vec![Complex64::new(0.0, 0.0); modes],
            c: vec![Complex64::new(0.0, 0.0); modes],
        };
        let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
            .collect();
        let mean = |f: &dyn Fn(Complex64) -> Complex64, hl: f64| -> f64 {
            roots.iter().map(|r| f(hl + r).re).sum::<f64>() / CONTOUR_POINTS as f64
        };
        for m in 0..modes {
            let k = spectral::wavenumber(m, length);
            let hl = h * (k * k - nu * k.powi(4));
            stepper.e.push(hl.exp());
            stepper.e2.push((hl / 2.0).exp());
            stepper.q.push(h * mean(&|z| ((z / 2.0).exp() - 1.0) / z, hl));
            stepper
                .f1
                .push(h * mean(&|z| (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / z.powu(3), hl));
            stepper
                .f2
                .push(h * mean(&|z| (2.0 + z + z.exp() * (z - 2.0)) / z.powu(3), hl));
            stepper
                .f3
                .push(h * mean(&|z| (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / z.powu(3), hl));
        }
        let weights = [
            &stepper.e,
            &stepper.e2,
            &stepper.q,
            &stepper.f1,
            &stepper.f2,
            &stepper.f3,
        ];
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!(
                "ETDRK4 weights are not finite for dt={h}, nu={nu}, L={length}, N={n}"
            )));
        }
        Ok(stepper)
    }

    pub fn from_params(params: &KsParams) -> Result<Self> {
        params.validate()?;
        Self::new(params.n_points, params.length, params.nu, params.dt_solver)
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn to_spectral(&mut self, u: &[f64]) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); self.n / 2 + 1];
        self.transform.forward(u, &mut v);
        v
    }

    pub fn to_physical(&mut self, v: &[Complex64], out: &mut [f64]) {
        self.transform.inverse(v, out);
    }

    /// Advances the spectral state `v` by one step.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, v: &mut [Complex64]) {
        let length = self.length;
        nonlinear_term(&mut self.transform, v, length, &mut self.phys, &mut self.nv);
        for m in 0..v.len() {
            self.a[m] = v[m] * self.e2[m] + self.nv[m] * self.q[m];
        }
        nonlinear_term(&mut self.transform, &self.a, length, &mut self.phys, &mut self.na);
        for m in 0..v.len() {
            self.b[m] = v[m] * self.e2[m] + self.na[m] * self.q[m];
        }
        nonlinear_term(&mut self.transform, &self.b, length, &mut self.phys, &mut self.nb);
        for m in 0..v.len() {
            self.c[m] = self.a[m] * self.e2[m] + (self.nb[m] * 2.0 - self.nv[m]) * self.q[m];
        }
        nonlinear_term(&mut self.transform, &self.c, length, &mut self.phys, &mut self.nc);
        for m in 0..v.len() {
            v[m] = v[m] * self.e[m]
                + self.nv[m] * self.f1[m]
                + (self.na[m] + self.nb[m]) * (2.0 * self.f2[m])
                + self.nc[m] * self.f3[m];
        }
    }
}

fn spectral_state_finite(v: &[Complex64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Advances `u` by one solver step of `params.dt_solver`.
pub fn integrate_step(u: &FieldLine, params: &KsParams) -> Result<FieldLine> {
    let params = KsParams {
        n_points: u.len(),
        length: u.length(),
        ..*params
    };
    let mut stepper = Etdrk4::from_params(&params)?;
    let mut v = stepper.to_spectral(u.values());
    stepper.step(&mut v);
    if !spectral_state_finite(&v) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut out = vec![0.0; u.len()];
    stepper.to_physical(&v, &mut out);
    FieldLine::new(out, u.length()).map_err(|_| Error::Divergence { step: 0 })
}

/// Integrates `steps` solver steps from `u`, returning the final state.
pub fn integrate(u: &FieldLine, params: &KsParams, steps: usize) -> Result<FieldLine> {
    let mut stepper = Etdrk4::new(u.len(), u.length(), params.nu, params.dt_solver)?;
    let mut v = stepper.to_spectral(u.values());
    for step in 0..steps {
        stepper.step(&mut v);
        if !spectral_state_finite(&v) {
            return Err(Error::Divergence { step });
        }
    }
    let mut out = vec![0.0; u.len()];
    stepper.to_physical(&v, &mut out);
    FieldLine::new(out, u.length()).map_err(|_| Error::Divergence { step: steps })
}

/// A recorded solution: `n_frames x n_points` values, time-major, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub length: f64,
    pub nu: f64,
    /// Seconds between consecutive stored frames.
    pub dt_record: f64,
    pub n_points: usize,
    states: Vec<f32>,
}

impl Trajectory {
    pub fn new(length: f64, nu: f64, dt_record: f64, n_points: usize, states: Vec<f32>) -> Result<Self> {
        if n_points == 0 || states.is_empty() || !states.len().is_multiple_of(n_points) {
            return Err(Error::Shape(format!(
                "{} values do not form frames of {n_points} points",
                states.len()
            )));
        }
        Ok(Self {
            length,
            nu,
            dt_record,
            n_points,
            states,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.states.len() / self.n_points
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.states[t * self.n_points..(t + 1) * self.n_points]
    }

    pub fn frame_field(&self, t: usize) -> FieldLine {
        FieldLine::new(self.frame(t).iter().map(|&v| v as f64).collect(), self.length)
            .expect("trajectory frames are finite")
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    /// Keeps every `stride`-th frame starting at frame 0.
    pub fn subsample(&self, stride: usize) -> Trajectory {
        let states = (0..self.n_frames())
            .step_by(stride.max(1))
            .flat_map(|t| self.frame(t).iter().copied())
            .collect();
        Trajectory {
            states,
            dt_record: self.dt_record * stride.max(1) as f64,
            ..self.clone()
        }
    }

    /// Keeps the first `n` frames.
    pub fn truncate(&self, n: usize) -> Trajectory {
        let n = n.clamp(1, self.n_frames());
        Trajectory {
            states: self.states[..n * self.n_points].to_vec(),
            ..self.clone()
        }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_points as f64
    }
}

pub fn generate_trajectory(spec: &InitialConditionSpec, params: &KsParams, seed: u64) -> Result<Trajectory> {
    params.validate()?;
    let initial = sample_initial_condition(&spec.with_seed(seed), params.n_points, params.length)?;
    integrate_trajectory(&initial, params)
}

/// Records a trajectory from a given initial state.
pub fn integrate_trajectory(initial: &FieldLine, params: &KsParams) -> Result<Trajectory> {
    params.validate()?;
    let mut stepper = Etdrk4::from_params(params)?;
    let mut v = stepper.to_spectral(initial.values());
    let mut step = 0;
    let mut advance = |stepper: &mut Etdrk4, v: &mut [Complex64], count: usize| -> Result<()> {
        for _ in 0..count {
            stepper.step(v);
            if !spectral_state_finite(v) {
                return Err(Error::Divergence { step });
            }
            step += 1;
        }
        Ok(())
    };
    advance(&mut stepper, &mut v, params.warmup_steps * params.record_every)?;
    let n = params.n_points;
    let mut states = Vec::with_capacity(n * params.n_record);
    let mut phys = vec![0.0; n];
    for frame in 0..params.n_record {
        if frame > 0 {
            advance(&mut stepper, &mut v, params.record_every)?;
        }
        stepper.to_physical(&v, &mut phys);
        states.extend(phys.iter().map(|&x| x as f32));
    }
    if states.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { step });
    }
    Trajectory::new(params.length, params.nu, params.dt_record(), n, states)
}

/// Per-trajectory parameter distribution for dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSampler {
    pub length_range: (f64, f64),
    /// Range of the recorded time step.
    pub dt_range: (f64, f64),
    pub nu_range: (f64, f64),
    pub n_points: usize,
    /// Solver steps per recorded frame; `dt_solver = dt / substeps`.
    pub substeps: usize,
    pub warmup_steps: usize,
    pub n_record: usize,
}

impl Default for ParamSampler {
    fn default() -> Self {
        Self {
            length_range: (0.9 * 64.0, 1.1 * 64.0),
            dt_range: (0.18, 0.22),
            nu_range: (1.0, 1.0),
            n_points: 256,
            substeps: 10,
            warmup_steps: 360,
            n_record: 140,
        }
    }
}

impl ParamSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> KsParams {
        let length = uniform(rng, self.length_range);
        let dt = uniform(rng, self.dt_range);
        let nu = uniform(rng, self.nu_range);
        KsParams {
            length,
            nu,
            dt_solver: dt / self.substeps as f64,
            n_points: self.n_points,
            warmup_steps: self.warmup_steps,
            record_every: self.substeps,
            n_record: self.n_record,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub trajectories: Vec<Trajectory>,
    /// Number of attempts that diverged and were redrawn.
    pub regenerated: usize,
}

/// Attempts allowed per trajectory before giving up.
const MAX_ATTEMPTS: u64 = 8;

fn generate_one(
    index: usize,
    spec: &InitialConditionSpec,
    sampler: &ParamSampler,
    seed: u64,
) -> Result<(Trajectory, usize)> {
    for attempt in 0..MAX_ATTEMPTS {
        let child = mix_seed(seed, index as u64, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(child);
        let params = sampler.sample(&mut rng);
        match generate_trajectory(spec, &params, rng.random()) {
            Ok(traj) => return Ok((traj, attempt as usize)),
            Err(Error::Divergence { step }) => {
                log::warn!("trajectory {index} attempt {attempt} diverged at solver step {step}");
            }
            Err(other) => return Err(other),
        }
    }
    Err(Error::Config(format!(
        "trajectory {index} diverged {MAX_ATTEMPTS} times; solver settings are unstable"
    )))
}

/// Generates `n_trajectories` independent trajectories.
///
/// Trajectory `i` depends only on `(seed, i)`, so the result is identical
/// whatever the size of the rayon pool.
pub fn generate_dataset(
    n_trajectories: usize,
    spec: &InitialConditionSpec,
    sampler: &ParamSampler,
    seed: u64,
) -> Result<GeneratedDataset> {
    if n_trajectories == 0 {
        return Err(Error::Parameter("n_trajectories must be positive".into()));
    }
    let results: Vec<Result<(Trajectory, usize)>> = (0..n_trajectories)
        .into_par_iter()
        .map(|i| generate_one(i, spec, sampler, seed))
        .collect();
    let mut trajectories = Vec::with_capacity(n_trajectories);
    let mut regenerated = 0;
    for result in results {
        let (traj, retries) = result?;
        regenerated += retries;
        trajectories.push(traj);
    }
    if regenerated as f64 > 0.1 * n_trajectories as f64 {
        return Err(Error::Config(format!(
            "{regenerated} of {n_trajectories} trajectories had to be regenerated"
        )));
    }
    Ok(GeneratedDataset {
        trajectories,
        regenerated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, length: f64, nu: f64, dt: f64) -> KsParams {
        KsParams {
            length,
            nu,
            dt_solver: dt,
            n_points: n,
            warmup_steps: 0,
            record_every: 1,
            n_record: 1,
        }
    }

    #[test]
    fn single_term_initial_condition() {
        let spec = InitialConditionSpec {
            n_terms: 1,
            amplitude_range: (1.0, 1.0),
            wavenumbers: vec![1],
            phase_range: (0.0, 0.0),
            seed: 3,
        };
        let l = 10.0;
        let u = sample_initial_condition(&spec, 32, l).unwrap();
        let expected = FieldLine::from_fn(32, l, |x| (2.0 * PI * x / l).sin()).unwrap();
        for (a, b) in u.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-14);
        }

        let empty = InitialConditionSpec { n_terms: 0, ..spec };
        let zero = sample_initial_condition(&empty, 32, l).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn default_initial_condition_lives_on_wavenumber_set() {
        let spec = InitialConditionSpec::default().with_seed(42);
        let u = sample_initial_condition(&spec, 256, 64.0).unwrap();
        let amp = spectral::amplitude_spectrum(&u);
        assert!(amp.iter().skip(1).take(8).any(|a| *a > 1e-3));
        for (m, a) in amp.iter().enumerate() {
            if !(1..=8).contains(&m) {
                assert!(*a < 1e-9, "mode {m} has amplitude {a}");
            }
        }
        let again = sample_initial_condition(&spec, 256, 64.0).unwrap();
        assert_eq!(u, again);
    }

    #[test]
    fn invalid_wavenumber_set() {
        let spec = InitialConditionSpec {
            wavenumbers: vec![16],
            ..Default::default()
        };
        assert!(sample_initial_condition(&spec, 32, 10.0).is_err());
    }

    #[test]
    fn rhs_of_zero_and_linear_regime() {
        let l = 2.0 * PI * 4.0;
        let zero = FieldLine::zeros(64, l).unwrap();
        assert!(ks_rhs(&zero, 1.0).values().iter().all(|v| *v == 0.0));

        let eps = 1e-6;
        let k = spectral::wavenumber(3, l);
        let u = FieldLine::from_fn(64, l, |x| eps * (k * x).sin()).unwrap();
        let rhs = ks_rhs(&u, 1.0);
        let rate = k * k - k.powi(4);
        for (r, x) in rhs.values().iter().zip(u.values()) {
            assert!((r - rate * x).abs() < 1e-10);
        }
    }

    #[test]
    fn rhs_has_zero_mean() {
        let spec = InitialConditionSpec::default().with_seed(5);
        let u = sample_initial_condition(&spec, 128, 60.0).unwrap();
        let shifted = FieldLine::new(u.values().iter().map(|v| v + 0.3).collect(), 60.0).unwrap();
        assert!(ks_rhs(&shifted, 0.8).mean().abs() < 1e-10);
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let p = params(64, 30.0, 1.0, 0.02);
        let zero = FieldLine::zeros(64, 30.0).unwrap();
        let next = integrate_step(&zero, &p).unwrap();
        assert!(next.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_mode_follows_dispersion_relation() {
        let l = 64.0;
        let h = 0.05;
        for m in [3usize, 10, 20] {
            let k = spectral::wavenumber(m, l);
            let eps = 1e-8;
            let u = FieldLine::from_fn(128, l, |x| eps * (k * x).sin()).unwrap();
            let next = integrate_step(&u, &params(128, l, 1.0, h)).unwrap();
            let ratio = spectral::amplitude_spectrum(&next)[m] / spectral::amplitude_spectrum(&u)[m];
            let expected = ((k * k - k.powi(4)) * h).exp();
            assert!(
                (ratio - expected).abs() / expected < 1e-6,
                "m={m}: {ratio} vs {expected}"
            );
        }
    }

    #[test]
    fn trajectory_bookkeeping() {
        let p = KsParams {
            length: 20.0,
            nu: 1.0,
            dt_solver: 0.01,
            n_points: 32,
            warmup_steps: 0,
            record_every: 1,
            n_record: 3,
        };
        let zero = FieldLine::zeros(32, 20.0).unwrap();
        let traj = integrate_trajectory(&zero, &p).unwrap();
        assert_eq!(traj.n_frames(), 3);
        assert!(traj.states().iter().all(|v| *v == 0.0));
        assert!((traj.dt_record - 0.01).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let sampler = ParamSampler {
            n_points: 64,
            warmup_steps: 5,
            n_record: 6,
            length_range: (22.0, 22.0),
            dt_range: (0.2, 0.2),
            ..Default::default()
        };
        let spec = InitialConditionSpec::default();
        let a = generate_dataset(2, &spec, &sampler, 7).unwrap();
        let b = generate_dataset(2, &spec, &sampler, 7).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_ne!(a.trajectories[0].states(), a.trajectories[1].states());
        for traj in &a.trajectories {
            let m0 = traj.frame_field(0).mean();
            for t in 0..traj.n_frames() {
                assert!((traj.frame_field(t).mean() - m0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn viscosity_sampler_respects_bounds() {
        let sampler = ParamSampler {
            nu_range: (0.5, 1.5),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = sampler.sample(&mut rng);
            assert!((0.5..=1.5).contains(&p.nu));
            assert!((57.6..=70.4).contains(&p.length));
            assert!((0.018..=0.022).contains(&p.dt_solver));
        }
    }

    #[test]
    fn rejects_zero_trajectories() {
        let spec = InitialConditionSpec::default();
        assert!(generate_dataset(0, &spec, &ParamSampler::default(), 1).is_err());
    }
}
