//! Real discrete Fourier transforms over periodic 1D grids.
//!
//! Conventions: the forward transform is unnormalized and one-sided,
//! `c_m = sum_j u_j exp(-2 pi i m j / N)` for `m = 0..=N/2`; the inverse
//! carries the `1/N`. Wavenumber `m` has angular frequency `2 pi m / L`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Samples of a periodic field on a uniform grid of `N = 2^p` points.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLine {
    values: Vec<f64>,
    length: f64,
}

impl FieldLine {
    pub fn new(values: Vec<f64>, length: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidField("field has no samples".into()));
        }
        if !values.len().is_power_of_two() {
            return Err(Error::InvalidField(format!(
                "grid size {} is not a power of two",
                values.len()
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidField(format!(
                "domain length must be positive, got {length}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite sample at index {i}")));
        }
        Ok(Self { values, length })
    }

    /// Evaluates `f(x)` at the grid points `x_j = j L / N`.
    pub fn from_fn(n: usize, length: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = length / n as f64;
        Self::new((0..n).map(|j| f(j as f64 * dx)).collect(), length)
    }

    pub fn zeros(n: usize, length: f64) -> Result<Self> {
        Self::new(vec![0.0; n], length)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        self.length / self.values.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// One-sided spectrum of a real field, `N/2 + 1` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    coefficients: Vec<Complex64>,
    length: f64,
}

impl Spectrum {
    /// Builds a spectrum for a grid of `2 * (coefficients.len() - 1)` points.
    ///
    /// The DC and Nyquist coefficients of a real signal are real; imaginary
    /// parts there are rejected unless they are round-off sized.
    pub fn new(mut coefficients: Vec<Complex64>, length: f64) -> Result<Self> {
        if coefficients.len() < 2 || !(coefficients.len() - 1).is_power_of_two() {
            return Err(Error::InvalidField(format!(
                "{} coefficients do not describe a power-of-two grid",
                coefficients.len()
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidField(format!(
                "domain length must be positive, got {length}"
            )));
        }
        if coefficients.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::InvalidField("non-finite spectral coefficient".into()));
        }
        let scale = coefficients.iter().map(|c| c.norm()).fold(1.0, f64::max);
        let last = coefficients.len() - 1;
        for idx in [0, last] {
            if coefficients[idx].im.abs() > 1e-12 * scale {
                return Err(Error::InvalidField(format!(
                    "coefficient {idx} of a real signal must be real"
                )));
            }
            coefficients[idx].im = 0.0;
        }
        Ok(Self { coefficients, length })
    }

    pub fn zeros(n_points: usize, length: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); n_points / 2 + 1], length)
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex64] {
        &mut self.coefficients
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of grid points of the underlying real signal.
    pub fn n_points(&self) -> usize {
        2 * (self.coefficients.len() - 1)
    }

    /// `sum_j |u_j|^2` recovered from the one-sided coefficients.
    pub fn energy(&self) -> f64 {
        let n = self.n_points();
        let last = self.coefficients.len() - 1;
        let interior: f64 = self.coefficients[1..last].iter().map(|c| c.norm_sqr()).sum();
        (self.coefficients[0].norm_sqr() + 2.0 * interior + self.coefficients[last].norm_sqr()) / n as f64
    }
}

/// Angular wavenumber `2 pi m / L`.
pub fn wavenumber(m: usize, length: f64) -> f64 {
    2.0 * PI * m as f64 / length
}

/// Reusable forward/inverse real transform pair for a fixed grid size.
///
/// Holds its own scratch buffers, so hot loops (the KS integrator, the
/// spectral losses) avoid per-call allocation.
pub struct RealTransform {
    n: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    real_buf: Vec<f64>,
    complex_buf: Vec<Complex64>,
    scratch_fwd: Vec<Complex64>,
    scratch_inv: Vec<Complex64>,
}

impl RealTransform {
    pub fn new(n: usize) -> Self {
        let (forward, inverse) = PLANNER.with(|p| {
            let mut planner = p.borrow_mut();
            (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
        });
        let scratch_fwd = forward.make_scratch_vec();
        let scratch_inv = inverse.make_scratch_vec();
        Self {
            n,
            real_buf: vec![0.0; n],
            complex_buf: vec![Complex64::new(0.0, 0.0); n / 2 + 1],
            forward,
            inverse,
            scratch_fwd,
            scratch_inv,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Unnormalized forward transform of `input` into `out` (length `N/2 + 1`).
    pub fn forward(&mut self, input: &[f64], out: &mut [Complex64]) {
        self.real_buf.copy_from_slice(input);
        self.forward
            .process_with_scratch(&mut self.real_buf, out, &mut self.scratch_fwd)
            .expect("buffer sizes fixed at construction");
    }

    /// Inverse transform including the `1/N` factor. Imaginary parts of the
    /// DC and Nyquist bins are ignored.
    pub fn inverse(&mut self, input: &[Complex64], out: &mut [f64]) {
        self.complex_buf.copy_from_slice(input);
        let last = self.complex_buf.len() - 1;
        self.complex_buf[0].im = 0.0;
        self.complex_buf[last].im = 0.0;
        self.inverse
            .process_with_scratch(&mut self.complex_buf, out, &mut self.scratch_inv)
            .expect("buffer sizes fixed at construction");
        let inv_n = 1.0 / self.n as f64;
        out.iter_mut().for_each(|v| *v *= inv_n);
    }
}

pub fn dft_forward(field: &FieldLine) -> Spectrum {
    let n = field.len();
    let mut transform = RealTransform::new(n);
    let mut coefficients = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
    transform.forward(field.values(), &mut coefficients);
    let last = coefficients.len() - 1;
    coefficients[0].im = 0.0;
    coefficients[last].im = 0.0;
    Spectrum {
        coefficients,
        length: field.length(),
    }
}

pub fn dft_inverse(spectrum: &Spectrum) -> FieldLine {
    let n = spectrum.n_points();
    let mut transform = RealTransform::new(n);
    let mut values = vec![0.0; n];
    transform.inverse(spectrum.coefficients(), &mut values);
    FieldLine {
        values,
        length: spectrum.length(),
    }
}

/// Unnormalized one-sided magnitudes `|c_m|`, `m = 0..=N/2`.
pub fn amplitude_spectrum(field: &FieldLine) -> Vec<f64> {
    dft_forward(field).coefficients().iter().map(|c| c.norm()).collect()
}

/// `d^order f / dx^order` by multiplying mode `m` with `(i 2 pi m / L)^order`.
///
/// For odd orders the Nyquist mode is dropped, since its derivative has no
/// real representation on the grid.
pub fn spectral_derivative(field: &FieldLine, order: u32) -> FieldLine {
    let mut spectrum = dft_forward(field);
    let length = spectrum.length();
    let last = spectrum.coefficients().len() - 1;
    for (m, c) in spectrum.coefficients_mut().iter_mut().enumerate() {
        let ik = Complex64::new(0.0, wavenumber(m, length));
        *c *= ik.powu(order);
        if m == last && order % 2 == 1 {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    dft_inverse(&spectrum)
}

/// Zeroes every mode above `max_wavenumber`, and the mean when `zero_mean`.
pub fn band_filter(field: &FieldLine, zero_mean: bool, max_wavenumber: usize) -> Result<FieldLine> {
    let half = field.len() / 2;
    if max_wavenumber > half {
        return Err(Error::Parameter(format!(
            "max_wavenumber {max_wavenumber} exceeds N/2 = {half}"
        )));
    }
    let mut spectrum = dft_forward(field);
    let coefficients = spectrum.coefficients_mut();
    coefficients[max_wavenumber + 1..]
        .iter_mut()
        .for_each(|c| *c = Complex64::new(0.0, 0.0));
    if zero_mean {
        coefficients[0] = Complex64::new(0.0, 0.0);
    }
    Ok(dft_inverse(&spectrum))
}
