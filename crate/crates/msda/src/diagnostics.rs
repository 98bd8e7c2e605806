//! Filter scores and equilibrium statistics.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

/// `√(mean over time of ‖x − x̃‖²/n)`.
pub fn rmse(truth: &[DVector<f64>], estimates: &[DVector<f64>]) -> Result<f64> {
    if truth.is_empty() || truth.len() != estimates.len() {
        return invalid("rmse: series must be non-empty and of equal length");
    }
    let mut acc = 0.0;
    for (x, e) in truth.iter().zip(estimates) {
        if x.len() != e.len() || x.is_empty() {
            return invalid("rmse: state dimensions differ");
        }
        let d = x - e;
        if d.iter().any(|v| !v.is_finite()) {
            return invalid("rmse: non-finite entry");
        }
        acc += d.norm_squared() / x.len() as f64;
    }
    Ok((acc / truth.len() as f64).sqrt())
}

pub fn rmse_scalar(truth: &[f64], estimates: &[f64]) -> Result<f64> {
    if truth.is_empty() || truth.len() != estimates.len() {
        return invalid("rmse: series must be non-empty and of equal length");
    }
    let s: f64 = truth.iter().zip(estimates).map(|(a, b)| (a - b).powi(2)).sum();
    if !s.is_finite() {
        return invalid("rmse: non-finite entry");
    }
    Ok((s / truth.len() as f64).sqrt())
}

pub struct ConsistencyInput<'a> {
    pub truth: &'a [DVector<f64>],
    pub means: &'a [DVector<f64>],
    pub covs: &'a [DMatrix<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyScore {
    pub value: f64,
    /// Steps skipped because the covariance was numerically singular.
    pub excluded: usize,
}

/// Smallest eigenvalue a covariance may have and still be scored.
pub const MIN_SCORED_EIGENVALUE: f64 = 1e-12;

/// Time average of `(1/n)(x − x̃)ᵀ S̃⁻¹ (x − x̃)`.
pub fn consistency(input: &ConsistencyInput<'_>) -> Result<ConsistencyScore> {
    let t = input.truth.len();
    if t == 0 || input.means.len() != t || input.covs.len() != t {
        return invalid("consistency: series must be non-empty and of equal length");
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for ((x, m), s) in input.truth.iter().zip(input.means).zip(input.covs) {
        let n = x.len();
        if m.len() != n || s.shape() != (n, n) {
            return invalid("consistency: dimension mismatch");
        }
        let chol = match s.clone().cholesky() {
            Some(c) => c,
            None => continue,
        };
        let diag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
        if !(diag_min > MIN_SCORED_EIGENVALUE) {
            continue;
        }
        let e = x - m;
        let w = chol.solve(&e);
        acc += e.dot(&w) / n as f64;
        used += 1;
    }
    let excluded = t - used;
    if excluded as f64 > 0.01 * t as f64 {
        return Err(Error::Numerical(format!(
            "consistency: {excluded} of {t} covariances are singular"
        )));
    }
    Ok(ConsistencyScore { value: acc / used as f64, excluded })
}

/// Scalar consistency `⟨(x − x̃)²/s⟩`.
pub fn consistency_scalar(truth: &[f64], means: &[f64], vars: &[f64]) -> Result<ConsistencyScore> {
    let t = truth.len();
    if t == 0 || means.len() != t || vars.len() != t {
        return invalid("consistency: series must be non-empty and of equal length");
    }
    let mut acc = 0.0;
    let mut used = 0;
    for ((x, m), s) in truth.iter().zip(means).zip(vars) {
        if *s > MIN_SCORED_EIGENVALUE {
            acc += (x - m).powi(2) / s;
            used += 1;
        }
    }
    let excluded = t - used;
    if excluded as f64 > 0.01 * t as f64 {
        return Err(Error::Numerical(format!("consistency: {excluded} of {t} variances vanish")));
    }
    Ok(ConsistencyScore { value: acc / used as f64, excluded })
}

/// Biased sample autocorrelation, normalized so `acf[0] = 1`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 || max_lag >= n {
        return invalid("autocorrelation: series shorter than max_lag");
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return invalid("autocorrelation: zero-variance series");
    }
    Ok((0..=max_lag)
        .map(|k| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0)
        .collect())
}

/// ACF magnitude below which the correlation-time integral stops.
pub fn acf_cutoff() -> f64 {
    (-4.0f64).exp()
}

/// `dt · Σ acf[k]` (trapezoid) up to the first lag with `|acf| < e⁻⁴`.
pub fn correlation_time(acf: &[f64], dt: f64) -> f64 {
    let cut = acf_cutoff();
    let end = acf.iter().position(|v| v.abs() < cut).unwrap_or(acf.len());
    if end == 0 {
        return 0.0;
    }
    let s: f64 = acf[..end].iter().sum();
    dt * (s - 0.5 * acf[0])
}

/// Sample autocorrelation `⟨u(t+τ) ū(t)⟩ / ⟨|u|²⟩` of a centered complex series.
pub fn complex_autocorrelation(series: &[Complex64], max_lag: usize) -> Result<Vec<Complex64>> {
    let n = series.len();
    if n < 2 || max_lag >= n {
        return invalid("autocorrelation: series shorter than max_lag");
    }
    let mean = series.iter().sum::<Complex64>() / n as f64;
    let c: Vec<Complex64> = series.iter().map(|v| v - mean).collect();
    let c0 = c.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return invalid("autocorrelation: zero-variance series");
    }
    Ok((0..=max_lag)
        .map(|k| {
            c[k..].iter().zip(&c[..n - k]).map(|(a, b)| a * b.conj()).sum::<Complex64>() / n as f64 / c0
        })
        .collect())
}

/// Complex analogue of [`correlation_time`], truncated where `|acf|` first drops below
/// e⁻⁴. For `acf = e^{−ατ}` this approaches `1/α`.
pub fn complex_correlation_time(acf: &[Complex64], dt: f64) -> Complex64 {
    let cut = acf_cutoff();
    let end = acf.iter().position(|v| v.norm() < cut).unwrap_or(acf.len());
    if end == 0 {
        return Complex64::new(0.0, 0.0);
    }
    let s: Complex64 = acf[..end].iter().sum();
    (s - acf[0] * 0.5) * dt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMethod {
    Histogram,
    GaussianKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub centers: Vec<f64>,
    pub density: Vec<f64>,
    pub width: f64,
}

impl DensityTable {
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.width
    }

    /// `∫|p − q|` on a shared grid.
    pub fn l1_distance(&self, other: &DensityTable) -> Result<f64> {
        if self.centers.len() != other.centers.len()
            || (self.width - other.width).abs() > 1e-12 * self.width
        {
            return invalid("densities are on different grids");
        }
        Ok(self.density.iter().zip(&other.density).map(|(a, b)| (a - b).abs()).sum::<f64>()
            * self.width)
    }
}

pub const MIN_PDF_SAMPLES: usize = 10_000;

/// Normalized density on `bins` equal cells spanning `[lo, hi]`.
/// Histogram samples outside the range are dropped before normalizing.
pub fn equilibrium_pdf(
    series: &[f64],
    bins: usize,
    range: (f64, f64),
    method: DensityMethod,
) -> Result<DensityTable> {
    if series.len() < MIN_PDF_SAMPLES {
        return invalid(format!("equilibrium pdf needs at least {MIN_PDF_SAMPLES} samples"));
    }
    let (lo, hi) = range;
    if bins == 0 || !(hi > lo) {
        return invalid("equilibrium pdf: empty grid");
    }
    let width = (hi - lo) / bins as f64;
    let centers: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let mut density = vec![0.0; bins];
    match method {
        DensityMethod::Histogram => {
            for &v in series {
                if v >= lo && v < hi {
                    density[(((v - lo) / width) as usize).min(bins - 1)] += 1.0;
                }
            }
        }
        DensityMethod::GaussianKernel => {
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let h = 1.06 * sd * n.powf(-0.2);
            // Kernel mass is binned first, then each bin is smoothed against its neighbours.
            let mut counts = vec![0.0; bins];
            for &v in series {
                if v >= lo && v < hi {
                    counts[(((v - lo) / width) as usize).min(bins - 1)] += 1.0;
                }
            }
            for (i, c) in centers.iter().enumerate() {
                density[i] = counts
                    .iter()
                    .zip(&centers)
                    .map(|(w, x)| w * (-0.5 * ((c - x) / h).powi(2)).exp())
                    .sum();
            }
        }
    }
    let total: f64 = density.iter().sum::<f64>() * width;
    if !(total > 0.0) {
        return invalid("equilibrium pdf: no samples inside the range");
    }
    for d in density.iter_mut() {
        *d /= total;
    }
    Ok(DensityTable { centers, density, width })
}

/// Mean and batch-means standard error of a correlated series.
pub fn batch_mean(x: &[f64], batches: usize) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::INFINITY);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let b = batches.min(n).max(2);
    let len = n / b;
    if len == 0 {
        return (mean, f64::INFINITY);
    }
    let means: Vec<f64> =
        (0..b).map(|i| x[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64).collect();
    let mm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (b - 1) as f64;
    (mean, (var / b as f64).sqrt())
}
