//! Offline regression closure for the one-layer Lorenz-96 model: pooled model-error samples,
//! cubic least squares, AR(1) residual fit and the two-parameter `(b₁, σ̂)` variant.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::models::{Ar1Convention, CubicAr1Params, Trajectory};

/// Pooled model-error samples, site-major: entry `i * steps + t` is site `i` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelErrorSeries {
    pub u_values: Vec<f64>,
    pub x_values: Vec<f64>,
    pub dt: f64,
    pub n_sites: usize,
}

impl ModelErrorSeries {
    pub fn steps(&self) -> usize {
        self.u_values.len().checked_div(self.n_sites).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_values.len() != self.x_values.len() {
            return invalid("model-error series: u and x lengths differ");
        }
        if !(self.dt > 0.0) {
            return invalid("model-error series: dt must be positive");
        }
        if self.n_sites == 0 || !self.u_values.len().is_multiple_of(self.n_sites) {
            return invalid("model-error series: length is not a multiple of the site count");
        }
        Ok(())
    }
}

/// `U = x_{i−1}(x_{i+1} − x_{i−2}) − x_i + F − (x_i(t+dt) − x_i(t))/dt` at every site and every
/// time with a forward neighbour.
pub fn model_error_series(slow: &Trajectory, forcing: f64, dt: f64) -> Result<ModelErrorSeries> {
    if slow.len() < 2 {
        return invalid("model-error series needs at least two samples");
    }
    if !(dt > 0.0) {
        return invalid("model-error series: dt must be positive");
    }
    let n = slow.dim();
    if n < 4 {
        return invalid(format!("model-error series needs at least 4 sites, got {n}"));
    }
    let steps = slow.len() - 1;
    let mut u = vec![0.0; n * steps];
    let mut xs = vec![0.0; n * steps];
    for (t, w) in slow.states.windows(2).enumerate() {
        let (x, next) = (&w[0], &w[1]);
        for i in 0..n {
            let xm1 = x[(i + n - 1) % n];
            let xm2 = x[(i + n - 2) % n];
            let xp1 = x[(i + 1) % n];
            u[i * steps + t] = xm1 * (xp1 - xm2) - x[i] + forcing - (next[i] - x[i]) / dt;
            xs[i * steps + t] = x[i];
        }
    }
    Ok(ModelErrorSeries { u_values: u, x_values: xs, dt, n_sites: n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CubicFit {
    /// `b0, b1, b2, b3`.
    pub coeffs: [f64; 4],
    pub stderr: [f64; 4],
    pub residual_std: f64,
}

impl CubicFit {
    pub fn eval(&self, x: f64) -> f64 {
        let b = &self.coeffs;
        b[0] + x * (b[1] + x * (b[2] + x * b[3]))
    }
}

/// Ordinary least squares on `(1, x, x², x³)`. The design is centered and scaled before solving
/// the normal equations, then mapped back.
pub fn fit_cubic(series: &ModelErrorSeries) -> Result<CubicFit> {
    series.validate()?;
    polynomial_fit(&series.x_values, &series.u_values, 3).map(|(c, se, rs)| CubicFit {
        coeffs: [c[0], c[1], c[2], c[3]],
        stderr: [se[0], se[1], se[2], se[3]],
        residual_std: rs,
    })
}

fn polynomial_fit(x: &[f64], y: &[f64], degree: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let p = degree + 1;
    let n = x.len();
    if n <= p {
        return invalid("polynomial fit needs more samples than coefficients");
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::RankDeficient("polynomial fit: all x values coincide".into()));
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for (&xi, &yi) in x.iter().zip(y) {
        let s = (xi - mean) / scale;
        row[0] = 1.0;
        for k in 1..p {
            row[k] = row[k - 1] * s;
        }
        for a in 0..p {
            rhs[a] += row[a] * yi;
            for b in 0..=a {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let (lmin, lmax) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lmin > 1e-12 * lmax) {
        return Err(Error::RankDeficient("polynomial fit: design matrix is rank deficient".into()));
    }
    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficient("polynomial fit: singular Gram matrix".into()))?;
    let c_scaled = chol.solve(&rhs);
    let mut ssr = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let s = (xi - mean) / scale;
        let fit = c_scaled.iter().rev().fold(0.0, |acc, c| acc * s + c);
        ssr += (yi - fit).powi(2);
    }
    let dof = (n - p) as f64;
    let sigma2 = ssr / dof;
    // Map coefficients of s = (x − m)/h back to powers of x via the binomial expansion.
    let lin = |k: usize| -> DVector<f64> {
        // Coefficients in x of s^k.
        let mut out = DVector::zeros(p);
        for j in 0..=k {
            let binom = (0..j).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64);
            out[j] = binom * (-mean).powi((k - j) as i32) / scale.powi(k as i32);
        }
        out
    };
    let t = DMatrix::from_columns(&(0..p).map(lin).collect::<Vec<_>>());
    let coeffs = &t * &c_scaled;
    let cov_scaled = chol.inverse() * sigma2;
    let cov = &t * cov_scaled * t.transpose();
    let stderr = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    Ok((coeffs.iter().copied().collect(), stderr, (ssr / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ar1Fit {
    pub phi: f64,
    pub sigma_hat: f64,
    pub variance: f64,
}

pub const MIN_AR1_SAMPLES: usize = 100;

/// Lag-1 autocorrelation and the amplitude that reproduces the sample variance under the
/// chosen recursion. Segments are pooled; lag products never cross a segment boundary.
pub fn fit_ar1_segments(segments: &[&[f64]], convention: Ar1Convention) -> Result<Ar1Fit> {
    let total: usize = segments.iter().map(|s| s.len()).sum();
    if total < MIN_AR1_SAMPLES {
        return invalid(format!("AR(1) fit needs at least {MIN_AR1_SAMPLES} samples"));
    }
    let mean = segments.iter().flat_map(|s| s.iter()).sum::<f64>() / total as f64;
    let var = segments.iter().flat_map(|s| s.iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / total as f64;
    if !(var > 0.0) {
        return invalid("AR(1) fit: residuals are constant, phi is undefined (nonstationary)");
    }
    let mut lag = 0.0;
    let mut pairs = 0usize;
    for s in segments {
        for w in s.windows(2) {
            lag += (w[0] - mean) * (w[1] - mean);
            pairs += 1;
        }
    }
    let phi = lag / pairs as f64 / var;
    if !(phi.abs() < 1.0) {
        return invalid(format!("AR(1) fit: |phi| = {} is not below 1 (nonstationary)", phi.abs()));
    }
    // Stationary variance of e ← φe + σ̂ c z is σ̂² c²/(1 − φ²).
    let c = convention.amplitude_factor(phi);
    let sigma_hat = (var * (1.0 - phi * phi)).sqrt() / c;
    Ok(Ar1Fit { phi, sigma_hat, variance: var })
}

pub fn fit_ar1(residuals: &[f64], convention: Ar1Convention) -> Result<Ar1Fit> {
    fit_ar1_segments(&[residuals], convention)
}

/// Residuals of `fit`, one segment per site.
pub fn cubic_residuals(series: &ModelErrorSeries, fit: &CubicFit) -> Vec<f64> {
    series.u_values.iter().zip(&series.x_values).map(|(u, x)| u - fit.eval(*x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CubicAr1Fit {
    pub cubic: CubicFit,
    pub ar1: Ar1Fit,
}

impl CubicAr1Fit {
    pub fn params(&self) -> CubicAr1Params {
        let b = self.cubic.coeffs;
        CubicAr1Params { b0: b[0], b1: b[1], b2: b[2], b3: b[3], phi: self.ar1.phi, sigma_hat: self.ar1.sigma_hat }
    }
}

pub fn offline_cubic_ar1_fit(series: &ModelErrorSeries, convention: Ar1Convention) -> Result<CubicAr1Fit> {
    let cubic = fit_cubic(series)?;
    let res = cubic_residuals(series, &cubic);
    let steps = series.steps();
    let segs: Vec<&[f64]> = res.chunks(steps).collect();
    let ar1 = fit_ar1_segments(&segs, convention)?;
    Ok(CubicAr1Fit { cubic, ar1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoParamFit {
    /// Linear damping `b₁ = α`.
    pub b1: f64,
    pub b1_stderr: f64,
    /// Standard deviation of `U − b₁x`.
    pub sigma_hat: f64,
}

impl TwoParamFit {
    pub fn params(&self) -> CubicAr1Params {
        CubicAr1Params::linear(self.b1, self.sigma_hat)
    }
}

/// Least squares `U ≈ b₁x` through the origin, then the residual standard deviation.
pub fn offline_two_param_fit(series: &ModelErrorSeries) -> Result<TwoParamFit> {
    series.validate()?;
    let n = series.x_values.len();
    if n < 2 {
        return invalid("two-parameter fit needs at least two samples");
    }
    let sxx: f64 = series.x_values.iter().map(|x| x * x).sum();
    if !(sxx > 0.0) {
        return Err(Error::RankDeficient("two-parameter fit: all x values are zero".into()));
    }
    let sxu: f64 = series.x_values.iter().zip(&series.u_values).map(|(x, u)| x * u).sum();
    let b1 = sxu / sxx;
    let res: Vec<f64> = series.u_values.iter().zip(&series.x_values).map(|(u, x)| u - b1 * x).collect();
    let mean = res.iter().sum::<f64>() / n as f64;
    let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let ssr: f64 = res.iter().map(|r| r * r).sum();
    let b1_stderr = (ssr / (n - 1) as f64 / sxx).sqrt();
    Ok(TwoParamFit { b1, b1_stderr, sigma_hat: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(x: Vec<f64>, u: Vec<f64>) -> ModelErrorSeries {
        ModelErrorSeries { u_values: u, x_values: x, dt: 0.01, n_sites: 1 }
    }

    #[test]
    fn constant_trajectory_gives_forcing_minus_state() {
        let c = 2.5;
        let traj = Trajectory {
            times: vec![0.0, 0.1, 0.2],
            states: vec![DVector::from_element(5, c); 3],
            seed: None,
        };
        let s = model_error_series(&traj, 8.0, 0.1).unwrap();
        assert!(s.u_values.iter().all(|u| (u - (8.0 - c)).abs() < 1e-14));
        assert_eq!(s.u_values.len(), 10);
    }

    #[test]
    fn exact_cubic_recovered() {
        let x: Vec<f64> = (0..400).map(|k| -8.0 + 0.05 * k as f64).collect();
        let b = [-0.198, 0.575, -0.0055, -0.000223];
        let u: Vec<f64> = x.iter().map(|v| b[0] + v * (b[1] + v * (b[2] + v * b[3]))).collect();
        let f = fit_cubic(&series(x.clone(), u)).unwrap();
        for (c, want) in f.coeffs.iter().zip(b) {
            assert!((c - want).abs() < 1e-10, "{:?}", f.coeffs);
        }
        let z = fit_cubic(&series(x, vec![0.0; 400])).unwrap();
        assert!(z.coeffs.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn degenerate_design_rejected() {
        assert!(fit_cubic(&series(vec![1.0; 50], vec![0.3; 50])).is_err());
        assert!(fit_cubic(&series(vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0], vec![0.0; 6])).is_err());
    }

    #[test]
    fn linear_error_gives_zero_sigma() {
        let x: Vec<f64> = (0..200).map(|k| (k as f64 * 0.37).sin() * 5.0).collect();
        let u: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let f = offline_two_param_fit(&series(x, u)).unwrap();
        assert!((f.b1 - 0.5).abs() < 1e-14);
        assert!(f.sigma_hat < 1e-12);
    }

    #[test]
    fn constant_residuals_rejected() {
        assert!(fit_ar1(&[1.5; 500], Ar1Convention::PaperLiteral).is_err());
    }
}
