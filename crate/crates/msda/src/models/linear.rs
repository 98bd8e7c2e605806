use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{is_hurwitz, lyapunov_continuous, noise_factor, psd_project};
use crate::models::Trajectory;
use crate::rng;

/// Two-scale linear system `dx = (a11 x + a12 y)dt + σx dWx`,
/// `dy = (a21 x + a22 y)/ε dt + σy/√ε dWy`, observed through `x` with noise `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTwoScaleParams {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub eps: f64,
    pub r_obs: f64,
}

impl LinearTwoScaleParams {
    /// Coefficients used for the filtering comparison across reduced models.
    pub fn figure1(eps: f64) -> Self {
        Self {
            a11: -1.0,
            a12: 1.0,
            a21: -1.0,
            a22: -1.0,
            sigma_x: 2f64.sqrt(),
            sigma_y: 2f64.sqrt(),
            eps,
            r_obs: 0.5,
        }
    }

    /// Coefficients used for the pathwise convergence study.
    pub fn convergence_study(eps: f64) -> Self {
        Self {
            a11: -1.0,
            a12: -1.0,
            a21: 1.0,
            a22: -1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
            eps,
            r_obs: 1.0,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.a11, self.a12, self.a21, self.a22, self.sigma_x, self.sigma_y, self.eps, self.r_obs,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return invalid("linear model: non-finite coefficient");
        }
        if self.eps <= 0.0 {
            return invalid(format!("linear model: eps must be positive, got {}", self.eps));
        }
        if self.a22 >= 0.0 {
            return invalid(format!("linear model: a22 must be negative, got {}", self.a22));
        }
        if self.a11 - self.a12 * self.a21 / self.a22 >= 0.0 {
            return invalid("linear model: averaged drift a11 - a12 a21 / a22 must be negative");
        }
        if self.sigma_x < 0.0 || self.sigma_y < 0.0 {
            return invalid("linear model: noise amplitudes must be nonnegative");
        }
        if self.r_obs <= 0.0 {
            return invalid(format!("linear model: R must be positive, got {}", self.r_obs));
        }
        if !is_hurwitz(&self.drift_unscaled()) {
            return invalid("linear model: drift matrix is not Hurwitz");
        }
        Ok(())
    }

    fn drift_unscaled(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.a11, self.a12, self.a21, self.a22])
    }

    /// `A_ε`.
    pub fn drift(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[self.a11, self.a12, self.a21 / self.eps, self.a22 / self.eps],
        )
    }

    /// `Q_ε = diag(σx², σy²/ε)`.
    pub fn noise(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            self.sigma_x * self.sigma_x,
            self.sigma_y * self.sigma_y / self.eps,
        ]))
    }
}

/// Exact Gaussian transition of an OU process `dX = A X dt + dW`, `E dW dWᵀ = Q dt`.
#[derive(Debug, Clone)]
pub struct LinearTransition {
    pub phi: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl LinearTransition {
    /// Step covariance from the stationary covariance `C`: `Q_dt = C − Φ C Φᵀ`.
    /// No augmented exponential is formed, so stiff drifts with long steps stay finite.
    pub fn new(a: &DMatrix<f64>, q: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return invalid(format!("transition step must be positive, got {dt}"));
        }
        if !is_hurwitz(a) {
            return invalid("transition drift is not Hurwitz");
        }
        let phi = (a * dt).exp();
        let c = lyapunov_continuous(a, q)?;
        let cov = psd_project(&(&c - &phi * &c * phi.transpose()));
        let factor = noise_factor(&cov);
        Ok(Self { phi, cov, factor })
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn sample(&self, x: &DVector<f64>, rng: &mut rng::StreamRng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng::normal(rng));
        &self.phi * x + &self.factor * z
    }
}

/// Samples the exact transition of the two-scale model `n_steps` times.
pub fn integrate_linear_exact(
    p: &LinearTwoScaleParams,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    p.validate()?;
    if x0.len() != 2 || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("x0 must be a finite 2-vector".into()));
    }
    let tr = LinearTransition::new(&p.drift(), &p.noise(), dt)?;
    let mut rng = rng::stream(seed, "linear-truth");
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    times.push(0.0);
    states.push(x.clone());
    for k in 1..=n_steps {
        x = tr.sample(&x, &mut rng);
        times.push(k as f64 * dt);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_is_matrix_exponential() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.sigma_x = 0.0;
        p.sigma_y = 0.0;
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let traj = integrate_linear_exact(&p, &x0, 0.25, 8, 1).unwrap();
        let exact = (p.drift() * 2.0).exp() * &x0;
        assert!((&traj.states[8] - exact).amax() < 1e-12);
    }

    #[test]
    fn rejects_unstable_drift() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.a11 = 3.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn stiff_long_step_stays_finite() {
        let p = LinearTwoScaleParams::figure1(1.0 / 256.0);
        let tr = LinearTransition::new(&p.drift(), &p.noise(), 1.0).unwrap();
        assert!(tr.cov.iter().all(|v| v.is_finite()));
        assert!(tr.phi.iter().all(|v| v.is_finite()));
    }
}
