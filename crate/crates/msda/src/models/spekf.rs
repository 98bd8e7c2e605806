use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::Sde;

/// Real layout of the SPEKF state: `[Re u, Im u, Re b, Im b, γ]`.
pub const SPEKF_DIM: usize = 5;

/// Observed mode `u` forced by a stochastic bias `b` and a stochastic damping `γ`:
/// `du = [−(γ + λu)u + b]dt + σu dWu`, `db = −(λb/ε) b dt + σb/√ε dWb`,
/// `dγ = −(λγ/ε) γ dt + σγ/√ε dWγ`. Complex increments satisfy `E|dW|² = dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpekfParams {
    pub lambda_u: Complex64,
    pub lambda_b: Complex64,
    pub lambda_gamma: f64,
    pub sigma_u: f64,
    pub sigma_b: f64,
    pub sigma_gamma: f64,
    pub eps: f64,
    pub r_obs: f64,
}

impl SpekfParams {
    /// Fast stochastic damping; the turbulent energy-transfer regime.
    pub fn regime1() -> Self {
        Self {
            lambda_u: Complex64::new(1.2, -1.78),
            lambda_b: Complex64::new(0.5, -1.0),
            lambda_gamma: 20.0,
            sigma_u: 0.5,
            sigma_b: 0.5,
            sigma_gamma: 20.0,
            eps: 1.0,
            r_obs: 0.5866 * 0.5866,
        }
    }

    /// Comparable damping scales; intermittent bursts of transient instability.
    pub fn regime2() -> Self {
        Self {
            lambda_u: Complex64::new(0.55, -1.78),
            lambda_b: Complex64::new(0.4, -1.0),
            lambda_gamma: 0.5,
            sigma_u: 0.1,
            sigma_b: 0.4,
            sigma_gamma: 0.5,
            eps: 1.0,
            r_obs: 5.2592 * 5.2592,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "regime1" => Some(Self::regime1()),
            "regime2" => Some(Self::regime2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_u.re,
            self.lambda_u.im,
            self.lambda_b.re,
            self.lambda_b.im,
            self.lambda_gamma,
            self.sigma_u,
            self.sigma_b,
            self.sigma_gamma,
            self.eps,
            self.r_obs,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return invalid("spekf: non-finite parameter");
        }
        if self.lambda_u.re <= 0.0 || self.lambda_b.re <= 0.0 || self.lambda_gamma <= 0.0 {
            return invalid("spekf: damping rates must have positive real part");
        }
        if self.sigma_u < 0.0 || self.sigma_b < 0.0 || self.sigma_gamma < 0.0 {
            return invalid("spekf: noise amplitudes must be nonnegative");
        }
        if self.eps <= 0.0 || self.r_obs <= 0.0 {
            return invalid("spekf: eps and R must be positive");
        }
        Ok(())
    }

    /// Equilibrium variances `(E|u|², E|b|², Var γ)` of the uncoupled OU marginals.
    pub fn equilibrium_gaussian_vars(&self) -> (f64, f64, f64) {
        (
            self.sigma_u.powi(2) / (2.0 * self.lambda_u.re),
            self.sigma_b.powi(2) / (2.0 * self.lambda_b.re),
            self.sigma_gamma.powi(2) / (2.0 * self.lambda_gamma),
        )
    }
}

impl Sde for SpekfParams {
    fn dim(&self) -> usize {
        SPEKF_DIM
    }

    fn noise_dim(&self) -> usize {
        5
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let damp = x[4] + self.lambda_u.re;
        let w = self.lambda_u.im;
        out[0] = -(damp * x[0] - w * x[1]) + x[2];
        out[1] = -(damp * x[1] + w * x[0]) + x[3];
        let lb = self.lambda_b / self.eps;
        out[2] = -(lb.re * x[2] - lb.im * x[3]);
        out[3] = -(lb.re * x[3] + lb.im * x[2]);
        out[4] = -(self.lambda_gamma / self.eps) * x[4];
    }

    fn add_diffusion(&self, _x: &[f64], dw: &[f64], out: &mut [f64]) {
        let su = self.sigma_u * std::f64::consts::FRAC_1_SQRT_2;
        let sb = self.sigma_b * (0.5 / self.eps).sqrt();
        out[0] += su * dw[0];
        out[1] += su * dw[1];
        out[2] += sb * dw[2];
        out[3] += sb * dw[3];
        out[4] += self.sigma_gamma / self.eps.sqrt() * dw[4];
    }

    fn stiffness(&self) -> f64 {
        self.lambda_u
            .re
            .abs()
            .max(self.lambda_b.re / self.eps)
            .max(self.lambda_gamma / self.eps)
    }
}

/// Reduced model `dU = −αU dt + βU∘dWγ + σ1 dWu + σ2 dWb` for the observed mode alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedSpekfParams {
    pub alpha: Complex64,
    pub beta_sq: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

impl ReducedSpekfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.re > 0.0) || !self.alpha.im.is_finite() {
            return invalid("reduced spekf: alpha must have positive real part");
        }
        for (name, v) in [
            ("beta_sq", self.beta_sq),
            ("sigma1_sq", self.sigma1_sq),
            ("sigma2_sq", self.sigma2_sq),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("reduced spekf: {name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn additive_sq(&self) -> f64 {
        self.sigma1_sq + self.sigma2_sq
    }

    /// Itô drift coefficient `α − β²/2`.
    pub fn ito_alpha(&self) -> Complex64 {
        self.alpha - self.beta_sq / 2.0
    }
}

impl Sde for ReducedSpekfParams {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let a = self.ito_alpha();
        out[0] = -(a.re * x[0] - a.im * x[1]);
        out[1] = -(a.re * x[1] + a.im * x[0]);
    }

    fn add_diffusion(&self, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let beta = self.beta_sq.sqrt();
        let s = (self.additive_sq() / 2.0).sqrt();
        out[0] += beta * x[0] * dw[0] + s * dw[1];
        out[1] += beta * x[1] * dw[0] + s * dw[2];
    }

    fn stiffness(&self) -> f64 {
        self.alpha.re.abs().max(self.beta_sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::integrate_sde_em;
    use nalgebra::DVector;

    #[test]
    fn noise_free_decay_matches_exponential() {
        let mut p = SpekfParams::regime1();
        p.sigma_u = 0.0;
        p.sigma_b = 0.0;
        p.sigma_gamma = 0.0;
        let x0 = DVector::from_vec(vec![1.0, 0.5, 0.0, 0.0, 0.0]);
        let dt = 1e-4;
        let traj = integrate_sde_em(&p, &x0, dt, 10_000, 1).unwrap();
        let exact = Complex64::new(1.0, 0.5) * (-p.lambda_u).exp();
        let got = traj.states.last().unwrap();
        assert!((got[0] - exact.re).abs() < 1e-3);
        assert!((got[1] - exact.im).abs() < 1e-3);
    }

    #[test]
    fn regime_presets_validate() {
        SpekfParams::regime1().validate().unwrap();
        SpekfParams::regime2().validate().unwrap();
    }

    #[test]
    fn regime1_guard_bounds_step() {
        let p = SpekfParams::regime1();
        let x0 = DVector::zeros(SPEKF_DIM);
        assert!(integrate_sde_em(&p, &x0, 0.03, 2, 1).is_err());
        assert!(integrate_sde_em(&p, &x0, 0.005, 2, 1).is_ok());
    }
}
