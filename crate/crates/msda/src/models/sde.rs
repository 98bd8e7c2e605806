use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::models::Trajectory;
use crate::rng::{self, StreamRng};

/// `dt · stiffness` above this value is refused by the Euler–Maruyama driver.
pub const EM_STABILITY_BOUND: f64 = 0.5;

/// An Itô SDE `dX = f(X) dt + G(X) dW` with `dW` a vector of independent standard increments.
pub trait Sde {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Adds `G(x) dw` to `out`.
    fn add_diffusion(&self, x: &[f64], dw: &[f64], out: &mut [f64]);
    /// Largest linear damping rate; bounds the admissible step.
    fn stiffness(&self) -> f64;
}

/// One Euler–Maruyama step in place. `work` needs `dim + noise_dim` entries.
pub fn em_step<S: Sde + ?Sized>(
    model: &S,
    x: &mut [f64],
    dt: f64,
    rng: &mut StreamRng,
    work: &mut [f64],
) {
    let n = model.dim();
    let (f, dw) = work.split_at_mut(n);
    let dw = &mut dw[..model.noise_dim()];
    model.drift(x, f);
    let sq = dt.sqrt();
    for v in dw.iter_mut() {
        *v = sq * rng::normal(rng);
    }
    for v in f.iter_mut() {
        *v *= dt;
    }
    model.add_diffusion(x, dw, f);
    for (xi, fi) in x.iter_mut().zip(f.iter()) {
        *xi += fi;
    }
}

pub(crate) fn check_em_step<S: Sde + ?Sized>(model: &S, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return invalid(format!("Euler-Maruyama step must be positive, got {dt}"));
    }
    let load = dt * model.stiffness();
    if load > EM_STABILITY_BOUND {
        return invalid(format!(
            "Euler-Maruyama step {dt} too large: dt * damping = {load:.3} exceeds {EM_STABILITY_BOUND}"
        ));
    }
    Ok(())
}

/// Euler–Maruyama integration recording every step.
pub fn integrate_sde_em<S: Sde + ?Sized>(
    model: &S,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    integrate_sde_em_strided(model, x0, dt, n_steps, 1, seed)
}

/// Euler–Maruyama integration recording every `stride`-th step. `n_steps` must be a
/// multiple of `stride`.
pub fn integrate_sde_em_strided<S: Sde + ?Sized>(
    model: &S,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stride: usize,
    seed: u64,
) -> Result<Trajectory> {
    check_em_step(model, dt)?;
    if x0.len() != model.dim() || x0.iter().any(|v| !v.is_finite()) {
        return invalid("initial state has the wrong dimension or is not finite");
    }
    if stride == 0 || !n_steps.is_multiple_of(stride) {
        return invalid("n_steps must be a positive multiple of the recording stride");
    }
    let mut rng = rng::stream(seed, "sde-path");
    let mut x = x0.as_slice().to_vec();
    let mut work = vec![0.0; model.dim() + model.noise_dim()];
    let n_out = n_steps / stride + 1;
    let mut times = Vec::with_capacity(n_out);
    let mut states = Vec::with_capacity(n_out);
    times.push(0.0);
    states.push(x0.clone());
    for k in 1..=n_steps {
        em_step(model, &mut x, dt, &mut rng, &mut work);
        if x.iter().any(|v| !v.is_finite()) {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(Error::Divergence { step: k, detail: format!("state norm {norm:e}") });
        }
        if k % stride == 0 {
            times.push(k as f64 * dt);
            states.push(DVector::from_column_slice(&x));
        }
    }
    Ok(Trajectory { times, states, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ou {
        lambda: f64,
        sigma: f64,
    }

    impl Sde for Ou {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &[f64], out: &mut [f64]) {
            out[0] = -self.lambda * x[0];
        }
        fn add_diffusion(&self, _x: &[f64], dw: &[f64], out: &mut [f64]) {
            out[0] += self.sigma * dw[0];
        }
        fn stiffness(&self) -> f64 {
            self.lambda
        }
    }

    #[test]
    fn stability_guard_rejects_large_steps() {
        let m = Ou { lambda: 20.0, sigma: 1.0 };
        assert!(integrate_sde_em(&m, &DVector::zeros(1), 0.03, 10, 1).is_err());
        assert!(integrate_sde_em(&m, &DVector::zeros(1), 0.02, 10, 1).is_ok());
    }

    #[test]
    fn em_equilibrium_variance_close_to_analytic() {
        // EM stationary variance of OU is σ²/(2λ − λ²dt).
        let m = Ou { lambda: 1.0, sigma: 1.0 };
        let dt = 0.01;
        let traj = integrate_sde_em(&m, &DVector::zeros(1), dt, 400_000, 3).unwrap();
        let xs = traj.component(0);
        let tail = &xs[1000..];
        let var = tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64;
        let expected = 1.0 / (2.0 - dt);
        assert!((var - expected).abs() < 0.05 * expected, "var {var}");
    }
}
