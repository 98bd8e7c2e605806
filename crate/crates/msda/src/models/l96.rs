use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{check_psd, noise_factor};
use crate::models::Trajectory;
use crate::rng;

/// Two-layer Lorenz-96: `N` slow sites, each coupled to a block of `J` fast sites.
#[derive(Debug, Clone, PartialEq)]
pub struct L96Params {
    pub n_slow: usize,
    pub n_fast_per_slow: usize,
    pub eps: f64,
    pub forcing: f64,
    pub fast_advect: f64,
    pub h_x: f64,
    pub h_y: f64,
    pub r_obs: DMatrix<f64>,
    pub obs_indices: Vec<usize>,
}

impl L96Params {
    /// Fully observed nine-site regime used for the time-scale separation sweep.
    pub fn sweep_regime(eps: f64) -> Self {
        Self {
            n_slow: 9,
            n_fast_per_slow: 8,
            eps,
            forcing: 10.0,
            fast_advect: 1.0,
            h_x: -0.8,
            h_y: 1.0,
            r_obs: DMatrix::identity(9, 9) * 0.1,
            obs_indices: (0..9).collect(),
        }
    }

    /// Eight-site regime with every other site observed.
    pub fn sparse_regime() -> Self {
        Self {
            n_slow: 8,
            n_fast_per_slow: 32,
            eps: 0.25,
            forcing: 20.0,
            fast_advect: 10.0,
            h_x: -0.4,
            h_y: 0.1,
            r_obs: DMatrix::identity(4, 4) * 0.1,
            obs_indices: vec![0, 2, 4, 6],
        }
    }

    pub fn n_fast(&self) -> usize {
        self.n_slow * self.n_fast_per_slow
    }

    pub fn n_total(&self) -> usize {
        self.n_slow + self.n_fast()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slow < 4 {
            return invalid(format!("l96: need at least 4 slow sites, got {}", self.n_slow));
        }
        if self.n_fast_per_slow < 1 {
            return invalid("l96: need at least one fast site per slow site");
        }
        if !(self.eps > 0.0) {
            return invalid("l96: eps must be positive");
        }
        for v in [self.forcing, self.fast_advect, self.h_x, self.h_y] {
            if !v.is_finite() {
                return invalid("l96: non-finite coefficient");
            }
        }
        validate_obs(&self.obs_indices, &self.r_obs, self.n_slow)
    }
}

pub(crate) fn validate_obs(indices: &[usize], r_obs: &DMatrix<f64>, n: usize) -> Result<()> {
    if indices.is_empty() || indices.len() > n {
        return invalid("l96: observation count must be in 1..=N");
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) || indices.iter().any(|&i| i >= n) {
        return invalid("l96: observation indices must be strictly increasing and below N");
    }
    if r_obs.shape() != (indices.len(), indices.len()) {
        return invalid("l96: R must be M x M");
    }
    check_psd(r_obs, "l96 R")?;
    if r_obs.clone().cholesky().is_none() {
        return invalid("l96: R must be positive definite");
    }
    Ok(())
}

/// One-layer model augmented with linear damping `α` and additive noise `Q = σσᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedL96Params {
    pub alpha: f64,
    pub q_matrix: DMatrix<f64>,
    pub beta_matrix: DMatrix<f64>,
}

impl ReducedL96Params {
    pub fn deterministic(n: usize, alpha: f64) -> Self {
        Self { alpha, q_matrix: DMatrix::zeros(n, n), beta_matrix: DMatrix::zeros(n, n) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return invalid("reduced l96: alpha must be finite");
        }
        check_psd(&self.q_matrix, "reduced l96 Q")?;
        if self.beta_matrix.shape() != self.q_matrix.shape() {
            return invalid("reduced l96: beta and Q shapes differ");
        }
        if self.beta_matrix.iter().any(|&b| b != 0.0) {
            return invalid("reduced l96: multiplicative noise is not supported");
        }
        Ok(())
    }
}

/// AR(1) amplitude convention for the cubic residual model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ar1Convention {
    /// `e ← φe + σ̂(1 − φ²) z`.
    #[default]
    PaperLiteral,
    /// `e ← φe + σ̂ √(1 − φ²) z`, stationary variance σ̂².
    Stationary,
}

impl Ar1Convention {
    pub fn amplitude_factor(self, phi: f64) -> f64 {
        match self {
            Self::PaperLiteral => 1.0 - phi * phi,
            Self::Stationary => (1.0 - phi * phi).sqrt(),
        }
    }
}

/// Closure `−(b0 + b1 x + b2 x² + b3 x³ + e)` with AR(1) residual `e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicAr1Params {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub phi: f64,
    pub sigma_hat: f64,
}

impl CubicAr1Params {
    /// Linear damping with white residual, the two-parameter form.
    pub fn linear(b1: f64, sigma_hat: f64) -> Self {
        Self { b0: 0.0, b1, b2: 0.0, b3: 0.0, phi: 0.0, sigma_hat }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return invalid(format!("cubic+ar1: |phi| must be below 1, got {}", self.phi));
        }
        if !(self.sigma_hat >= 0.0) {
            return invalid("cubic+ar1: sigma_hat must be nonnegative");
        }
        Ok(())
    }

    pub fn bias(&self, x: f64) -> f64 {
        self.b0 + x * (self.b1 + x * (self.b2 + x * self.b3))
    }
}

#[inline]
fn cyc(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// `dx_i/dt = x_{i−1}(x_{i+1} − x_{i−2}) − (1 + α) x_i + F`.
pub fn one_layer_tendency(forcing: f64, alpha: f64, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ii = i as isize;
        out[i] = x[cyc(ii - 1, n)] * (x[cyc(ii + 1, n)] - x[cyc(ii - 2, n)]) - (1.0 + alpha) * x[i]
            + forcing;
    }
}

/// Tendency of the two-layer model on the packed state `[x; y]`.
pub fn two_layer_tendency(p: &L96Params, s: &[f64], out: &mut [f64]) {
    let n = p.n_slow;
    let j = p.n_fast_per_slow;
    let nf = n * j;
    let (x, y) = s.split_at(n);
    let (ox, oy) = out.split_at_mut(n);
    for i in 0..n {
        let ii = i as isize;
        let block: f64 = y[i * j..(i + 1) * j].iter().sum();
        ox[i] = x[cyc(ii - 1, n)] * (x[cyc(ii + 1, n)] - x[cyc(ii - 2, n)]) - x[i]
            + p.forcing
            + p.h_x * block;
    }
    let inv_eps = 1.0 / p.eps;
    for k in 0..nf {
        let kk = k as isize;
        let adv = p.fast_advect * y[cyc(kk + 1, nf)] * (y[cyc(kk - 1, nf)] - y[cyc(kk + 2, nf)]);
        oy[k] = inv_eps * (adv - y[k] + p.h_y * x[k / j]);
    }
}

/// Scratch space for [`rk4_step`].
#[derive(Debug, Clone)]
pub struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }
}

/// Classical RK4 step in place for the autonomous field `f`.
pub fn rk4_step<F: FnMut(&[f64], &mut [f64])>(mut f: F, x: &mut [f64], dt: f64, w: &mut Rk4Work) {
    let n = x.len();
    let [k1, k2, k3, k4] = &mut w.k;
    let tmp = &mut w.tmp;
    f(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(tmp, k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step, detail: "non-finite Lorenz-96 state".into() });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TwoLayerRun {
    /// Slow variables at every `stride`-th step.
    pub slow: Trajectory,
    pub final_state: DVector<f64>,
}

/// RK4 on the two-layer model recording only the slow layer.
pub fn integrate_two_layer(
    p: &L96Params,
    state0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stride: usize,
) -> Result<TwoLayerRun> {
    p.validate()?;
    if state0.len() != p.n_total() {
        return invalid("two-layer initial state has the wrong length");
    }
    if stride == 0 || !(dt > 0.0) {
        return invalid("two-layer integration: stride and dt must be positive");
    }
    let n = p.n_slow;
    let mut s = state0.as_slice().to_vec();
    check_finite(&s, 0)?;
    let mut w = Rk4Work::new(s.len());
    let mut times = vec![0.0];
    let mut states = vec![DVector::from_column_slice(&s[..n])];
    for k in 1..=n_steps {
        rk4_step(|a, b| two_layer_tendency(p, a, b), &mut s, dt, &mut w);
        if k % stride == 0 {
            check_finite(&s, k)?;
            times.push(k as f64 * dt);
            states.push(DVector::from_column_slice(&s[..n]));
        }
    }
    check_finite(&s, n_steps)?;
    Ok(TwoLayerRun {
        slow: Trajectory { times, states, seed: None },
        final_state: DVector::from_vec(s),
    })
}

/// Model selector for [`integrate_l96_rk4`].
#[derive(Debug, Clone, Copy)]
pub enum L96Model<'a> {
    TwoLayer(&'a L96Params),
    Reduced { forcing: f64, params: &'a ReducedL96Params },
}

/// RK4 integration recording the full state every `stride` steps.
///
/// For the reduced model, one Gaussian increment `σ z / √dt` is drawn per step and held
/// fixed across the four stages, so the step adds `σ √dt z` to first order.
pub fn integrate_l96_rk4(
    model: L96Model<'_>,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stride: usize,
    seed: Option<u64>,
) -> Result<Trajectory> {
    if stride == 0 || !(dt > 0.0) {
        return invalid("l96 integration: stride and dt must be positive");
    }
    let mut x = x0.as_slice().to_vec();
    check_finite(&x, 0)?;
    let mut w = Rk4Work::new(x.len());
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    match model {
        L96Model::TwoLayer(p) => {
            p.validate()?;
            if x.len() != p.n_total() {
                return invalid("two-layer initial state has the wrong length");
            }
            for k in 1..=n_steps {
                rk4_step(|a, b| two_layer_tendency(p, a, b), &mut x, dt, &mut w);
                if k % stride == 0 {
                    check_finite(&x, k)?;
                    times.push(k as f64 * dt);
                    states.push(DVector::from_column_slice(&x));
                }
            }
        }
        L96Model::Reduced { forcing, params } => {
            params.validate()?;
            let n = x.len();
            if n < 4 || params.q_matrix.nrows() != n {
                return invalid("reduced l96: state and Q dimensions differ or N < 4");
            }
            let noisy = params.q_matrix.iter().any(|&v| v != 0.0);
            let sigma = noise_factor(&params.q_matrix);
            let mut rng = rng::stream(seed.unwrap_or(0), "l96-reduced-noise");
            let mut xi = vec![0.0; n];
            let scale = 1.0 / dt.sqrt();
            for k in 1..=n_steps {
                if noisy {
                    let z = DVector::from_fn(n, |_, _| rng::normal(&mut rng));
                    let f = &sigma * z;
                    for i in 0..n {
                        xi[i] = f[i] * scale;
                    }
                }
                rk4_step(
                    |a, b| {
                        one_layer_tendency(forcing, params.alpha, a, b);
                        for i in 0..n {
                            b[i] += xi[i];
                        }
                    },
                    &mut x,
                    dt,
                    &mut w,
                );
                if k % stride == 0 {
                    check_finite(&x, k)?;
                    times.push(k as f64 * dt);
                    states.push(DVector::from_column_slice(&x));
                }
            }
        }
    }
    Ok(Trajectory { times, states, seed })
}

/// One-layer model with the cubic closure and an AR(1) residual held fixed over each step.
#[allow(clippy::too_many_arguments)]
pub fn integrate_cubic_ar1(
    cp: &CubicAr1Params,
    convention: Ar1Convention,
    forcing: f64,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stride: usize,
    seed: u64,
) -> Result<Trajectory> {
    cp.validate()?;
    if stride == 0 || !(dt > 0.0) || x0.len() < 4 {
        return invalid("cubic+ar1 integration: bad step, stride or dimension");
    }
    let n = x0.len();
    let mut x = x0.as_slice().to_vec();
    check_finite(&x, 0)?;
    let mut e = vec![0.0; n];
    let mut rng = rng::stream(seed, "cubic-ar1-noise");
    let amp = cp.sigma_hat * convention.amplitude_factor(cp.phi);
    let mut w = Rk4Work::new(n);
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    for k in 1..=n_steps {
        for ei in e.iter_mut() {
            *ei = cp.phi * *ei + amp * rng::normal(&mut rng);
        }
        rk4_step(
            |a, b| {
                one_layer_tendency(forcing, 0.0, a, b);
                for i in 0..n {
                    b[i] -= cp.bias(a[i]) + e[i];
                }
            },
            &mut x,
            dt,
            &mut w,
        );
        if k % stride == 0 {
            check_finite(&x, k)?;
            times.push(k as f64 * dt);
            states.push(DVector::from_column_slice(&x));
        }
    }
    Ok(Trajectory { times, states, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncoupled_slow_layer_matches_one_layer() {
        let mut p = L96Params::sweep_regime(0.5);
        p.h_x = 0.0;
        let mut s0 = DVector::zeros(p.n_total());
        for i in 0..p.n_total() {
            s0[i] = ((i * 7 % 11) as f64 - 5.0) * 0.3;
        }
        let run = integrate_two_layer(&p, &s0, 0.001, 500, 500).unwrap();
        let x0 = DVector::from_column_slice(&s0.as_slice()[..p.n_slow]);
        let rp = ReducedL96Params::deterministic(p.n_slow, 0.0);
        let one = integrate_l96_rk4(
            L96Model::Reduced { forcing: p.forcing, params: &rp },
            &x0,
            0.001,
            500,
            500,
            None,
        )
        .unwrap();
        assert_eq!(run.slow.states[1], one.states[1]);
    }

    #[test]
    fn fixed_point_of_one_layer() {
        let x = vec![10.0; 6];
        let mut out = vec![0.0; 6];
        one_layer_tendency(10.0, 0.0, &x, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn multiplicative_noise_rejected() {
        let mut rp = ReducedL96Params::deterministic(4, 0.0);
        rp.beta_matrix[(0, 0)] = 0.1;
        assert!(rp.validate().is_err());
    }

    #[test]
    fn paper_literal_amplitude() {
        assert!((Ar1Convention::PaperLiteral.amplitude_factor(0.5) - 0.75).abs() < 1e-15);
        assert!((Ar1Convention::Stationary.amplitude_factor(0.6) - 0.8).abs() < 1e-15);
    }
}
