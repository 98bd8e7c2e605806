//! Gaussian-closure moment filters for the stochastically forced complex mode.
//!
//! Complex parameters follow one convention throughout: the mean equation keeps the full
//! complex coefficient, while every variance rate uses real parts, since rotation moves no
//! energy between `|u|` levels.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{consistency, ConsistencyInput};
use crate::error::{invalid, Error, Result};
use crate::models::{
    check_em_step, em_step, generate_observations, integrate_sde_em_strided, ObservationSeries,
    ReducedSpekfParams, Sde, SpekfParams, SPEKF_DIM,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemeTag {
    /// `σ₂ = β = 0`.
    Rsf,
    /// White-noise additive correction, `β = 0`.
    Rsfa,
    /// White-noise additive and multiplicative corrections.
    Rsfc,
    /// Corrections with the `ελᵤ` shift in both denominators.
    Rspekf,
}

impl SchemeTag {
    pub const ALL: [SchemeTag; 4] = [Self::Rsf, Self::Rsfa, Self::Rsfc, Self::Rspekf];

    pub fn label(self) -> &'static str {
        match self {
            Self::Rsf => "RSF",
            Self::Rsfa => "RSFA",
            Self::Rsfc => "RSFC",
            Self::Rspekf => "RSPEKF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label().eq_ignore_ascii_case(s))
    }
}

/// Reduced-model parameters for one scheme.
pub fn reduced_params(sp: &SpekfParams, scheme: SchemeTag) -> Result<ReducedSpekfParams> {
    sp.validate()?;
    let eps = sp.eps;
    let lu = sp.lambda_u.re;
    let lb = sp.lambda_b.re;
    let lg = sp.lambda_gamma;
    let (sb2, sg2) = (sp.sigma_b.powi(2), sp.sigma_gamma.powi(2));
    let (sigma2_sq, beta_sq) = match scheme {
        SchemeTag::Rsf => (0.0, 0.0),
        SchemeTag::Rsfa => (eps * sb2 / (lb * lb), 0.0),
        SchemeTag::Rsfc => (eps * sb2 / (lb * lb), eps * sg2 / (lg * lg)),
        SchemeTag::Rspekf => (eps * sb2 / (lb * (lb + eps * lu)), eps * sg2 / (lg * (lg + eps * lu))),
    };
    if !(sigma2_sq >= 0.0 && beta_sq >= 0.0) {
        return invalid("reduced spekf rates came out negative");
    }
    let rp = ReducedSpekfParams {
        alpha: sp.lambda_u,
        beta_sq,
        sigma1_sq: sp.sigma_u.powi(2),
        sigma2_sq,
    };
    rp.validate()?;
    Ok(rp)
}

/// Growth exponent of the prior variance, `−2Re(α) + 2β²`. Negative means bounded.
pub fn stability_exponents(sp: &SpekfParams, scheme: SchemeTag) -> Result<f64> {
    Ok(reduced_exponent(&reduced_params(sp, scheme)?))
}

pub fn reduced_exponent(rp: &ReducedSpekfParams) -> f64 {
    -2.0 * rp.alpha.re + 2.0 * rp.beta_sq
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mean: Complex64,
    /// `E|u − û|²`, summed over both real components.
    pub var: f64,
}

impl MomentState {
    pub fn validate(&self) -> Result<()> {
        if !self.mean.re.is_finite() || !self.mean.im.is_finite() || !(self.var > 0.0) || !self.var.is_finite() {
            return invalid("moment state needs a finite mean and a positive finite variance");
        }
        Ok(())
    }
}

/// The closed two-moment system `dû = −c û dt + ..`, `dS/dt = −k S + p|û|² + q − ..`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentModel {
    pub mean_coeff: Complex64,
    pub var_damping: f64,
    pub pump: f64,
    pub additive: f64,
}

impl MomentModel {
    pub fn reduced(rp: &ReducedSpekfParams) -> Result<Self> {
        rp.validate()?;
        Ok(Self {
            mean_coeff: rp.ito_alpha(),
            var_damping: 2.0 * (rp.alpha.re - rp.beta_sq),
            pump: rp.beta_sq,
            additive: rp.additive_sq(),
        })
    }

    /// Moment equations of the full system for `u`, with the complex `λᵤ` kept in the mean
    /// correction's denominator.
    pub fn spekf(sp: &SpekfParams) -> Result<Self> {
        let rp = reduced_params(sp, SchemeTag::Rspekf)?;
        let e = sp.eps;
        let lg = sp.lambda_gamma;
        let mean_shift = e * sp.sigma_gamma.powi(2) / (2.0 * lg * (sp.lambda_u * e + lg));
        Ok(Self {
            mean_coeff: sp.lambda_u - mean_shift,
            var_damping: 2.0 * (rp.alpha.re - rp.beta_sq),
            pump: rp.beta_sq,
            additive: rp.additive_sq(),
        })
    }

    /// Right-hand side with an optional continuous observation `(z, R_c)`.
    fn rhs(&self, m: Complex64, s: f64, obs: Option<(Complex64, f64)>) -> (Complex64, f64) {
        let mut dm = -self.mean_coeff * m;
        let mut ds = -self.var_damping * s + self.pump * m.norm_sqr() + self.additive;
        if let Some((z, rc)) = obs {
            dm += (s / rc) * (z - m);
            ds -= s * s / rc;
        }
        (dm, ds)
    }

    /// Classical RK4 over `n` sub-steps of `h`; negative variances are clipped to zero.
    fn advance(&self, st: &mut MomentState, h: f64, n: usize, obs: Option<(Complex64, f64)>) -> usize {
        let mut clipped = 0;
        for _ in 0..n {
            let (m, s) = (st.mean, st.var);
            let (k1m, k1s) = self.rhs(m, s, obs);
            let (k2m, k2s) = self.rhs(m + k1m * (0.5 * h), s + 0.5 * h * k1s, obs);
            let (k3m, k3s) = self.rhs(m + k2m * (0.5 * h), s + 0.5 * h * k2s, obs);
            let (k4m, k4s) = self.rhs(m + k3m * h, s + h * k3s, obs);
            st.mean = m + (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
            st.var = s + h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
            if st.var < 0.0 {
                st.var = 0.0;
                clipped += 1;
            }
        }
        clipped
    }

    /// Equilibrium prior variance when the multiplicative term is absent.
    pub fn linear_fixed_point(&self) -> Option<f64> {
        (self.pump == 0.0 && self.var_damping > 0.0).then(|| self.additive / self.var_damping)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Kalman–Bucy form with each sample held over its interval, `R_c = R·Δt`.
    Continuous,
    /// Prior moment propagation between observations, Kalman update at each one.
    Discrete,
}

/// RK4 sub-steps per observation interval.
pub const MOMENT_SUBSTEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct MomentFilterRun {
    pub times: Vec<f64>,
    /// Forecast moments just before each observation.
    pub prior: Vec<MomentState>,
    pub posterior: Vec<MomentState>,
    /// Sub-steps at which the variance was clipped at zero.
    pub clipped: usize,
}

impl MomentFilterRun {
    /// RMSE `√⟨|u − û|²⟩` and consistency in the two-dimensional real embedding, over
    /// cycles `burn_in..`.
    pub fn scores(&self, truth: &[Complex64], burn_in: usize) -> Result<SpekfScores> {
        if truth.len() != self.posterior.len() || burn_in >= truth.len() {
            return invalid("moment filter scores: truth length mismatch or burn-in too long");
        }
        let post = &self.posterior[burn_in..];
        let tr = &truth[burn_in..];
        let mse = tr.iter().zip(post).map(|(x, p)| (x - p.mean).norm_sqr()).sum::<f64>() / tr.len() as f64;
        let embed = |c: Complex64| DVector::from_vec(vec![c.re, c.im]);
        let xs: Vec<_> = tr.iter().map(|&c| embed(c)).collect();
        let ms: Vec<_> = post.iter().map(|p| embed(p.mean)).collect();
        let cs: Vec<_> = post.iter().map(|p| DMatrix::identity(2, 2) * (p.var / 2.0)).collect();
        let c = consistency(&ConsistencyInput { truth: &xs, means: &ms, covs: &cs })?;
        let mean_var = post.iter().map(|p| p.var).sum::<f64>() / post.len() as f64;
        Ok(SpekfScores { rmse: mse.sqrt(), consistency: c.value, mean_var })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpekfScores {
    pub rmse: f64,
    pub consistency: f64,
    pub mean_var: f64,
}

/// Complex observations `z = u + v` from a series observing the real and imaginary parts
/// with equal independent noise. Returns the samples and the total noise variance `R`.
pub fn complex_observations(obs: &ObservationSeries) -> Result<(Vec<Complex64>, f64)> {
    if obs.obs_indices.len() != 2 || obs.r_obs.shape() != (2, 2) {
        return invalid("complex observations need exactly two observed components");
    }
    let r = &obs.r_obs;
    if r[(0, 1)] != 0.0 || r[(1, 0)] != 0.0 || (r[(0, 0)] - r[(1, 1)]).abs() > 1e-12 * r[(0, 0)] {
        return invalid("complex observation noise must be isotropic across components");
    }
    let total = 2.0 * r[(0, 0)];
    if !(total > 0.0) {
        return invalid("complex observation noise must be positive");
    }
    Ok((obs.values.iter().map(|v| Complex64::new(v[0], v[1])).collect(), total))
}

pub fn run_moment_filter(
    model: &MomentModel,
    obs: &ObservationSeries,
    mode: FilterMode,
    init: MomentState,
) -> Result<MomentFilterRun> {
    init.validate()?;
    let (zs, r) = complex_observations(obs)?;
    let dt_obs = obs.interval();
    if !(dt_obs > 0.0) {
        return invalid("moment filter needs at least two uniformly spaced observations");
    }
    let h = dt_obs / MOMENT_SUBSTEPS as f64;
    let mut st = init;
    let mut run = MomentFilterRun {
        times: obs.times.clone(),
        prior: Vec::with_capacity(zs.len()),
        posterior: Vec::with_capacity(zs.len()),
        clipped: 0,
    };
    for (k, &z) in zs.iter().enumerate() {
        match mode {
            FilterMode::Discrete => {
                run.clipped += model.advance(&mut st, h, MOMENT_SUBSTEPS, None);
                run.prior.push(st);
                let gain = st.var / (st.var + r);
                st.mean += (z - st.mean) * gain;
                st.var *= 1.0 - gain;
            }
            FilterMode::Continuous => {
                run.prior.push(st);
                run.clipped += model.advance(&mut st, h, MOMENT_SUBSTEPS, Some((z, r * dt_obs)));
            }
        }
        if !st.var.is_finite() || !st.mean.re.is_finite() || !st.mean.im.is_finite() {
            return Err(Error::Divergence { step: k, detail: format!("posterior variance {}", st.var) });
        }
        run.posterior.push(st);
    }
    Ok(run)
}

pub fn spekf_moment_filter(
    sp: &SpekfParams,
    obs: &ObservationSeries,
    mode: FilterMode,
    init: MomentState,
) -> Result<MomentFilterRun> {
    run_moment_filter(&MomentModel::spekf(sp)?, obs, mode, init)
}

pub fn rspekf_moment_filter(
    rp: &ReducedSpekfParams,
    obs: &ObservationSeries,
    mode: FilterMode,
    init: MomentState,
) -> Result<MomentFilterRun> {
    run_moment_filter(&MomentModel::reduced(rp)?, obs, mode, init)
}

/// Independent Gaussian initial law for `(u, b, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductGaussianInit {
    pub u_mean: Complex64,
    pub u_var: f64,
    pub b_var: f64,
    pub gamma_var: f64,
}

impl ProductGaussianInit {
    /// Product of the marginal equilibrium Gaussians of the uncoupled components.
    pub fn equilibrium(sp: &SpekfParams) -> Self {
        let (u, b, g) = sp.equilibrium_gaussian_vars();
        Self { u_mean: Complex64::new(0.0, 0.0), u_var: u, b_var: b, gamma_var: g }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.u_var, self.b_var, self.gamma_var] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid("initial variances must be finite and nonnegative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PriorVarianceSeries {
    pub times: Vec<f64>,
    pub var: Vec<f64>,
    pub exponent: f64,
    /// The variance grows without bound.
    pub unstable: bool,
}

/// Prior variance of the reduced model from the product initial law, recorded at
/// `n_out + 1` equally spaced times on `[0, horizon]`.
pub fn reduced_prior_variance(
    rp: &ReducedSpekfParams,
    init: &ProductGaussianInit,
    horizon: f64,
    n_out: usize,
) -> Result<PriorVarianceSeries> {
    init.validate()?;
    if !(horizon > 0.0) || n_out == 0 {
        return invalid("prior variance needs a positive horizon and at least one output");
    }
    let model = MomentModel::reduced(rp)?;
    let mut st = MomentState { mean: init.u_mean, var: init.u_var };
    let h_out = horizon / n_out as f64;
    let sub = ((h_out / 1e-3).ceil() as usize).max(MOMENT_SUBSTEPS);
    let mut times = vec![0.0];
    let mut var = vec![st.var];
    for k in 1..=n_out {
        model.advance(&mut st, h_out / sub as f64, sub, None);
        times.push(k as f64 * h_out);
        var.push(st.var);
    }
    let exponent = reduced_exponent(rp);
    Ok(PriorVarianceSeries { times, var, exponent, unstable: exponent > 0.0 })
}

pub fn prior_variance_evolution(
    sp: &SpekfParams,
    scheme: SchemeTag,
    init: &ProductGaussianInit,
    horizon: f64,
    n_out: usize,
) -> Result<PriorVarianceSeries> {
    reduced_prior_variance(&reduced_params(sp, scheme)?, init, horizon, n_out)
}

#[derive(Debug, Clone)]
pub struct VarianceBand {
    pub times: Vec<f64>,
    /// `E|u − ū|²`.
    pub var: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub const MIN_MC_SAMPLES: usize = 10_000;
const MC_CHUNK: usize = 1_000;

/// Monte-Carlo variance of `u` for the full system by Euler–Maruyama ensembles. Samples are
/// split into fixed chunks with their own streams, so results do not depend on the thread
/// count.
pub fn mc_variance_oracle(
    sp: &SpekfParams,
    init: &ProductGaussianInit,
    horizon: f64,
    n_out: usize,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceBand> {
    sp.validate()?;
    init.validate()?;
    if n_samples < MIN_MC_SAMPLES {
        return invalid(format!("variance oracle needs at least {MIN_MC_SAMPLES} samples"));
    }
    check_em_step(sp, dt)?;
    if !(horizon > 0.0) || n_out == 0 {
        return invalid("variance oracle needs a positive horizon and at least one output");
    }
    let per_out = (horizon / n_out as f64 / dt).round() as usize;
    if per_out == 0 || ((per_out * n_out) as f64 * dt - horizon).abs() > 1e-9 * horizon {
        return invalid("horizon / n_out must be a multiple of the Euler-Maruyama step");
    }
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let n_rec = n_out + 1;

    // Per output time: Σ Re u, Σ Im u, Σ |u|², Σ |u|⁴.
    let sums: Vec<Vec<[f64; 4]>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> std::result::Result<Vec<[f64; 4]>, Error> {
            let mut rng = rng::indexed_stream(seed, "mc-variance", c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut acc = vec![[0.0; 4]; n_rec];
            let mut x = [0.0; SPEKF_DIM];
            let mut work = vec![0.0; sp.dim() + sp.noise_dim()];
            let (su, sb, sg) = ((init.u_var / 2.0).sqrt(), (init.b_var / 2.0).sqrt(), init.gamma_var.sqrt());
            for _ in 0..count {
                x[0] = init.u_mean.re + su * rng::normal(&mut rng);
                x[1] = init.u_mean.im + su * rng::normal(&mut rng);
                x[2] = sb * rng::normal(&mut rng);
                x[3] = sb * rng::normal(&mut rng);
                x[4] = sg * rng::normal(&mut rng);
                for (k, a) in acc.iter_mut().enumerate() {
                    if k > 0 {
                        for _ in 0..per_out {
                            em_step(sp, &mut x, dt, &mut rng, &mut work);
                        }
                    }
                    let m2 = x[0] * x[0] + x[1] * x[1];
                    if !m2.is_finite() {
                        return Err(Error::Divergence { step: k * per_out, detail: "sample blew up".into() });
                    }
                    a[0] += x[0];
                    a[1] += x[1];
                    a[2] += m2;
                    a[3] += m2 * m2;
                }
            }
            Ok(acc)
        })
        .collect::<std::result::Result<_, _>>()?;

    let n = n_samples as f64;
    let mut var = Vec::with_capacity(n_rec);
    let mut stderr = Vec::with_capacity(n_rec);
    for k in 0..n_rec {
        let mut t = [0.0; 4];
        for chunk in &sums {
            for j in 0..4 {
                t[j] += chunk[k][j];
            }
        }
        let mean_sq = (t[0] / n).powi(2) + (t[1] / n).powi(2);
        let m2 = t[2] / n;
        var.push(m2 - mean_sq);
        stderr.push(((t[3] / n - m2 * m2).max(0.0) / n).sqrt());
    }
    let times = (0..n_rec).map(|k| (k * per_out) as f64 * dt).collect();
    Ok(VarianceBand { times, var, stderr })
}

/// A truth run of the full system with complex observations of `u`.
#[derive(Debug, Clone)]
pub struct SpekfTwin {
    pub truth_u: Vec<Complex64>,
    pub obs: ObservationSeries,
}

/// Integrates the full system from its product equilibrium draw and observes `u` every
/// `dt_obs` with total noise variance `sp.r_obs`.
pub fn spekf_twin(sp: &SpekfParams, dt_obs: f64, cycles: usize, dt_model: f64, seed: u64) -> Result<SpekfTwin> {
    sp.validate()?;
    let stride = (dt_obs / dt_model).round() as usize;
    if stride == 0 || ((stride as f64) * dt_model - dt_obs).abs() > 1e-9 * dt_obs {
        return invalid("observation interval must be a multiple of the model step");
    }
    let init = ProductGaussianInit::equilibrium(sp);
    let mut r0 = rng::stream(seed, "spekf-initial");
    let x0 = DVector::from_vec(vec![
        (init.u_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.u_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.b_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.b_var / 2.0).sqrt() * rng::normal(&mut r0),
        init.gamma_var.sqrt() * rng::normal(&mut r0),
    ]);
    let traj = integrate_sde_em_strided(sp, &x0, dt_model, cycles * stride, stride, seed)?;
    let r = DMatrix::identity(2, 2) * (sp.r_obs / 2.0);
    let obs = generate_observations(&traj, &[0, 1], &r, 1, seed)?;
    let truth_u = traj.states[1..].iter().map(|s| Complex64::new(s[0], s[1])).collect();
    Ok(SpekfTwin { truth_u, obs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> SpekfParams {
        SpekfParams {
            lambda_u: Complex64::new(1.0, 0.0),
            lambda_b: Complex64::new(1.0, 0.0),
            lambda_gamma: 1.0,
            sigma_u: 1.0,
            sigma_b: 2f64.sqrt(),
            sigma_gamma: 2f64.sqrt(),
            eps: 0.5,
            r_obs: 1.0,
        }
    }

    #[test]
    fn substitution_example() {
        let sp = unit_params();
        let r = reduced_params(&sp, SchemeTag::Rspekf).unwrap();
        assert!((r.sigma2_sq - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.beta_sq - 2.0 / 3.0).abs() < 1e-15);
        let c = reduced_params(&sp, SchemeTag::Rsfc).unwrap();
        assert!((c.sigma2_sq - 1.0).abs() < 1e-15);
        assert!((c.beta_sq - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regime2_exponents() {
        let sp = SpekfParams::regime2();
        assert!((stability_exponents(&sp, SchemeTag::Rsfc).unwrap() - 0.9).abs() < 1e-12);
        let x = stability_exponents(&sp, SchemeTag::Rspekf).unwrap();
        assert!((x - (-1.1 + 0.5 / 0.525)).abs() < 1e-12);
        assert!(stability_exponents(&sp, SchemeTag::Rsf).unwrap() < 0.0);
    }

    #[test]
    fn scheme_labels_roundtrip() {
        for s in SchemeTag::ALL {
            assert_eq!(SchemeTag::parse(s.label()), Some(s));
        }
        assert_eq!(SchemeTag::parse("rspekf"), Some(SchemeTag::Rspekf));
        assert!(SchemeTag::parse("gcf").is_none());
    }

    #[test]
    fn beta_zero_prior_reaches_fixed_point() {
        let sp = SpekfParams::regime1();
        let rp = reduced_params(&sp, SchemeTag::Rsfa).unwrap();
        let init = ProductGaussianInit::equilibrium(&sp);
        let s = reduced_prior_variance(&rp, &init, 20.0, 20).unwrap();
        let fp = MomentModel::reduced(&rp).unwrap().linear_fixed_point().unwrap();
        assert!((s.var.last().unwrap() - fp).abs() < 1e-3 * fp);
        assert!(!s.unstable);
    }
}
