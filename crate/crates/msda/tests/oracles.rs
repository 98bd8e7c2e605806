//! Independent oracles and property tests for the numerical kernels.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

use msda::enkf::{
    circulant_from, cyclic_basis, cyclic_forward_map, cyclic_q_fit, estimate_linearizations, etkf_analysis,
    update_noise_running, Ensemble, NoiseEstimatorState, QParameterization,
};
use msda::linalg::{lyapunov_continuous, pinv};
use msda::linear_theory::{
    equilibrium_stats_linear, msm_fit, optimal_reduced_params, solve_care, solve_riccati_reduced, EquilibriumMode,
};
use msda::models::{LinearTwoScaleParams, ReducedSpekfParams};
use msda::offline_fit::{fit_cubic, ModelErrorSeries};
use msda::rng;
use msda::spekf_filters::{reduced_prior_variance, ProductGaussianInit};

fn matrix(rows: usize, cols: usize, seed: u64, label: &str) -> DMatrix<f64> {
    let mut g = rng::stream(seed, label);
    DMatrix::from_fn(rows, cols, |_, _| rng::normal(&mut g))
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.column_mean();
    let mut out = x.clone();
    for mut c in out.column_iter_mut() {
        c -= &mean;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// With no additive inflation the ETKF mean and covariance equal the Kalman update of
    /// the forecast sample moments.
    #[test]
    fn etkf_equals_kalman_on_sample_moments(seed in 0u64..10_000, e in 6usize..14, r in 0.1f64..3.0) {
        let (n, m) = (3, 2);
        let members = matrix(n, e, seed, "members");
        let h = DMatrix::from_row_slice(m, n, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let rm = DMatrix::identity(m, m) * r;
        let z = matrix(m, 1, seed, "z").column(0).into_owned();
        let fc = Ensemble::new(members.clone(), 0.0).unwrap();
        let an = etkf_analysis(&fc, &z, &h, &rm, &DMatrix::zeros(n, n)).unwrap();

        let mean = members.column_mean();
        let x = centered(&members);
        let p = &x * x.transpose() / (e as f64 - 1.0);
        let s = &h * &p * h.transpose() + &rm;
        let k = &p * h.transpose() * s.clone().try_inverse().unwrap();
        let mean_a = &mean + &k * (&z - &h * &mean);
        let p_a = (DMatrix::identity(n, n) - &k * &h) * &p;

        prop_assert!((an.analysis.mean() - mean_a).amax() < 1e-10);
        prop_assert!((an.analysis.covariance() - p_a).amax() < 1e-10);
    }

    /// Exactly linear dynamics with more members than states: `F` is the dynamics matrix.
    #[test]
    fn linearization_recovers_linear_map(seed in 0u64..10_000, n in 2usize..6) {
        let e = n + 4;
        let mmat = matrix(n, n, seed, "m");
        let xa = centered(&matrix(n, e, seed, "xa"));
        let xf = &mmat * &xa;
        let sel: Vec<usize> = (0..n).step_by(2).collect();
        let h_true = DMatrix::from_fn(sel.len(), n, |i, j| if sel[i] == j { 1.0 } else { 0.0 });
        let zf = &h_true * &xf;
        let (f, h) = estimate_linearizations(&xa, &xf, &xf, &zf).unwrap();
        prop_assert!((f - mmat).amax() < 1e-8);
        prop_assert!((h - h_true).amax() < 1e-8);
    }

    /// Cyclic fit after the cyclic forward map is the identity on circulant covariances.
    #[test]
    fn cyclic_fit_inverts_forward_map(q0 in 0.1f64..2.0, q1 in -0.5f64..0.5, q2 in -0.3f64..0.3, q3 in -0.2f64..0.2, seed in 0u64..1000) {
        let q = [q0, q1, q2, q3];
        let basis = cyclic_basis(8);
        let qm = circulant_from(&q, &basis);
        let f = DMatrix::identity(8, 8) + matrix(8, 8, seed, "f") * 0.2;
        let h = DMatrix::from_fn(4, 8, |i, j| if j == 2 * i { 1.0 } else { 0.0 });
        let a = cyclic_forward_map(&f, &h, &h, &basis);
        let c = &h * &f * &qm * h.transpose();
        prop_assert!((&a * DVector::from_column_slice(&q) - DVector::from_column_slice(c.as_slice())).amax() < 1e-12);
        let (est, q_est) = cyclic_q_fit(&c, &f, &h, &h, &basis).unwrap();
        for (a, b) in est.iter().zip(q) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        prop_assert!((q_est - qm).amax() < 1e-8);
    }

    /// A constant estimate stream pulls the running average in geometrically:
    /// `Q_k − Q* = (1 − 1/τ)^k (Q_0 − Q*)`.
    #[test]
    fn running_average_decays_geometrically(tau in 1.0f64..200.0, k in 1usize..300, q0 in -2.0f64..2.0, qs in -2.0f64..2.0) {
        let mut st = NoiseEstimatorState::new(DMatrix::from_element(1, 1, q0), DMatrix::from_element(1, 1, 1.0), tau, &QParameterization::Full, false).unwrap();
        let target = DMatrix::from_element(1, 1, qs);
        for _ in 0..k {
            update_noise_running(&mut st, &target, &target);
        }
        let want = qs + (1.0 - 1.0 / tau).powi(k as i32) * (q0 - qs);
        prop_assert!((st.q_est[(0, 0)] - want).abs() < 1e-10 * (1.0 + want.abs()));
        prop_assert_eq!(st.r_est[(0, 0)], 1.0);
    }

    /// Scalar reduced Riccati root against the quadratic formula
    /// `s = R(a + √(a² + σ²/R))`.
    #[test]
    fn reduced_riccati_matches_quadratic(a in -5.0f64..-0.01, s2 in 0.01f64..10.0, r in 0.01f64..10.0) {
        let s = solve_riccati_reduced(a, s2, r).unwrap();
        let want = r * (a + (a * a + s2 / r).sqrt());
        prop_assert!((s - want).abs() < 1e-9 * want.max(1.0));
    }

    /// The Riccati residual vanishes at the returned root, which is symmetric and positive.
    #[test]
    fn care_residual_vanishes(seed in 0u64..10_000) {
        let a = matrix(2, 2, seed, "a") - DMatrix::identity(2, 2) * 3.0;
        let b = matrix(2, 2, seed, "b");
        let q = &b * b.transpose() + DMatrix::identity(2, 2) * 0.1;
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::from_element(1, 1, 0.7);
        let s = solve_care(&a, &q, &h, &r).unwrap();
        let res = &a * &s + &s * a.transpose() - &s * h.transpose() * &h * &s / 0.7 + &q;
        prop_assert!(res.amax() < 1e-8 * q.amax());
        prop_assert!((&s - s.transpose()).amax() < 1e-12);
        prop_assert!(s.clone().cholesky().is_some());
    }

    /// Continuous Lyapunov solution satisfies `AP + PAᵀ + Q = 0`.
    #[test]
    fn lyapunov_residual_vanishes(seed in 0u64..10_000, n in 1usize..5) {
        let a = matrix(n, n, seed, "a") * 0.3 - DMatrix::identity(n, n) * 2.0;
        let b = matrix(n, n, seed, "b");
        let q = &b * b.transpose();
        let p = lyapunov_continuous(&a, &q).unwrap();
        prop_assert!((&a * &p + &p * a.transpose() + &q).amax() < 1e-9 * (1.0 + q.amax()));
    }

    /// Moore-Penrose identities of the truncated pseudo-inverse on full-rank input.
    #[test]
    fn pinv_identities(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
        let m = matrix(rows, cols, seed, "m");
        let p = pinv(&m, 1e-8).unwrap();
        prop_assert!((&m * &p * &m - &m).amax() < 1e-9);
        prop_assert!((&p * &m * &p - &p).amax() < 1e-9);
    }

    /// Moment matching on the expanded slow statistics reproduces the optimal reduced
    /// parameters for every scale separation.
    #[test]
    fn msm_of_expanded_stats_is_optimal(k in 0i32..12) {
        let p = LinearTwoScaleParams::figure1(0.5f64.powi(k));
        let st = equilibrium_stats_linear(&p, EquilibriumMode::Expanded).unwrap();
        let m = msm_fit(st.c11, st.corr_time).unwrap();
        let o = optimal_reduced_params(&p).unwrap();
        prop_assert!(((m.a - o.a) / o.a).abs() < 1e-13);
        prop_assert!(((m.sigma_x_sq - o.sigma_x_sq) / o.sigma_x_sq).abs() < 1e-13);
    }

    /// Cubic regression is exact on noise-free cubic data.
    #[test]
    fn cubic_fit_roundtrip(b0 in -1.0f64..1.0, b1 in -1.0f64..1.0, b2 in -0.1f64..0.1, b3 in -0.01f64..0.01) {
        let x: Vec<f64> = (0..600).map(|k| -10.0 + k as f64 / 30.0).collect();
        let u: Vec<f64> = x.iter().map(|v| b0 + v * (b1 + v * (b2 + v * b3))).collect();
        let series = ModelErrorSeries { u_values: u, x_values: x, dt: 0.005, n_sites: 1 };
        let f = fit_cubic(&series).unwrap();
        for (c, want) in f.coeffs.iter().zip([b0, b1, b2, b3]) {
            prop_assert!((c - want).abs() < 1e-9);
        }
    }

    /// From a zero mean the reduced prior variance solves the linear ODE
    /// `dv/dt = −2(Re α − β²) v + σ²` in closed form.
    #[test]
    fn reduced_prior_variance_closed_form(re in 0.3f64..2.0, im in -2.0f64..2.0, beta_sq in 0.0f64..0.2, s1 in 0.01f64..1.0, s2 in 0.0f64..1.0, v0 in 0.0f64..3.0) {
        let rp = ReducedSpekfParams { alpha: Complex64::new(re, im), beta_sq, sigma1_sq: s1, sigma2_sq: s2 };
        let init = ProductGaussianInit { u_mean: Complex64::new(0.0, 0.0), u_var: v0, b_var: 0.0, gamma_var: 0.0 };
        let pv = reduced_prior_variance(&rp, &init, 2.0, 8).unwrap();
        let k = 2.0 * (re - beta_sq);
        let vinf = (s1 + s2) / k;
        for (t, v) in pv.times.iter().zip(&pv.var) {
            let want = vinf + (v0 - vinf) * (-k * t).exp();
            prop_assert!((v - want).abs() < 1e-9 * (1.0 + want));
        }
    }
}

/// With `F = I` and every other site observed, only even cyclic distances reach the
/// observations, so the odd coefficients are unobservable and the fit must refuse.
#[test]
fn cyclic_fit_refuses_unobservable_distances() {
    let q = [1.0, 0.3, 0.1, 0.0];
    let basis = cyclic_basis(8);
    let qm = circulant_from(&q, &basis);
    assert_eq!(qm[(0, 1)], 0.3);
    assert_eq!(qm[(0, 7)], 0.3);
    assert_eq!(qm[(0, 4)], 0.0);
    let h = DMatrix::from_fn(4, 8, |i, j| if j == 2 * i { 1.0 } else { 0.0 });
    let f = DMatrix::identity(8, 8);
    let c = &h * &f * &qm * h.transpose();
    assert!(matches!(cyclic_q_fit(&c, &f, &h, &h, &basis), Err(msda::Error::RankDeficient(_))));
}

#[test]
fn named_streams_replay_and_differ() {
    let draw = |seed, label| {
        let mut g = rng::stream(seed, label);
        (0..4).map(|_| rng::normal(&mut g)).collect::<Vec<_>>()
    };
    assert_eq!(draw(3, "a"), draw(3, "a"));
    assert_ne!(draw(3, "a"), draw(3, "b"));
    assert_ne!(draw(3, "a"), draw(4, "a"));
    assert_eq!(rng::derive_seed(3, "x"), rng::derive_seed(3, "x"));
    assert_ne!(rng::derive_seed(3, "x"), rng::derive_seed(3, "y"));
}

/// Truth from the one-layer model with white additive forcing: the adaptive filter recovers
/// `Q = σ²Δt I` and is consistent.
#[test]
fn adaptive_filter_on_white_noise_twin() {
    use msda::enkf::{run_adaptive_enkf, EnsembleForecast, EtkfConfig, L96Forecast, L96ForecastKind, NoiseSetting};
    let (n, dt, sigma, r) = (9, 0.01, 1.0, 0.1f64);
    let truth_model =
        L96Forecast { kind: L96ForecastKind::StochasticLinear { forcing: 10.0, sigma_hat: sigma }, n_slow: n, dt: dt / 10.0, steps: 10 };
    let mut g = rng::stream(1, "truth");
    let mut x: Vec<f64> = (0..n).map(|_| rng::normal(&mut g)).collect();
    for _ in 0..500 {
        truth_model.advance(&mut x, 0.0, &mut g);
    }
    let (mut truth, mut obs) = (Vec::new(), Vec::new());
    for _ in 0..12_000 {
        truth_model.advance(&mut x, 0.0, &mut g);
        let t = DVector::from_column_slice(&x);
        obs.push(&t + DVector::from_fn(n, |_, _| r.sqrt() * rng::normal(&mut g)));
        truth.push(t);
    }
    let model = L96Forecast { kind: L96ForecastKind::Reduced { forcing: 10.0 }, n_slow: n, dt, steps: 1 };
    let cfg = EtkfConfig {
        ensemble_size: 2 * n,
        obs_indices: (0..n).collect(),
        augment_alpha: false,
        alpha_init: 0.0,
        alpha_init_spread: 0.0,
        init_spread: 1.0,
        seed: 5,
    };
    let st = NoiseEstimatorState::new(DMatrix::zeros(n, n), DMatrix::identity(n, n) * r, 2000.0, &QParameterization::Full, true)
        .unwrap();
    let run = run_adaptive_enkf(&model, &cfg, NoiseSetting::Adaptive(st), &obs, &truth, &truth[0], r.sqrt()).unwrap();
    let s = run.summary(6000).unwrap();
    let want = n as f64 * sigma * sigma * dt;
    assert!((run.q_final.trace() - want).abs() < 0.2 * want, "tr Q {} vs {want}", run.q_final.trace());
    assert!((0.7..1.4).contains(&s.consistency), "consistency {}", s.consistency);
    assert!(s.rmse < r.sqrt());
}
