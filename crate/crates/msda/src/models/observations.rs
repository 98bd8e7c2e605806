use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{check_psd, sym_sqrt};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return invalid("trajectory: times and states differ in length");
        }
        if self.states.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return invalid("trajectory: non-finite state");
        }
        if self.times.len() > 2 {
            let h = self.times[1] - self.times[0];
            let tol = 1e-9 * self.times.last().unwrap().abs().max(1.0);
            for w in self.times.windows(2) {
                if !(w[1] > w[0]) || ((w[1] - w[0]) - h).abs() > tol {
                    return invalid("trajectory: times not uniformly increasing");
                }
            }
        }
        Ok(())
    }

    /// Writes `t` followed by one column per state component.
    pub fn write_csv<W: Write>(&self, out: W, names: &[String]) -> Result<()> {
        if names.len() != self.dim() {
            return invalid("trajectory csv: column names do not match state dimension");
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t}")];
            row.extend(s.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub obs_indices: Vec<usize>,
    pub r_obs: DMatrix<f64>,
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.obs_indices.len()
    }

    /// Observation interval, assuming uniform spacing.
    pub fn interval(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn selection_matrix(&self, n: usize) -> DMatrix<f64> {
        selection(&self.obs_indices, n)
    }
}

pub(crate) fn selection(indices: &[usize], n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(indices.len(), n);
    for (r, &c) in indices.iter().enumerate() {
        h[(r, c)] = 1.0;
    }
    h
}

/// Every `obs_stride`-th state (starting after the initial one) observed through the index
/// selection with additive `N(0, r_obs)` noise.
pub fn generate_observations(
    traj: &Trajectory,
    obs_indices: &[usize],
    r_obs: &DMatrix<f64>,
    obs_stride: usize,
    seed: u64,
) -> Result<ObservationSeries> {
    if obs_stride == 0 {
        return invalid("observation stride must be positive");
    }
    if traj.is_empty() {
        return invalid("cannot observe an empty trajectory");
    }
    if !(traj.len() - 1).is_multiple_of(obs_stride) {
        return invalid(format!(
            "observation stride {obs_stride} does not divide trajectory length {}",
            traj.len() - 1
        ));
    }
    let n = traj.dim();
    if obs_indices.windows(2).any(|w| w[1] <= w[0]) || obs_indices.iter().any(|&i| i >= n) {
        return invalid("observation indices must be strictly increasing and in range");
    }
    if r_obs.shape() != (obs_indices.len(), obs_indices.len()) {
        return invalid("observation covariance has the wrong shape");
    }
    check_psd(r_obs, "observation covariance")?;
    let factor = match r_obs.clone().cholesky() {
        Some(c) => c.l(),
        None => sym_sqrt(r_obs),
    };
    let mut noise_rng = rng::stream(seed, "observation-noise");
    let m = obs_indices.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for k in (obs_stride..traj.len()).step_by(obs_stride) {
        let s = &traj.states[k];
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k, detail: "non-finite truth state".into() });
        }
        let z = DVector::from_fn(m, |_, _| rng::normal(&mut noise_rng));
        let truth = DVector::from_iterator(m, obs_indices.iter().map(|&i| s[i]));
        times.push(traj.times[k]);
        values.push(truth + &factor * z);
    }
    Ok(ObservationSeries { times, values, obs_indices: obs_indices.to_vec(), r_obs: r_obs.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Trajectory {
        Trajectory {
            times: (0..n).map(|k| k as f64 * 0.1).collect(),
            states: (0..n).map(|k| DVector::from_vec(vec![k as f64, -(k as f64)])).collect(),
            seed: None,
        }
    }

    #[test]
    fn zero_noise_returns_truth() {
        let traj = ramp(11);
        let obs = generate_observations(&traj, &[1], &DMatrix::zeros(1, 1), 2, 4).unwrap();
        assert_eq!(obs.len(), 5);
        for (k, z) in obs.values.iter().enumerate() {
            assert_eq!(z[0], -(2.0 * (k + 1) as f64));
        }
    }

    #[test]
    fn stride_must_divide() {
        let traj = ramp(10);
        assert!(generate_observations(&traj, &[0], &DMatrix::identity(1, 1), 2, 1).is_err());
    }

    #[test]
    fn indefinite_noise_rejected() {
        let traj = ramp(11);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(generate_observations(&traj, &[0, 1], &r, 1, 1).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let traj = ramp(3);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &["x_0".into(), "x_1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_0,x_1\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
