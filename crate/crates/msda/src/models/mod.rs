//! Dynamical systems, integrators and twin-experiment data generation.

mod l96;
mod linear;
mod observations;
mod sde;
mod spekf;

pub use l96::{
    integrate_cubic_ar1, integrate_l96_rk4, integrate_two_layer, one_layer_tendency, rk4_step,
    two_layer_tendency, Ar1Convention, CubicAr1Params, L96Model, L96Params, ReducedL96Params,
    Rk4Work, TwoLayerRun,
};
pub use linear::{integrate_linear_exact, LinearTransition, LinearTwoScaleParams};
pub use observations::{generate_observations, ObservationSeries, Trajectory};
pub(crate) use sde::check_em_step;
pub use sde::{em_step, integrate_sde_em, integrate_sde_em_strided, Sde, EM_STABILITY_BOUND};
pub use spekf::{ReducedSpekfParams, SpekfParams, SPEKF_DIM};
