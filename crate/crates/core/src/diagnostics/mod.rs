//! Quantities of the non-convex convergence bound: vehicle heterogeneity,
//! composite gradient constants estimated from probe passes, the bound
//! itself, and an empirical rate fit.

mod bound;
mod gradients;
mod trend;

pub use bound::{theorem1_bound, BoundInputs, BoundReport};
pub use gradients::{
    composite_constants, full_batch_gradient, heterogeneity, heterogeneity_from_gradients, probe_constants, Composite,
    HeterogeneityReport, VehicleConstants,
};
pub use trend::{convergence_trend, running_mean, Trend};
