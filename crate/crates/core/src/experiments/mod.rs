//! Flood-level sweeps, significance testing, the Monte Carlo check of the
//! flooded risk estimator, and the memorization / gradient / flatness
//! diagnostics.

pub mod diagnostics;
pub mod stats;
pub mod sweep;
pub mod theorem;

pub use diagnostics::{
    filter_normalized_grad_norm, flatness_profile, memorization_curve, FlatnessProfile, MemorizationCurve,
    ProbedModels,
};
pub use stats::{welch_t_test, MeanStd, WelchResult};
pub use sweep::{flood_grid, run_sweep, DataSource, RunOutcome, SweepConfig, SweepResult};
pub use theorem::{bayes_error_two_gaussians, mse_gap_monte_carlo, pointwise_b, TheoremProbe, TheoremResult};
