//! Toy distributions with exact answers, and the metrics that score samples
//! against them.

pub mod field;
pub mod linalg;
pub mod metrics;
pub mod mixture;

pub use field::{flatten, unflatten, Conditional, GaussianField, GaussianFieldSpec};
pub use metrics::{empirical_moments, energy_distance, energy_distance_with, moment_error, MetricReport};
pub use mixture::Mixture2dSpec;
