//! Training and generation loops around a backbone and a head.

pub mod generate;
pub mod model;
pub mod oracle;
pub mod schedule;
pub mod train;

pub use generate::{causal_generate, far_generate, grid_csv_header, write_grid_csv, EpisodeSpec, GenerateConfig, Generated, RunManifest};
pub use model::{Backbone, BackboneKind, FarModel, Head, HeadKind, ModelConfig, ModelParams};
pub use oracle::{clamp_pattern, model_oracle, sampler_oracle, OracleRow, OracleSpec};
pub use schedule::{cosine_plan, cosine_remaining};
pub use train::{StepReport, TrainConfig, Trainer};
