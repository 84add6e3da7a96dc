//! Training data and reference samples of the two toy tasks.

use anyhow::Result;
use farlab::diffcore::{RngStream, Tensor};
use farlab::toylab::{GaussianField, Mixture2dSpec};

use crate::config::{RunConfig, Task};

pub enum TaskData {
    Field(GaussianField),
    Mixture(Mixture2dSpec),
}

impl TaskData {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.task {
            Task::GaussianField => TaskData::Field(cfg.field.build()?),
            Task::Mixture2d => TaskData::Mixture(cfg.mixture.build()?),
        })
    }

    /// `n` grids of shape `[T, token_dim]`.
    pub fn batch(&self, rng: &mut RngStream, n: usize) -> Vec<Tensor> {
        match self {
            TaskData::Field(f) => f.sample(rng, n),
            TaskData::Mixture(m) => m
                .sample(rng, n)
                .into_iter()
                .map(|(_, x)| Tensor::matrix(1, 2, x.to_vec()))
                .collect(),
        }
    }

    /// Flattened reference draws.
    pub fn reference(&self, rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
        self.batch(rng, n).into_iter().map(Tensor::into_data).collect()
    }

    /// Exact mean and covariance of a flattened draw.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            TaskData::Field(f) => (f.spec().mean.clone(), f.spec().cov.clone()),
            TaskData::Mixture(m) => (m.mean().to_vec(), m.covariance().to_vec()),
        }
    }

    pub fn grid_width(&self) -> usize {
        match self {
            TaskData::Field(f) => f.spec().width,
            TaskData::Mixture(_) => 1,
        }
    }
}
