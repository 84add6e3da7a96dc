//! Conditional generation against exact Gaussian conditionals.

use serde::{Deserialize, Serialize};

use crate::ar_engine::generate::{far_generate, EpisodeSpec, GenerateConfig};
use crate::ar_engine::model::{FarModel, ModelParams};
use crate::diffcore::RngStream;
use crate::error::{invalid, Result};
use crate::toylab::{moment_error, Conditional, GaussianField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub patterns: usize,
    /// Clamped positions per pattern.
    pub clamped: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            patterns: 5,
            clamped: 4,
            samples: 2000,
            seed: 0,
        }
    }
}

/// Clamped positions (sorted) with values drawn from the field itself.
pub fn clamp_pattern(field: &GaussianField, spec: &OracleSpec, pattern: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let np = field.spec().positions();
    if spec.clamped >= np {
        return invalid(format!("cannot clamp {} of {np} positions", spec.clamped));
    }
    let mut rng = RngStream::derive(spec.seed, &[pattern as u64, 0xC1A]);
    let mut pos = rng.choose_distinct(np, spec.clamped);
    pos.sort_unstable();
    let td = field.spec().token_dim;
    let grid = field.sample_flat(&mut rng);
    Ok(pos.into_iter().map(|p| (p, grid[p * td..(p + 1) * td].to_vec())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleRow {
    pub pattern: usize,
    pub clamped: usize,
    /// Max-abs error of the empirical conditional mean.
    pub mean_error: f64,
    pub cov_error: f64,
    pub samples: usize,
}

fn compare(pattern: usize, clamped: usize, cond: &Conditional, samples: &[Vec<f64>]) -> Result<OracleRow> {
    let r = moment_error(samples, &cond.mean, &cond.cov)?;
    Ok(OracleRow {
        pattern,
        clamped,
        mean_error: r.mean_error,
        cov_error: r.cov_error,
        samples: r.samples,
    })
}

/// Free-position values of generated grids, in `cond.positions` order.
fn free_values(cond: &Conditional, grid: &[f64], td: usize) -> Vec<f64> {
    cond.positions.iter().flat_map(|&p| grid[p * td..(p + 1) * td].iter().copied()).collect()
}

/// Generates `spec.samples` grids per clamp pattern and compares the free
/// positions with the analytic conditional.
pub fn model_oracle(
    model: &FarModel,
    params: &ModelParams,
    field: &GaussianField,
    spec: &OracleSpec,
    label: Option<usize>,
    gen: &GenerateConfig,
) -> Result<Vec<OracleRow>> {
    let td = field.spec().token_dim;
    if model.tokens() != field.spec().positions() || model.token_dim() != td {
        return invalid("model and field disagree on the token layout");
    }
    (0..spec.patterns)
        .map(|k| {
            let clamps = clamp_pattern(field, spec, k)?;
            let cond = field.conditional(&clamps)?;
            let episodes = vec![EpisodeSpec { label, clamps }; spec.samples];
            let g = GenerateConfig {
                seed: gen.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..*gen
            };
            let out = far_generate(model, params, &episodes, &g)?;
            let samples: Vec<Vec<f64>> = out.grids.iter().map(|t| free_values(&cond, t.data(), td)).collect();
            compare(k, spec.clamped, &cond, &samples)
        })
        .collect()
}

/// Same comparison with exact conditional draws in place of the model.
pub fn sampler_oracle(field: &GaussianField, spec: &OracleSpec) -> Result<Vec<OracleRow>> {
    (0..spec.patterns)
        .map(|k| {
            let clamps = clamp_pattern(field, spec, k)?;
            let cond = field.conditional(&clamps)?;
            let sampler = cond.sampler()?;
            let mut rng = RngStream::derive(spec.seed, &[k as u64, 0x5A3]);
            let samples: Vec<Vec<f64>> = (0..spec.samples).map(|_| sampler.sample(&mut rng)).collect();
            compare(k, spec.clamped, &cond, &samples)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::GaussianFieldSpec;

    #[test]
    fn exact_sampler_is_calibrated() {
        let field = GaussianFieldSpec::squared_exponential(4, 4, 2, 1.5).build().unwrap();
        let spec = OracleSpec { samples: 10_000, ..Default::default() };
        for r in sampler_oracle(&field, &spec).unwrap() {
            assert!(r.mean_error < 0.05, "{r:?}");
        }
    }

    #[test]
    fn patterns_are_deterministic_and_sorted() {
        let field = GaussianFieldSpec::squared_exponential(4, 4, 2, 1.5).build().unwrap();
        let spec = OracleSpec::default();
        let a = clamp_pattern(&field, &spec, 3).unwrap();
        assert_eq!(a, clamp_pattern(&field, &spec, 3).unwrap());
        assert_ne!(a, clamp_pattern(&field, &spec, 4).unwrap());
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(clamp_pattern(&field, &OracleSpec { clamped: 16, ..spec }, 0).is_err());
    }
}
