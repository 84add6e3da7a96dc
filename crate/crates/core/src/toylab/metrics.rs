use serde::{Deserialize, Serialize};

use crate::exec::{map_range, Parallelism};
use crate::error::{invalid, Result};

/// Summary of how well samples match a target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: Option<f64>,
    /// Max-abs error of the empirical mean.
    pub mean_error: f64,
    /// Max-abs error of the empirical (unbiased) covariance.
    pub cov_error: f64,
    pub samples: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pairwise(mode: Parallelism, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows = map_range(mode, a.len(), |i| b.iter().map(|y| dist(&a[i], y)).sum::<f64>());
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// V-statistic energy distance `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖`.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    energy_distance_with(Parallelism::default(), a, b)
}

pub fn energy_distance_with(mode: Parallelism, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("energy distance of an empty sample set");
    }
    let ab = mean_pairwise(mode, a, b);
    let aa = mean_pairwise(mode, a, a);
    let bb = mean_pairwise(mode, b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Empirical mean and unbiased covariance (row-major).
pub fn empirical_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return invalid("moments need at least two samples");
    }
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= n - 1.0;
    }
    Ok((mean, cov))
}

/// Max-abs error of empirical mean and covariance against targets.
pub fn moment_error(samples: &[Vec<f64>], target_mean: &[f64], target_cov: &[f64]) -> Result<MetricReport> {
    let (mean, cov) = empirical_moments(samples)?;
    if target_mean.len() != mean.len() || target_cov.len() != cov.len() {
        return invalid("target moment dimensions disagree with samples");
    }
    let max_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(MetricReport {
        energy_distance: None,
        mean_error: max_abs(&mean, target_mean),
        cov_error: max_abs(&cov, target_cov),
        samples: samples.len(),
    })
}
