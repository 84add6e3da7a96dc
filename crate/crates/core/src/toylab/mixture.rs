use serde::{Deserialize, Serialize};

use crate::diffcore::RngStream;
use crate::error::{invalid, Result};

/// Isotropic Gaussian mixture in the plane. Component `i` is class `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture2dSpec {
    pub means: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl Mixture2dSpec {
    /// `k` equally weighted components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Mixture2dSpec {
            means,
            weights: vec![1.0 / k as f64; k],
            std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return invalid("mixture needs one weight per mean");
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return invalid(format!("mixture weights sum to {s}"));
        }
        if self.std <= 0.0 {
            return invalid("mixture std must be positive");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// Draws a component, then a point from it. Returns `(label, point)`.
    pub fn sample_one(&self, rng: &mut RngStream) -> (usize, [f64; 2]) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut label = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                label = i;
                break;
            }
        }
        (label, self.sample_class(label, rng))
    }

    pub fn sample_class(&self, label: usize, rng: &mut RngStream) -> [f64; 2] {
        let m = self.means[label];
        [m[0] + self.std * rng.normal(), m[1] + self.std * rng.normal()]
    }

    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Vec<(usize, [f64; 2])> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            m[0] += w * mu[0];
            m[1] += w * mu[1];
        }
        m
    }

    /// Row-major 2×2 covariance.
    pub fn covariance(&self) -> [f64; 4] {
        let m = self.mean();
        let mut c = [0.0; 4];
        for (mu, w) in self.means.iter().zip(&self.weights) {
            let d = [mu[0] - m[0], mu[1] - m[1]];
            c[0] += w * d[0] * d[0];
            c[1] += w * d[0] * d[1];
            c[3] += w * d[1] * d[1];
        }
        c[2] = c[1];
        c[0] += self.std * self.std;
        c[3] += self.std * self.std;
        c
    }
}
