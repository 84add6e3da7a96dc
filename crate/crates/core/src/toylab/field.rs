use serde::{Deserialize, Serialize};

use crate::diffcore::{RngStream, Tensor};
use crate::error::{invalid, Error, Result};
use crate::toylab::linalg::{cholesky, cholesky_solve, lower_mul};

/// Jointly Gaussian token grid.
///
/// Scalars are indexed `position * token_dim + channel` with positions in
/// raster order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFieldSpec {
    pub height: usize,
    pub width: usize,
    pub token_dim: usize,
    pub mean: Vec<f64>,
    /// Full covariance, row-major, `(N·token_dim)²` entries.
    pub cov: Vec<f64>,
}

/// Sampler-ready field: spec plus its Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianField {
    spec: GaussianFieldSpec,
    chol: Vec<f64>,
}

impl GaussianFieldSpec {
    /// Squared-exponential kernel over grid distance, channels independent,
    /// jittered then normalized to unit marginal variance.
    pub fn squared_exponential(height: usize, width: usize, token_dim: usize, length_scale: f64) -> Self {
        let positions = height * width;
        let n = positions * token_dim;
        let mut cov = vec![0.0; n * n];
        for p in 0..positions {
            for q in 0..positions {
                let (py, px) = ((p / width) as f64, (p % width) as f64);
                let (qy, qx) = ((q / width) as f64, (q % width) as f64);
                let d2 = (py - qy).powi(2) + (px - qx).powi(2);
                let k = (-d2 / (2.0 * length_scale * length_scale)).exp();
                for c in 0..token_dim {
                    cov[(p * token_dim + c) * n + q * token_dim + c] = k;
                }
            }
        }
        for i in 0..n {
            cov[i * n + i] += 1e-6;
        }
        let sd: Vec<f64> = (0..n).map(|i| cov[i * n + i].sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] /= sd[i] * sd[j];
            }
        }
        GaussianFieldSpec {
            height,
            width,
            token_dim,
            mean: vec![0.0; n],
            cov,
        }
    }

    /// Independent unit-variance scalars.
    pub fn identity(height: usize, width: usize, token_dim: usize) -> Self {
        let n = height * width * token_dim;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = 1.0;
        }
        GaussianFieldSpec {
            height,
            width,
            token_dim,
            mean: vec![0.0; n],
            cov,
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.positions() * self.token_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.mean.len() != n || self.cov.len() != n * n {
            return invalid(format!(
                "field of {n} scalars has mean {} / cov {}",
                self.mean.len(),
                self.cov.len()
            ));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.cov[i * n + j] - self.cov[j * n + i]).abs() > 1e-12 {
                    return invalid("covariance is not symmetric");
                }
            }
        }
        Ok(())
    }

    pub fn build(self) -> Result<GaussianField> {
        self.validate()?;
        let chol = cholesky(&self.cov, self.dim())?;
        Ok(GaussianField { spec: self, chol })
    }
}

/// Gaussian conditional of the masked positions given clamped ones.
#[derive(Clone, Debug)]
pub struct Conditional {
    /// Positions covered, in ascending order.
    pub positions: Vec<usize>,
    /// `positions.len() * token_dim` values.
    pub mean: Vec<f64>,
    /// Row-major covariance over the same scalars.
    pub cov: Vec<f64>,
}

impl GaussianField {
    pub fn spec(&self) -> &GaussianFieldSpec {
        &self.spec
    }

    /// One flattened grid `[N·token_dim]`.
    pub fn sample_flat(&self, rng: &mut RngStream) -> Vec<f64> {
        let n = self.spec.dim();
        let z = rng.normals(n);
        let mut x = lower_mul(&self.chol, n, &z);
        for (xi, m) in x.iter_mut().zip(&self.spec.mean) {
            *xi += m;
        }
        x
    }

    /// `n` grids, each a `[positions, token_dim]` tensor.
    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::matrix(self.spec.positions(), self.spec.token_dim, self.sample_flat(rng)))
            .collect()
    }

    /// Schur-complement conditional of the complement of `clamped`.
    ///
    /// `clamped` lists `(position, token)` pairs; returns the conditional of
    /// every other position.
    pub fn conditional(&self, clamped: &[(usize, Vec<f64>)]) -> Result<Conditional> {
        let spec = &self.spec;
        let td = spec.token_dim;
        let n = spec.dim();
        let np = spec.positions();
        let mut is_u = vec![false; np];
        for (p, tok) in clamped {
            if *p >= np || tok.len() != td {
                return invalid(format!("clamp at position {p} with {} values", tok.len()));
            }
            if is_u[*p] {
                return invalid(format!("position {p} clamped twice"));
            }
            is_u[*p] = true;
        }
        let m_pos: Vec<usize> = (0..np).filter(|&p| !is_u[p]).collect();
        let m_idx: Vec<usize> = m_pos.iter().flat_map(|&p| (0..td).map(move |c| p * td + c)).collect();
        let mut u_sorted = clamped.to_vec();
        u_sorted.sort_by_key(|(p, _)| *p);
        let u_idx: Vec<usize> = u_sorted.iter().flat_map(|(p, _)| (0..td).map(move |c| p * td + c)).collect();
        let u_val: Vec<f64> = u_sorted.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let (nu, nm) = (u_idx.len(), m_idx.len());
        let cov = |i: usize, j: usize| spec.cov[i * n + j];

        if nu == 0 {
            let mean = m_idx.iter().map(|&i| spec.mean[i]).collect();
            let c = m_idx.iter().flat_map(|&i| m_idx.iter().map(move |&j| cov(i, j))).collect();
            return Ok(Conditional { positions: m_pos, mean, cov: c });
        }
        let suu: Vec<f64> = u_idx.iter().flat_map(|&i| u_idx.iter().map(move |&j| cov(i, j))).collect();
        let l = cholesky(&suu, nu).map_err(|e| Error::Linalg(format!("singular clamped block: {e}")))?;
        let resid: Vec<f64> = u_idx.iter().zip(&u_val).map(|(&i, v)| v - spec.mean[i]).collect();
        let alpha = cholesky_solve(&l, nu, &resid, 1);
        // Σ_UU⁻¹ Σ_UM, nu × nm
        let sum_: Vec<f64> = u_idx.iter().flat_map(|&i| m_idx.iter().map(move |&j| cov(i, j))).collect();
        let w = cholesky_solve(&l, nu, &sum_, nm);
        let mean = m_idx
            .iter()
            .map(|&j| spec.mean[j] + (0..nu).map(|a| cov(j, u_idx[a]) * alpha[a]).sum::<f64>())
            .collect();
        let mut c = vec![0.0; nm * nm];
        for (a, &i) in m_idx.iter().enumerate() {
            for (b, &j) in m_idx.iter().enumerate() {
                let corr: f64 = (0..nu).map(|k| cov(i, u_idx[k]) * w[k * nm + b]).sum();
                c[a * nm + b] = cov(i, j) - corr;
            }
        }
        Ok(Conditional { positions: m_pos, mean, cov: c })
    }
}

impl Conditional {
    /// Exact draws from this conditional (rows of `positions.len() * token_dim`).
    pub fn sampler(&self) -> Result<ConditionalSampler> {
        let n = self.mean.len();
        let mut jittered = self.cov.clone();
        for i in 0..n {
            jittered[i * n + i] += 1e-12;
        }
        Ok(ConditionalSampler {
            mean: self.mean.clone(),
            chol: cholesky(&jittered, n)?,
        })
    }
}

pub struct ConditionalSampler {
    mean: Vec<f64>,
    chol: Vec<f64>,
}

impl ConditionalSampler {
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let n = self.mean.len();
        let z = rng.normals(n);
        let mut x = lower_mul(&self.chol, n, &z);
        for (xi, m) in x.iter_mut().zip(&self.mean) {
            *xi += m;
        }
        x
    }
}

/// Row-major `[positions, token_dim]` → nested grid `[h][w][token_dim]`.
pub fn unflatten(flat: &Tensor, height: usize, width: usize) -> Vec<Vec<Vec<f64>>> {
    (0..height)
        .map(|y| (0..width).map(|x| flat.row(y * width + x).to_vec()).collect())
        .collect()
}

/// Raster flattening of a nested grid.
pub fn flatten(grid: &[Vec<Vec<f64>>]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = grid.iter().flat_map(|r| r.iter().cloned()).collect();
    Tensor::from_rows(&rows)
}
