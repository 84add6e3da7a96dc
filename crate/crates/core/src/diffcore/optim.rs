use serde::{Deserialize, Serialize};

use crate::diffcore::params::ParamStore;
use crate::diffcore::tensor::Tensor;
use crate::error::{invalid, Result};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.03,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        OptimState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One AdamW update with bias correction; decay skips exempt parameters.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return invalid(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return invalid(format!(
                "adamw: grad shape {:?} for parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            ));
        }
        if !g.is_finite() {
            return invalid(format!("adamw: non-finite gradient for {}", p.name));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let decay = if p.decay_exempt { 0.0 } else { c.lr * c.weight_decay };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.value.data_mut().iter_mut().enumerate() {
            let gj = grads[i].data()[j];
            if decay != 0.0 {
                *x *= 1.0 - decay;
            }
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(vals: &[f64], exempt: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::row_vector(vals.to_vec()), exempt);
        s
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut p = store(&[1.5, -2.0], false);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &p);
        adamw_step(&mut p, &[Tensor::zeros(&[1, 2])], &mut st).unwrap();
        assert_eq!(p.get(crate::diffcore::params::ParamId(0)).data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_grad_applies_decoupled_decay() {
        let mut p = store(&[0.7], false);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        adamw_step(&mut p, &[Tensor::zeros(&[1, 1])], &mut st).unwrap();
        let got = p.params()[0].value.data()[0];
        assert_eq!(got, 0.7 * (1.0 - 2e-4 * 0.03));
    }

    #[test]
    fn exempt_parameters_skip_decay() {
        let mut p = store(&[0.7], true);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        adamw_step(&mut p, &[Tensor::zeros(&[1, 1])], &mut st).unwrap();
        assert_eq!(p.params()[0].value.data()[0], 0.7);
    }

    /// Scalar reference written straight from the update equations.
    fn scalar_adam(p0: f64, grads: &[f64], c: AdamWConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            p -= c.lr * c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let c = AdamWConfig::default();
        let mut p = store(&[0.3], false);
        let mut st = OptimState::new(c, &p);
        adamw_step(&mut p, &[Tensor::row_vector(vec![-0.8])], &mut st).unwrap();
        let got = p.params()[0].value.data()[0];
        let want = scalar_adam(0.3, &[-0.8], c);
        assert!((got - want).abs() < 1e-15);
        // first step moves by ~lr in the direction of -sign(g)
        assert!((got - 0.3 * (1.0 - 6e-6) - 2e-4).abs() < 1e-9);
    }

    #[test]
    fn several_steps_match_scalar_oracle() {
        let c = AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        };
        let gs = [0.5, -1.0, 0.25, 2.0, -0.1];
        let mut p = store(&[1.0], false);
        let mut st = OptimState::new(c, &p);
        for g in gs {
            adamw_step(&mut p, &[Tensor::row_vector(vec![g])], &mut st).unwrap();
        }
        assert!((p.params()[0].value.data()[0] - scalar_adam(1.0, &gs, c)).abs() < 1e-14);
        assert_eq!(st.step(), 5);
    }

    #[test]
    fn errors_on_bad_grads() {
        let mut p = store(&[1.0, 2.0], false);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        assert!(adamw_step(&mut p, &[Tensor::zeros(&[2, 1])], &mut st).is_err());
        assert!(adamw_step(&mut p, &[Tensor::row_vector(vec![f64::NAN, 0.0])], &mut st).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::row_vector(vec![2.0 * 0.6, 2.0 * 0.8])];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 2.0).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut h = vec![Tensor::row_vector(vec![0.3, 0.4])];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.3, 0.4]);
        let mut empty: Vec<Tensor> = Vec::new();
        assert_eq!(clip_global_norm(&mut empty, 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn clip_norm_and_idempotence(
            a in proptest::collection::vec(-5.0f64..5.0, 1..6),
            b in proptest::collection::vec(-5.0f64..5.0, 1..9),
            max in 0.1f64..4.0,
        ) {
            let mut g = vec![Tensor::row_vector(a.clone()), Tensor::matrix(1, b.len(), b.clone())];
            let before = global_norm(&g);
            clip_global_norm(&mut g, max);
            let after = global_norm(&g);
            prop_assert!((after - before.min(max)).abs() < 1e-12);
            let once = g.clone();
            clip_global_norm(&mut g, max);
            for (x, y) in g.iter().zip(&once) {
                prop_assert!(x.max_abs_diff(y) <= 1e-15 * (1.0 + max));
            }
        }
    }
}
