use crate::diffcore::params::ParamStore;
use crate::error::{invalid, Result};

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    shadow: ParamStore,
}

impl EmaState {
    /// Shadow initialized to a copy of `params`.
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return invalid(format!("ema decay {decay} must lie in (0, 1)"));
        }
        Ok(EmaState {
            decay,
            shadow: params.clone(),
        })
    }

    pub fn with_shadow(decay: f64, shadow: ParamStore) -> Result<Self> {
        let mut s = Self::new(decay, &shadow)?;
        s.shadow = shadow;
        Ok(s)
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`, elementwise.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        self.shadow.check_layout(params)?;
        let d = self.decay;
        for (s, p) in self.shadow.params_mut().iter_mut().zip(params.params()) {
            for (x, y) in s.value.data_mut().iter_mut().zip(p.value.data()) {
                *x = d * *x + (1.0 - d) * y;
            }
        }
        Ok(())
    }
}
