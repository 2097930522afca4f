use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for every parameter in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// alone (their moments do not decay). A non-finite gradient anywhere
    /// aborts the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(NumericsError::InvalidArgument(format!("learning rate {lr}")));
        }
        for (id, g) in grads.iter() {
            if id.index() >= self.m.len() || g.len() != self.m[id.index()].len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(1.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = Grads::new(1);
        g.accumulate(store.id("x").unwrap(), &[0.0]);
        adam.step(&mut store, &g, 1e-3).unwrap();
        assert_eq!(store.get(store.id("x").unwrap()).item(), 1.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let id = store.id("x").unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = Grads::new(1);
        g.accumulate(id, &[1.0]);
        adam.step(&mut store, &g, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr/(1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut store = scalar_store(2.0);
        let id = store.id("x").unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = Grads::new(1);
        g.accumulate(id, &[f64::NAN]);
        assert!(matches!(
            adam.step(&mut store, &g, 1e-3),
            Err(NumericsError::NonFiniteGradient(_))
        ));
        assert_eq!(store.get(id).item(), 2.0);
        assert_eq!(adam.steps(), 0);
    }
}
