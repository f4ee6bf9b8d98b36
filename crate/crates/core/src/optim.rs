//! Adam and a piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to store entry `i`; `None` entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: f64) {
        assert_eq!(
            grads.len(),
            store.len(),
            "one gradient slot per store entry"
        );
        if self.m.len() != grads.len() {
            self.m = vec![None; grads.len()];
            self.v = vec![None; grads.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = S::lit(1.0 - b1.powi(t));
        let c2 = S::lit(1.0 - b2.powi(t));
        let (b1s, b2s) = (S::lit(b1), S::lit(b2));
        let (one, eps, lr) = (S::one(), S::lit(self.cfg.eps), S::lit(lr));
        for (i, (entry, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let (p, m, v) = (entry.value.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1s * m[j] + (one - b1s) * gj;
                v[j] = b2s * v[j] + (one - b2s) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Piecewise-constant learning rate: `(iteration, lr)` pairs, the first at
/// iteration 0, iterations strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule {
    steps: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(u64, f64)>) -> Result<Self, String> {
        let s = LrSchedule { steps };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            steps: vec![(0, lr)],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.steps.first() {
            None => return Err("learning-rate schedule is empty".into()),
            Some(&(it, _)) if it != 0 => {
                return Err(format!(
                    "schedule must start at iteration 0, starts at {it}"
                ))
            }
            _ => {}
        }
        if let Some(w) = self.steps.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(format!(
                "schedule iterations must increase strictly ({} then {})",
                w[0].0, w[1].0
            ));
        }
        if let Some(&(it, lr)) = self
            .steps
            .iter()
            .find(|(_, lr)| !(lr.is_finite() && *lr > 0.0))
        {
            return Err(format!(
                "learning rate {lr} at iteration {it} must be positive"
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> &[(u64, f64)] {
        &self.steps
    }

    /// Rate in effect at 0-based iteration `iter`.
    pub fn at(&self, iter: u64) -> f64 {
        self.steps
            .iter()
            .take_while(|(it, _)| *it <= iter)
            .last()
            .map_or(self.steps[0].1, |&(_, lr)| lr)
    }
}
