use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub struct AdamW<S> {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears `grads`.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &mut Gradients<S>) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(_) => return Err(Error::Structure(name.clone())),
                None => return Err(Error::MissingGrad(name.clone())),
            }
        }
        self.step += 1;
        let lr = S::lit(self.cfg.lr);
        let decay = S::one() - lr * S::lit(self.cfg.weight_decay);
        let (b1, b2) = (S::lit(self.cfg.beta1), S::lit(self.cfg.beta2));
        let eps = S::lit(self.cfg.eps);
        let t = self.step as i32;
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);

        for (name, p) in params.iter_mut() {
            let g = grads.remove(name).expect("checked above");
            let n = p.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![S::zero(); n],
                second: vec![S::zero(); n],
            });
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv = *pv * decay;
                let m1 = b1 * m.first[i] + (S::one() - b1) * gv;
                let m2 = b2 * m.second[i] + (S::one() - b2) * gv * gv;
                m.first[i] = m1;
                m.second[i] = m2;
                let mhat = m1 / bc1;
                let vhat = m2 / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        grads.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        std::iter::once(("p".to_string(), Tensor::scalar(value))).collect()
    }

    fn grad(value: f64) -> Gradients<f64> {
        std::iter::once(("p".to_string(), Tensor::scalar(value))).collect()
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = single(1.5);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &mut grad(0.0)).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut g = grad(1.0);
        opt.step(&mut p, &mut g).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().item() - expected).abs() < 1e-15);
        assert!((p.get("p").unwrap().item() - 0.9).abs() < 1e-8);
        assert!(g.is_empty());
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut p, &mut grad(0.0)).unwrap();
        assert!((p.get("p").unwrap().item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = single(1.0);
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let err = opt.step(&mut p, &mut Gradients::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "p"));
    }
}
