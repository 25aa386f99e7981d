//! Adam and plain SGD.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: &str) -> Option<&Tensor> {
        self.m.get(id)
    }

    pub fn second_moment(&self, id: &str) -> Option<&Tensor> {
        self.v.get(id)
    }

    /// Updates every trainable parameter from its gradient, then clears all gradients.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        let missing: Vec<String> = store
            .iter()
            .filter(|p| p.trainable() && p.grad.is_none())
            .map(|p| p.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradients(missing));
        }
        for p in store.iter() {
            if let Some(g) = &p.grad {
                g.check_finite(&format!("gradient of {}", p.id))?;
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in store.iter_mut().filter(|p| p.trainable()) {
                    let g = p.grad.take().expect("checked above");
                    for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - lr * d as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for p in store.iter_mut().filter(|p| p.trainable()) {
                    let g = p.grad.take().expect("checked above");
                    let shape = p.tensor.shape().to_vec();
                    let m = self.m.entry(p.id.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    let v = self.v.entry(p.id.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    if m.shape() != shape.as_slice() {
                        return Err(Error::shape(format!("optimizer moments of {}", p.id), "parameter shape changed"));
                    }
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[i] as f64;
                        let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
                        let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                        md[i] = mi as f32;
                        vd[i] = vi as f32;
                        let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        store.clear_grads();
        Ok(())
    }

    /// Drops moments for a parameter id (used when a parameter is replaced).
    pub fn forget(&mut self, id: &str) {
        self.m.remove(id);
        self.v.remove(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn single(p: f32, g: f32) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        s.insert("p", Tensor::from_vec(&[1], vec![p]), ParamRole::Weight).unwrap();
        s.get_mut("p").unwrap().grad = Some(Tensor::from_vec(&[1], vec![g]));
        s
    }

    #[test]
    fn sgd_example() {
        let mut s = single(1.0, 0.5);
        OptimizerState::sgd(0.01).unwrap().step(&mut s).unwrap();
        assert!((s.tensor("p").unwrap().data()[0] - 0.995).abs() < 1e-7);
        assert!(s.get("p").unwrap().grad.is_none());
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut s = single(0.3, 0.0);
        OptimizerState::sgd(0.1).unwrap().step(&mut s).unwrap();
        assert_eq!(s.tensor("p").unwrap().data()[0], 0.3);
    }

    /// Scalar reference recurrence.
    fn adam_reference(mut p: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_first_step_matches_reference() {
        let mut s = single(1.0, 1.0);
        let mut opt = OptimizerState::adam(0.001).unwrap();
        opt.step(&mut s).unwrap();
        let expected = adam_reference(1.0, &[1.0], 0.001);
        assert!((1.0 - expected - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((s.tensor("p").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_many_steps_match_reference() {
        let grads = [0.5, -1.0, 2.0, 0.1, 0.0, -0.3, 1.5];
        let mut s = single(0.25, 0.0);
        let mut opt = OptimizerState::adam(0.01).unwrap();
        for &g in &grads {
            s.get_mut("p").unwrap().grad = Some(Tensor::from_vec(&[1], vec![g as f32]));
            opt.step(&mut s).unwrap();
        }
        let expected = adam_reference(0.25, &grads, 0.01);
        assert!((s.tensor("p").unwrap().data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_leaves_everything_unchanged() {
        let mut s = single(0.7, 0.0);
        let mut opt = OptimizerState::adam(0.01).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor("p").unwrap().data()[0], 0.7);
        assert_eq!(opt.first_moment("p").unwrap().data(), &[0.0]);
        assert_eq!(opt.second_moment("p").unwrap().data(), &[0.0]);
    }

    #[test]
    fn missing_grads_are_listed() {
        let mut s = single(1.0, 1.0);
        s.insert("q", Tensor::zeros(&[2]), ParamRole::Bias).unwrap();
        match OptimizerState::sgd(0.1).unwrap().step(&mut s) {
            Err(Error::MissingGradients(ids)) => assert_eq!(ids, vec!["q".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(OptimizerState::adam(0.0).is_err());
        assert!(OptimizerState::sgd(f64::NAN).is_err());
    }
}
