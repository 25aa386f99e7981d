//! The single authoritative parameter set shared by forward and transposed graphs.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use rand_xoshiro::SplitMix64;

use crate::autograd::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter does inside its layer. Pruning only touches [`ParamRole::Weight`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    /// Batch-norm scale (gamma).
    Scale,
    /// Batch-norm shift (beta).
    Shift,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub role: ParamRole,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.role.is_trainable()
    }
}

/// Ordered map of parameters. Iteration order is insertion order.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
    rng_seed: u64,
    init_draws: u64,
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: IndexMap::new(),
            rng_seed,
            init_draws: 0,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Inserts a parameter with an explicit value. Fails on duplicate ids.
    pub fn insert(&mut self, id: &str, tensor: Tensor, role: ParamRole) -> Result<()> {
        if self.params.contains_key(id) {
            return Err(Error::invalid(format!("duplicate parameter id `{id}`")));
        }
        self.params.insert(
            id.to_string(),
            Parameter {
                id: id.to_string(),
                tensor,
                grad: None,
                role,
            },
        );
        Ok(())
    }

    /// Inserts (or replaces) a parameter with freshly drawn initial values.
    ///
    /// Weights are uniform in `±1/sqrt(fan_in)`, biases and shifts zero, scales one.
    /// Every call draws from a fresh stream, so re-initializing an id yields new values.
    pub fn init(&mut self, id: &str, shape: &[usize], fan_in: usize, role: ParamRole) {
        let n: usize = shape.iter().product();
        let data = match role {
            ParamRole::Weight => {
                let seed = self
                    .rng_seed
                    .wrapping_add(id_hash(id))
                    .wrapping_add(self.init_draws.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut rng = SplitMix64::seed_from_u64(seed);
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            ParamRole::Scale => vec![1.0; n],
            ParamRole::Bias | ParamRole::Shift | ParamRole::Buffer => vec![0.0; n],
        };
        self.init_draws += 1;
        let param = Parameter {
            id: id.to_string(),
            tensor: Tensor::from_vec(shape, data),
            grad: None,
            role,
        };
        self.params.insert(id.to_string(), param);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.params.get(id).ok_or_else(|| Error::UnboundParameter(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.params.get_mut(id).ok_or_else(|| Error::UnboundParameter(id.to_string()))
    }

    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.get(id)?.tensor)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(id)?;
        if p.tensor.shape() != value.shape() {
            return Err(Error::shape(
                format!("parameter {id}"),
                format!("{:?} vs {:?}", p.tensor.shape(), value.shape()),
            ));
        }
        p.tensor = value;
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<Parameter> {
        self.params.shift_remove(id)
    }

    /// Inserts a parameter, replacing any parameter with the same id in place.
    pub fn restore(&mut self, p: Parameter) {
        self.params.insert(p.id.clone(), p);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|p| p.trainable()).map(|p| p.tensor.numel()).sum()
    }

    /// Records `id`'s current value on `tape` as a named parameter.
    pub fn read(&self, tape: &mut Tape, id: &str) -> Result<crate::Var> {
        let p = self.get(id)?;
        Ok(tape.param(id, p.tensor.clone(), p.trainable()))
    }

    /// Accumulates gradients into the store. Trainable parameters the loss
    /// does not reach get a zero gradient if they had none.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let p = self.get_mut(id)?;
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape(format!("gradient of {id}"), format!("{:?} vs {:?}", p.tensor.shape(), g.shape())));
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        for p in self.params.values_mut().filter(|p| p.trainable()) {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.tensor.shape()));
            }
        }
        Ok(())
    }

    /// Backward pass from `loss`, accumulating into the store.
    pub fn backward(&mut self, tape: &Tape, loss: crate::Var) -> Result<()> {
        let grads = tape.gradients(loss)?;
        self.accumulate(&grads)
    }

    /// Applies pending batch-norm running-statistic updates recorded on `tape`.
    pub fn apply_buffer_updates(&mut self, tape: &Tape) -> Result<()> {
        for (id, value) in tape.buffer_updates() {
            self.set(id, value.clone())?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Bit-exact comparison of all values.
    pub fn same_values(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|(a, b)| {
                a.id == b.id
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_role_dependent() {
        let mut a = ParameterStore::new(5);
        let mut b = ParameterStore::new(5);
        for s in [&mut a, &mut b] {
            s.init("w", &[64, 100], 100, ParamRole::Weight);
            s.init("b", &[64], 100, ParamRole::Bias);
            s.init("g", &[4], 1, ParamRole::Scale);
        }
        assert!(a.same_values(&b));
        assert!(a.tensor("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.tensor("g").unwrap().data().iter().all(|&v| v == 1.0));
        let w = a.tensor("w").unwrap().data();
        let var = w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0 / 300.0).abs() < 0.0005, "{var}");
        assert!(w.iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn reinit_draws_new_values() {
        let mut s = ParameterStore::new(1);
        s.init("w", &[10], 10, ParamRole::Weight);
        let first = s.tensor("w").unwrap().clone();
        s.init("w", &[10], 10, ParamRole::Weight);
        assert_ne!(first.data(), s.tensor("w").unwrap().data());
    }

    #[test]
    fn duplicate_insert_fails() {
        let mut s = ParameterStore::new(0);
        s.insert("a", Tensor::zeros(&[1]), ParamRole::Bias).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), ParamRole::Bias).is_err());
    }

    #[test]
    fn backward_twice_doubles_and_zero_fills_unreached() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::from_vec(&[2, 1], vec![1.0, 1.0]), ParamRole::Weight).unwrap();
        s.insert("unused", Tensor::zeros(&[3]), ParamRole::Bias).unwrap();
        s.insert("stat", Tensor::zeros(&[3]), ParamRole::Buffer).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[1, 2], vec![0.5, -1.5]));
            let w = s.read(&mut tape, "w").unwrap();
            let y = tape.matmul(x, w, false, false).unwrap();
            let loss = tape.sum(y).unwrap();
            s.backward(&tape, loss).unwrap();
        }
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap().data(), &[1.0, -3.0]);
        assert_eq!(s.get("unused").unwrap().grad.as_ref().unwrap().data(), &[0.0; 3]);
        assert!(s.get("stat").unwrap().grad.is_none());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParameterStore::new(0);
        s.insert("a", Tensor::zeros(&[2]), ParamRole::Bias).unwrap();
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        assert!(matches!(s.get("nope"), Err(Error::UnboundParameter(_))));
    }
}
