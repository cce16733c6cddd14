//! Named, seeded parameter storage.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Parameters keyed by unique name. Each parameter draws from its own RNG stream
/// derived from `(seed, name)`, so values do not depend on registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter id `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(-bound, bound) initialization from the parameter's own stream.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(name.as_bytes())));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::c((2.0 * rng.gen::<f64>() - 1.0) * bound))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Weight with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = trailing extent.
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let fan_in = *shape
            .last()
            .ok_or_else(|| Error::contract("weight needs rank >= 1"))?;
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Replaces a parameter value; the shape must be unchanged.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values (not gradients) into a store of another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape().to_vec()),
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
        }
    }

    /// Copies values from `other` for every parameter present in both by name.
    pub fn load_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Ingestion(format!("missing parameter `{}`", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::dim("load_param", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let mut a = ParamStore::<f32>::new(7);
        let mut b = ParamStore::<f32>::new(7);
        let ia = a.weight("w", &[4, 3]).unwrap();
        let ib = b.weight("w", &[4, 3]).unwrap();
        assert_eq!(a.value(ia), b.value(ib));
    }

    #[test]
    fn registration_order_does_not_matter() {
        let mut a = ParamStore::<f64>::new(1);
        let mut b = ParamStore::<f64>::new(1);
        let a1 = a.weight("x", &[2, 2]).unwrap();
        let _ = a.weight("y", &[2, 2]).unwrap();
        let _ = b.weight("y", &[2, 2]).unwrap();
        let b1 = b.weight("x", &[2, 2]).unwrap();
        assert_eq!(a.value(a1), b.value(b1));
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let mut s = ParamStore::<f64>::new(3);
        let w = s.weight("w", &[8, 16]).unwrap();
        let b = s.zeros("b", &[8]).unwrap();
        assert!(s.value(w).data().iter().all(|x| x.abs() <= 0.25));
        assert!(s.value(b).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.zeros("b", &[2]).unwrap();
        assert!(s.zeros("b", &[2]).is_err());
    }
}
