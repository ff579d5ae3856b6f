//! Named parameter storage, initialization and the momentum optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Real, Tensor};

/// Seedable generator used for every random draw in the crate.
pub type Prng = Xoshiro256PlusPlus;

pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Parameters keyed by dotted path, e.g. `lateral.3.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Overwrites every tensor under `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                *v = Tensor::zeros(v.dims());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        io::save_tensor_dir(dir, &self.tensors)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            tensors: io::load_tensor_dir(dir)?,
        })
    }
}

/// Kaiming-uniform fan-in initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(dims, -bound, bound, rng)
}

/// Adds `<prefix>.weight` `[k, c, kh, kw]` and a zero `<prefix>.bias`.
pub fn init_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    (out_c, in_c, kh, kw): (usize, usize, usize, usize),
    rng: &mut R,
) {
    store.insert(
        format!("{prefix}.weight"),
        kaiming_uniform(&[out_c, in_c, kh, kw], in_c * kh * kw, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_c]));
}

/// Adds `<prefix>.weight` `[out, in]` and a zero `<prefix>.bias`.
pub fn init_linear<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    (fan_out, fan_in): (usize, usize),
    rng: &mut R,
) {
    store.insert(format!("{prefix}.weight"), kaiming_uniform(&[fan_out, fan_in], fan_in, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

/// SGD with classical momentum: `v = mu * v + g`, `p -= lr * v`.
///
/// With `max_grad_norm` set, the gradients are first scaled so their global
/// L2 norm is at most that value.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            max_grad_norm: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    /// Global L2 norm over every gradient, accumulated in f64.
    pub fn grad_norm(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let lr = T::from_f64(self.learning_rate);
        let mu = T::from_f64(self.momentum);
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = Self::grad_norm(grads);
                if norm > max {
                    T::from_f64(max / norm)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("optimizer: unknown parameter `{name}`")))?;
            if param.dims() != grad.dims() {
                return Err(Error::Dimension(format!(
                    "optimizer: `{name}` is {:?}, gradient {:?}",
                    param.dims(),
                    grad.dims()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.numel()]);
            for ((p, vi), &g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + scale * g;
                *p = *p - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a: Tensor<f32> = kaiming_uniform(&[4, 3], 3, &mut prng(7));
        let b: Tensor<f32> = kaiming_uniform(&[4, 3], 3, &mut prng(7));
        assert!(a.bit_eq(&b));
        let bound = (6.0f32 / 3.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut store, &grads).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((store.get("w").unwrap().data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_the_global_norm() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(0.0));
        store.insert("b", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(3.0));
        grads.insert("b".to_string(), Tensor::scalar(4.0));
        assert_eq!(SgdMomentum::grad_norm(&grads), 5.0);
        let mut opt = SgdMomentum::new(1.0, 0.0).with_max_grad_norm(Some(1.0));
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("a").unwrap().data()[0] + 0.6).abs() < 1e-15);
        assert!((store.get("b").unwrap().data()[0] + 0.8).abs() < 1e-15);

        // Under the limit the step is untouched.
        let mut opt = SgdMomentum::new(1.0, 0.0).with_max_grad_norm(Some(10.0));
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("a").unwrap().data()[0] + 3.6).abs() < 1e-15);
    }
}
