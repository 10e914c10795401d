use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. `weight_decay` adds `wd * param` to the
/// gradient (L2 form).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// One update of every parameter that has a gradient in `grads`.
    /// Parameters without a gradient entry are left untouched.
    pub fn step<'a, I>(&mut self, params: I, grads: &IndexMap<String, Tensor<T>>) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        let params: Vec<(String, &'a mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![T::zero(); g.len()]);
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let mut gi = g.data()[i];
                if c.weight_decay != 0.0 {
                    gi = gi + wd * pd[i];
                }
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
