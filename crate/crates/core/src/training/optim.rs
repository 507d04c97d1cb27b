//! First-order optimizers over a [`ParamStore`], with state that can be
//! saved into and restored from a checkpoint.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight decay must be ≥ 0 and betas in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.eps > 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

/// Adam or momentum SGD. Weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    pub config: OptimConfig,
    pub steps: u64,
    first: HashMap<String, Tensor<T>>,
    second: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        })
    }

    /// Updates every trainable entry of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<String, Tensor<T>>) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let lr = T::lit(c.lr);
        let wd = T::lit(c.weight_decay);
        let names = store.trainable_names();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let w = store.get_mut(&name)?;
            w.expect_same_shape(g, "optimizer step")?;
            let grad: Vec<T> = if c.weight_decay > 0.0 {
                g.data().iter().zip(w.data()).map(|(&g, &w)| g + wd * w).collect()
            } else {
                g.data().to_vec()
            };
            match c.kind {
                OptimizerKind::Sgd => {
                    let mu = T::lit(c.momentum);
                    let buf = self.first.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((b, gi), wi) in buf.data_mut().iter_mut().zip(&grad).zip(w.data_mut()) {
                        *b = mu * *b + *gi;
                        *wi -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    let t = self.steps as i32;
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let eps = T::lit(c.eps);
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((mi, vi), gi), wi) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(&grad)
                        .zip(w.data_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * *gi;
                        *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *wi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as `optim.m.<param>` / `optim.v.<param>` plus the step
    /// counter as `optim.steps`.
    pub fn state(&self) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        out.insert("optim.steps".into(), Tensor::from_vec(vec![T::lit(self.steps as f64)]));
        let mut names: Vec<&String> = self.first.keys().collect();
        names.sort();
        for n in names {
            out.insert(format!("optim.m.{n}"), self.first[n].clone());
        }
        let mut names: Vec<&String> = self.second.keys().collect();
        names.sort();
        for n in names {
            out.insert(format!("optim.v.{n}"), self.second[n].clone());
        }
        out
    }

    pub fn restore(config: OptimConfig, state: &IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut opt = Self::new(config)?;
        for (k, t) in state {
            if k == "optim.steps" {
                opt.steps = t.data()[0].as_f64() as u64;
            } else if let Some(n) = k.strip_prefix("optim.m.") {
                opt.first.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("optim.v.") {
                opt.second.insert(n.to_string(), t.clone());
            }
        }
        Ok(opt)
    }
}
