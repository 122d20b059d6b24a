//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::config::{LrSchedule, OptimizerKind, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate for `epoch` (0-based).
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Step => cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_epochs) as i32),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub momentum: f64,
    /// Updates applied so far.
    pub steps: u64,
    /// Named moment buffers: `adam.m.*`, `adam.v.*` or `sgd.v.*`.
    pub state: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.momentum)
    }

    pub fn state_prefixes(&self) -> &'static [&'static str] {
        match self.kind {
            OptimizerKind::Adam => &["adam.m.", "adam.v."],
            OptimizerKind::Sgd => &["sgd.v."],
        }
    }

    fn buffer(&mut self, name: String, shape: &[usize]) -> &mut Tensor<T> {
        self.state.entry(name).or_insert_with(|| Tensor::zeros(shape))
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads {
            let p = store
                .value_mut(name)
                .ok_or_else(|| Error::ConfigInvalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", &[p.shape(), g.shape()]));
            }
            match self.kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
                    let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
                    let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
                    let (lr, eps) = (T::from_f64(lr), T::from_f64(ADAM_EPS));
                    let shape = p.shape().to_vec();
                    let (mk, vk) = (format!("adam.m.{name}"), format!("adam.v.{name}"));
                    let mut m = self.state.remove(&mk).unwrap_or_else(|| Tensor::zeros(&shape));
                    let v = self.buffer(vk, &shape);
                    for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                    self.state.insert(mk, m);
                }
                OptimizerKind::Sgd => {
                    let lr = T::from_f64(lr);
                    if self.momentum == 0.0 {
                        for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                            *x -= lr * gi;
                        }
                    } else {
                        let mu = T::from_f64(self.momentum);
                        let shape = p.shape().to_vec();
                        let v = self.buffer(format!("sgd.v.{name}"), &shape);
                        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                            *vi = mu * *vi + gi;
                            *x -= lr * *vi;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), true).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_f64(&[2], &[0.5, -3.0]).unwrap());
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 0.0);
        opt.step(&mut store, &grads, 1e-3).unwrap();
        let w = store.value("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(opt.state.len(), 2);
    }

    #[test]
    fn sgd_with_momentum() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64(&[1], &[0.0]).unwrap(), true).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_f64(&[1], &[1.0]).unwrap());
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.5);
        opt.step(&mut store, &grads, 0.1).unwrap();
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.value("w").unwrap().data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_decay() {
        let mut c = TrainConfig::default();
        c.lr_schedule = LrSchedule::Step;
        c.lr_decay_epochs = 2;
        c.lr_decay_factor = 0.5;
        assert_eq!(learning_rate(&c, 1), 1e-3);
        assert_eq!(learning_rate(&c, 2), 5e-4);
    }
}
