use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

use super::GradientSet;

/// Momentum SGD: `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
///
/// Velocity buffers live in a [`ParameterStore`] keyed like the parameters, so
/// channel surgery can slice them with the same plan as the model.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    weight_decay: T,
    velocity: ParameterStore<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        Self::with_weight_decay(lr, momentum, 0.0)
    }

    pub fn with_weight_decay(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        Ok(Self {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            velocity: ParameterStore::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.to_f64_lossy()
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = T::from_f64_lossy(lr);
        Ok(())
    }

    pub fn velocity(&self) -> &ParameterStore<T> {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.velocity
    }

    pub fn replace_velocity(&mut self, v: ParameterStore<T>) {
        self.velocity = v;
    }

    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &GradientSet<T>) -> Result<()> {
        for (name, g) in &grads.params {
            let w = params.get_mut(name)?;
            if w.shape() != g.shape() {
                return Err(Error::structural(name, "gradient and parameter shapes differ"));
            }
            if !self.velocity.contains(name) || self.velocity.get(name)?.shape() != w.shape() {
                self.velocity.insert(name.clone(), Tensor::zeros(w.shape().to_vec()));
            }
            let v = self.velocity.get_mut(name)?;
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *wv;
                *wv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
