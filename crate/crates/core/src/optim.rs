use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A learnable (or frozen) tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    value: Tensor<T>,
    gradient: Tensor<T>,
    pub trainable: bool,
    velocity: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let gradient = Tensor::zeros(value.shape().to_vec());
        Parameter {
            value,
            gradient,
            trainable: true,
            velocity: None,
        }
    }

    /// A buffer that is saved with the model but never updated by the optimizer.
    pub fn frozen(value: Tensor<T>) -> Self {
        Parameter {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn gradient(&self) -> &Tensor<T> {
        &self.gradient
    }

    /// Replaces the value, keeping the shape (and therefore the gradient shape) fixed.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        self.value.expect_same_shape(&value, "Parameter::set_value")?;
        self.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        self.gradient.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Learning-rate multiplier that takes effect from `epoch` onward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Vec<LrStep>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Base rate times the multiplier of the latest schedule entry at or before `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let multiplier = self
            .schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .max_by_key(|s| s.epoch)
            .map_or(1.0, |s| s.multiplier);
        self.learning_rate * multiplier
    }
}

/// One SGD update at `epoch`:
/// `v <- momentum * v + (grad + decay * value)`, `value <- value - lr * v`.
/// With zero momentum this is `value <- value - lr * (grad + decay * value)`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Parameter<T>], config: &SgdConfig, epoch: usize) {
    let lr = T::from_f64_lossy(config.lr_at(epoch));
    let mu = T::from_f64_lossy(config.momentum);
    let decay = T::from_f64_lossy(config.weight_decay);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let Parameter {
            value,
            gradient,
            velocity,
            ..
        } = &mut **p;
        if config.momentum > 0.0 {
            let v = velocity.get_or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            for ((w, &g), vel) in value
                .data_mut()
                .iter_mut()
                .zip(gradient.data())
                .zip(v.data_mut())
            {
                *vel = mu * *vel + (g + decay * *w);
                *w = *w - lr * *vel;
            }
        } else {
            for (w, &g) in value.data_mut().iter_mut().zip(gradient.data()) {
                *w = *w - lr * (g + decay * *w);
            }
        }
    }
}
