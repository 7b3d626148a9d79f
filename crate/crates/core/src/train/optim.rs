use candle_core::backprop::GradStore;
use candle_core::Tensor;
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `lr0 * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("poly schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} is past the schedule end {total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// SGD with heavy-ball momentum: `d = g + wd * w`, `buf = mu * buf + d`
/// (`buf = d` on first use), `w -= lr * buf`. Weight decay applies only to
/// parameters whose kind decays.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: IndexMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: IndexMap::new(),
        }
    }

    /// Names of trainable parameters with and without weight decay.
    pub fn decay_groups(store: &ParamStore) -> (Vec<String>, Vec<String>) {
        let (mut decay, mut plain) = (Vec::new(), Vec::new());
        for (name, p) in store.trainable() {
            if p.kind.decays() {
                decay.push(name.to_string());
            } else {
                plain.push(name.to_string());
            }
        }
        (decay, plain)
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, p) in store.trainable() {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let w = p.var.as_tensor();
            let mut d = g.clone();
            if p.kind.decays() && self.weight_decay != 0.0 {
                d = (d + (w * self.weight_decay)?)?;
            }
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + d)?,
                _ => d,
            };
            p.var.set(&(w - (&buf * lr)?)?)?;
            self.buffers.insert(name.to_string(), buf);
        }
        Ok(())
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor) {
        self.buffers.insert(name.to_string(), t);
    }
}
