//! Adam over named store variables, with per-variable first/second moment
//! state and bias correction. Variables absent from a step's gradient store
//! are left untouched (their moments do not advance either).

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<Slot>,
}

struct Slot {
    var: Var,
    step: u64,
    m: Tensor,
    v: Tensor,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        let mut slots = Vec::with_capacity(vars.len());
        for (_, var) in vars {
            let m = var.as_tensor().zeros_like()?;
            let v = var.as_tensor().zeros_like()?;
            slots.push(Slot { var, step: 0, m, v });
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update; returns how many variables received gradients.
    pub fn step(&mut self, grads: &GradStore) -> Result<usize> {
        let mut updated = 0;
        for slot in &mut self.slots {
            let Some(grad) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.step += 1;
            let t = slot.step as i32;
            slot.m = ((&slot.m * self.beta1)? + (grad * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&slot.m / (1.0 - self.beta1.powi(t)))?;
            let v_hat = (&slot.v / (1.0 - self.beta2.powi(t)))?;
            let delta = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            slot.var.set(&(slot.var.as_tensor() - delta)?)?;
            updated += 1;
        }
        Ok(updated)
    }
}
