use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over a fixed, named set of variables. Variables absent from the
/// gradient store are left untouched and their moments are not advanced.
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            steps: 0,
            slots,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((slot.m.affine(b1, 0.0))? + g.affine(1.0 - b1, 0.0)?)?;
            let v = ((slot.v.affine(b2, 0.0))? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let update = m
                .affine(1.0 / bc1, 0.0)?
                .div(&(v.affine(1.0 / bc2, 0.0)?.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - update.affine(lr, 0.0)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` for every slot.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.slots
            .iter()
            .map(|s| (s.name.as_str(), &s.m, &s.v))
    }

    pub fn restore(&mut self, steps: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for slot in &mut self.slots {
            let (m, v) = lookup(&slot.name).ok_or_else(|| {
                Error::InvalidArgument(format!("missing optimizer state for {}", slot.name))
            })?;
            if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::shape("optimizer state", slot.var.dims(), m.dims()));
            }
            slot.m = m.to_dtype(slot.var.dtype())?;
            slot.v = v.to_dtype(slot.var.dtype())?;
        }
        self.steps = steps;
        Ok(())
    }
}
