//! Optimizers. State is keyed by parameter name so it survives
//! checkpointing and never depends on tape identities.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::ParamStore;
use crate::error::Result;
use crate::tensor::{ArrayDyn, Gradients, Tensor};

/// SGD with Nesterov momentum and decoupled-from-nothing L2 weight decay:
///
/// ```text
/// g  = grad + wd * θ
/// v  = μ v + g          (v initialized to g on first use)
/// θ -= lr * (g + μ v)
/// ```
#[derive(Debug, Clone)]
pub struct SgdNesterov {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, ArrayDyn>,
}

impl SgdNesterov {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: IndexMap::new() }
    }

    /// Update every store parameter that received a gradient this pass.
    /// `bound` is the name → tape-tensor map captured from the binding.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bound: &HashMap<String, Tensor>,
        grads: &Gradients,
    ) -> Result<()> {
        let names: Vec<String> = store.param_names().map(str::to_string).collect();
        for name in names {
            let Some(t) = bound.get(&name) else { continue };
            if !grads.has_grad(t) {
                continue;
            }
            let grad = grads.wrt(t);
            let theta = store.param(&name)?.clone();
            let mut g = grad;
            if self.weight_decay != 0.0 {
                g = g + &(&theta * self.weight_decay);
            }
            let update = if self.momentum != 0.0 {
                let v = match self.velocity.get_mut(&name) {
                    Some(v) => {
                        v.zip_mut_with(&g, |vi, &gi| *vi = *vi * self.momentum + gi);
                        v.clone()
                    }
                    None => {
                        self.velocity.insert(name.clone(), g.clone());
                        g.clone()
                    }
                };
                g + &(&v * self.momentum)
            } else {
                g
            };
            store.set_param(&name, theta - &(&update * self.lr))?;
        }
        Ok(())
    }

    pub fn velocity_entries(&self) -> impl Iterator<Item = (&str, &ArrayDyn)> {
        self.velocity.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn restore_velocity(&mut self, name: &str, value: ArrayDyn) {
        self.velocity.insert(name.to_string(), value);
    }
}

struct AdamSlot {
    m: ArrayDyn,
    v: ArrayDyn,
    t: u64,
}

/// Adam with bias correction, no weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: IndexMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, slots: IndexMap::new() }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bound: &HashMap<String, Tensor>,
        grads: &Gradients,
    ) -> Result<()> {
        let names: Vec<String> = store.param_names().map(str::to_string).collect();
        for name in names {
            let Some(t) = bound.get(&name) else { continue };
            if !grads.has_grad(t) {
                continue;
            }
            let g = grads.wrt(t);
            let theta = store.param(&name)?.clone();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: ArrayDyn::zeros(g.raw_dim()),
                v: ArrayDyn::zeros(g.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            slot.m.zip_mut_with(&g, |mi, &gi| *mi = *mi * self.beta1 + gi * (1.0 - self.beta1));
            slot.v.zip_mut_with(&g, |vi, &gi| *vi = *vi * self.beta2 + gi * gi * (1.0 - self.beta2));
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let mut update = slot.m.clone();
            let v = &slot.v;
            let (lr, eps) = (self.lr, self.eps);
            update.zip_mut_with(v, |mi, &vi| {
                let mhat = *mi / bc1;
                let vhat = vi / bc2;
                *mi = lr * mhat / (vhat.sqrt() + eps);
            });
            store.set_param(&name, theta - &update)?;
        }
        Ok(())
    }

    pub fn slot_entries(&self) -> impl Iterator<Item = (&str, &ArrayDyn, &ArrayDyn, u64)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.m, &s.v, s.t))
    }

    pub fn restore_slot(&mut self, name: &str, m: ArrayDyn, v: ArrayDyn, t: u64) {
        self.slots.insert(name.to_string(), AdamSlot { m, v, t });
    }
}
