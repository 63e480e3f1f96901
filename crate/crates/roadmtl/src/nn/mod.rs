//! Parameter management and layer building blocks.
//!
//! Networks keep their weights in a [`ParamStore`] (plain arrays, stable
//! insertion order). Each forward pass opens a fresh tape and a [`Binding`]
//! that lazily lifts parameters onto it; binding the same name twice yields
//! the same tape node, so gradients accumulate across shared uses (e.g. one
//! network applied to both the source and the target batch).

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{ArrayDyn, BatchNormStats, Tape, Tensor};

mod layers;
pub mod optim;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, Linear};
pub use optim::{Adam, SgdNesterov};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameters (trained) and buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, ArrayDyn>,
    buffers: IndexMap<String, ArrayDyn>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: ArrayDyn) -> Result<()> {
        if self.params.insert(name.to_string(), value).is_some() {
            return Err(Error::contract("param_store", format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayDyn) -> Result<()> {
        if self.buffers.insert(name.to_string(), value).is_some() {
            return Err(Error::contract("param_store", format!("duplicate buffer {name}")));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&ArrayDyn> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&ArrayDyn> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown buffer {name}")))
    }

    /// Overwrite a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: ArrayDyn) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("parameter {name}: {:?} -> {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayDyn) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown buffer {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("buffer {name}: {:?} -> {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Fold one training-mode batch-norm result into the running statistics:
    /// `running(1 - momentum) + batch * momentum`, unbiased variance.
    pub fn apply_bn_update(&mut self, prefix: &str, stats: &BatchNormStats, momentum: f64) -> Result<()> {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let unbiased = stats.var_unbiased();
        {
            let rm = self.buffers.get_mut(&mean_name).ok_or_else(|| {
                Error::contract("param_store", format!("unknown buffer {mean_name}"))
            })?;
            for (r, &m) in rm.iter_mut().zip(stats.mean.iter()) {
                *r = *r * (1.0 - momentum) + m * momentum;
            }
        }
        let rv = self
            .buffers
            .get_mut(&var_name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown buffer {var_name}")))?;
        for (r, &v) in rv.iter_mut().zip(unbiased.iter()) {
            *r = *r * (1.0 - momentum) + v * momentum;
        }
        Ok(())
    }
}

/// Per-forward-pass view of a store on a tape.
pub struct Binding<'a> {
    store: &'a ParamStore,
    tape: &'a Tape,
    mode: Mode,
    trainable: bool,
    bound: RefCell<HashMap<String, Tensor>>,
    pending_bn: RefCell<Vec<(String, BatchNormStats)>>,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, tape: &'a Tape, mode: Mode) -> Self {
        Self {
            store,
            tape,
            mode,
            trainable: true,
            bound: RefCell::new(HashMap::new()),
            pending_bn: RefCell::new(Vec::new()),
        }
    }

    /// Parameters enter the tape as constants: values are used, gradients do
    /// not flow into them. For running a network frozen (e.g. the
    /// discriminator inside the generator update).
    pub fn frozen(store: &'a ParamStore, tape: &'a Tape, mode: Mode) -> Self {
        let mut b = Self::new(store, tape, mode);
        b.trainable = false;
        b
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let value = self.store.param(name)?.clone();
        let t = if self.trainable { self.tape.var(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn buffer_1d(&self, name: &str) -> Result<Array1<f64>> {
        let v = self.store.buffer(name)?;
        v.view()
            .into_dimensionality::<ndarray::Ix1>()
            .map(|a| a.to_owned())
            .map_err(|_| Error::shape("binding", format!("buffer {name} is not 1-d")))
    }

    /// Tensor previously lifted by `param`, if any — used by optimizers to
    /// look up gradients for exactly the parameters touched this pass.
    pub fn bound_param(&self, name: &str) -> Option<Tensor> {
        self.bound.borrow().get(name).cloned()
    }

    /// Snapshot of every parameter bound so far. Lets the caller drop the
    /// binding (releasing the store borrow) before the optimizer mutates
    /// the store.
    pub fn bound_map(&self) -> HashMap<String, Tensor> {
        self.bound.borrow().clone()
    }

    pub(crate) fn push_bn_stats(&self, prefix: &str, stats: BatchNormStats) {
        self.pending_bn.borrow_mut().push((prefix.to_string(), stats));
    }

    /// Drain the batch-norm statistics recorded during this pass, in forward
    /// order. Callers fold them into the store after the optimizer step.
    pub fn take_bn_updates(&self) -> Vec<(String, BatchNormStats)> {
        std::mem::take(&mut self.pending_bn.borrow_mut())
    }
}

/// Kaiming-normal fan-in initialization: `N(0, sqrt(2 / fan_in))`.
pub fn kaiming_normal(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayDyn {
    use rand::Rng;
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller on uniform draws keeps the byte stream consumption simple
    // and platform-independent.
    let mut vals = Vec::with_capacity(n);
    while vals.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        vals.push(r * theta.cos() * std);
        if vals.len() < n {
            vals.push(r * theta.sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape/product mismatch")
}
