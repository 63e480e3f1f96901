//! Layers: thin structs that register parameters at construction and replay
//! themselves through a [`Binding`] at forward time.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::{kaiming_normal, Binding, Mode, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    stride: (usize, usize),
    pad: (usize, usize),
    bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1;
        store.add_param(
            &format!("{name}.weight"),
            kaiming_normal(rng, &[out_ch, in_ch, kernel.0, kernel.1], fan_in),
        )?;
        if bias {
            store.add_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])))?;
        }
        Ok(Self { name: name.to_string(), stride, pad, bias })
    }

    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        let w = b.param(&format!("{}.weight", self.name))?;
        let bias = if self.bias { Some(b.param(&format!("{}.bias", self.name))?) } else { None };
        x.conv2d(&w, bias.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    name: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        store.add_param(&format!("{name}.weight"), ArrayD::from_elem(IxDyn(&[ch]), 1.0))?;
        store.add_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[ch])))?;
        store.add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[ch])))?;
        store.add_buffer(&format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[ch]), 1.0))?;
        Ok(Self {
            name: name.to_string(),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        let gamma = b.param(&format!("{}.weight", self.name))?;
        let beta = b.param(&format!("{}.bias", self.name))?;
        match b.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm2d_train(&gamma, &beta, self.eps)?;
                b.push_bn_stats(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let rm = b.buffer_1d(&format!("{}.running_mean", self.name))?;
                let rv = b.buffer_1d(&format!("{}.running_var", self.name))?;
                x.batch_norm2d_eval(&gamma, &beta, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    bias: bool,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        store.add_param(
            &format!("{name}.weight"),
            kaiming_normal(rng, &[out_features, in_features], in_features),
        )?;
        if bias {
            store.add_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_features])))?;
        }
        Ok(Self { name: name.to_string(), bias })
    }

    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        let w = b.param(&format!("{}.weight", self.name))?;
        let bias = if self.bias { Some(b.param(&format!("{}.bias", self.name))?) } else { None };
        x.linear(&w, bias.as_ref())
    }
}

/// Conv (bias-free) → BatchNorm → ReLU, the workhorse block everywhere.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let conv =
            Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, false)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(b, x)?;
        let y = self.bn.forward(b, &y)?;
        Ok(y.relu())
    }

    /// Access to the stages, for callers that trace intermediates.
    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn bn(&self) -> &BatchNorm2d {
        &self.bn
    }
}
