//! Pointwise ops, reductions and the two fused loss kernels.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct AddBack;
impl BackwardOp for AddBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        vec![grad.clone(), grad.clone()]
    }
}

struct SubBack;
impl BackwardOp for SubBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        vec![grad.clone(), grad.mapv(|g| -g)]
    }
}

struct MulBack;
impl BackwardOp for MulBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        vec![grad * inputs[1], grad * inputs[0]]
    }
}

struct ScaleBack(f64);
impl BackwardOp for ScaleBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        vec![grad.mapv(|g| g * self.0)]
    }
}

struct IdentityBack;
impl BackwardOp for IdentityBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        vec![grad.clone()]
    }
}

struct ReluBack;
impl BackwardOp for ReluBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |g, &x| {
            if x <= 0.0 {
                *g = 0.0;
            }
        });
        vec![g]
    }
}

struct LeakyReluBack(f64);
impl BackwardOp for LeakyReluBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let slope = self.0;
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |g, &x| {
            if x <= 0.0 {
                *g *= slope;
            }
        });
        vec![g]
    }
}

struct SigmoidBack;
impl BackwardOp for SigmoidBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut g = grad.clone();
        g.zip_mut_with(out, |g, &y| *g *= y * (1.0 - y));
        vec![g]
    }
}

struct SquareBack;
impl BackwardOp for SquareBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |g, &x| *g *= 2.0 * x);
        vec![g]
    }
}

struct LnBack;
impl BackwardOp for LnBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |g, &x| *g /= x);
        vec![g]
    }
}

struct ClampBack {
    lo: f64,
    hi: f64,
}
impl BackwardOp for ClampBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |g, &x| {
            if x < self.lo || x > self.hi {
                *g = 0.0;
            }
        });
        vec![g]
    }
}

struct MulGateBack;
impl BackwardOp for MulGateBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0];
        let gate = inputs[1];
        let gb = gate.broadcast(x.raw_dim()).expect("gate broadcast");
        let dx = grad * &gb;
        // d gate: sum of grad * x over the channel axis, keeping the singleton axis.
        let mut dgate = (grad * x).sum_axis(Axis(1));
        dgate.insert_axis_inplace(Axis(1));
        vec![dx, dgate]
    }
}

struct ReshapeBack {
    from: Vec<usize>,
}
impl BackwardOp for ReshapeBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let flat = grad.iter().cloned().collect::<Vec<_>>();
        vec![ArrayD::from_shape_vec(IxDyn(&self.from), flat).expect("reshape grad")]
    }
}

struct ConcatChannelsBack {
    channels: Vec<usize>,
}
impl BackwardOp for ConcatChannelsBack {
    fn backward(&self, grad: &ArrayDyn, _inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut out = Vec::with_capacity(self.channels.len());
        let mut start = 0isize;
        for &c in &self.channels {
            let part = grad
                .slice_axis(Axis(1), Slice::new(start, Some(start + c as isize), 1))
                .to_owned();
            out.push(part);
            start += c as isize;
        }
        out
    }
}

struct SumAllBack;
impl BackwardOp for SumAllBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let g = grad.iter().next().copied().unwrap_or(0.0);
        vec![ArrayDyn::from_elem(inputs[0].raw_dim(), g)]
    }
}

struct MeanAllBack;
impl BackwardOp for MeanAllBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let n = inputs[0].len() as f64;
        let g = grad.iter().next().copied().unwrap_or(0.0) / n;
        vec![ArrayDyn::from_elem(inputs[0].raw_dim(), g)]
    }
}

struct BceWithLogitsBack {
    target: ArrayDyn,
    pos_weight: f64,
}
impl BackwardOp for BceWithLogitsBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0];
        let n = x.len() as f64;
        let g0 = grad.iter().next().copied().unwrap_or(0.0) / n;
        let w = self.pos_weight;
        let mut dx = x.clone();
        dx.zip_mut_with(&self.target, |d, &t| {
            let s = sigmoid_scalar(*d);
            *d = g0 * (-w * t * (1.0 - s) + (1.0 - t) * s);
        });
        vec![dx]
    }
}

struct MseBack {
    target: ArrayDyn,
}
impl BackwardOp for MseBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let n = inputs[0].len() as f64;
        let g0 = grad.iter().next().copied().unwrap_or(0.0) / n;
        let mut dx = inputs[0].clone();
        dx.zip_mut_with(&self.target, |d, &t| *d = g0 * 2.0 * (*d - t));
        vec![dx]
    }
}

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        self.same_tape(other, op)?;
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let v = self.with_value(|a| other.with_value(|b| a + b));
        Ok(Tensor::nary_op(&[self, other], v, Box::new(AddBack)))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let v = self.with_value(|a| other.with_value(|b| a - b));
        Ok(Tensor::nary_op(&[self, other], v, Box::new(SubBack)))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let v = self.with_value(|a| other.with_value(|b| a * b));
        Ok(Tensor::nary_op(&[self, other], v, Box::new(MulBack)))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| x * c));
        self.unary_op(v, Box::new(ScaleBack(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| x + c));
        self.unary_op(v, Box::new(IdentityBack))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| x.max(0.0)));
        self.unary_op(v, Box::new(ReluBack))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| if x > 0.0 { x } else { slope * x }));
        self.unary_op(v, Box::new(LeakyReluBack(slope)))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.with_value(|a| a.mapv(sigmoid_scalar));
        self.unary_op(v, Box::new(SigmoidBack))
    }

    pub fn square(&self) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| x * x));
        self.unary_op(v, Box::new(SquareBack))
    }

    /// Natural log; caller is responsible for keeping inputs positive
    /// (compose with [`Tensor::clamp`]).
    pub fn ln(&self) -> Tensor {
        let v = self.with_value(|a| a.mapv(f64::ln));
        self.unary_op(v, Box::new(LnBack))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.with_value(|a| a.mapv(|x| x.clamp(lo, hi)));
        self.unary_op(v, Box::new(ClampBack { lo, hi }))
    }

    /// Multiply an `[N,C,H,W]` feature map by an `[N,1,H,W]` spatial gate.
    pub fn mul_gate(&self, gate: &Tensor) -> Result<Tensor> {
        self.same_tape(gate, "mul_gate")?;
        let (s, g) = (self.shape(), gate.shape());
        if s.len() != 4 || g.len() != 4 || g[1] != 1 || s[0] != g[0] || s[2] != g[2] || s[3] != g[3] {
            return Err(Error::shape(
                "mul_gate",
                format!("feature {s:?} incompatible with gate {g:?} (want [N,1,H,W])"),
            ));
        }
        let v = self.with_value(|a| gate.with_value(|gt| a * &gt.broadcast(a.raw_dim()).expect("broadcast")));
        Ok(Tensor::nary_op(&[self, gate], v, Box::new(MulGateBack)))
    }

    pub fn reshape(&self, to: &[usize]) -> Result<Tensor> {
        let n: usize = to.iter().product();
        if n != self.value_len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), to),
            ));
        }
        let from = self.shape().to_vec();
        let v = self.with_value(|a| {
            let flat: Vec<f64> = a.iter().cloned().collect();
            ArrayD::from_shape_vec(IxDyn(to), flat).expect("reshape")
        });
        Ok(self.unary_op(v, Box::new(ReshapeBack { from })))
    }

    /// Concatenate `[N,C_i,H,W]` maps along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_channels", "no inputs"));
        }
        let first = parts[0].shape();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("want 4-d maps, got {first:?}")));
        }
        for p in parts.iter().skip(1) {
            parts[0].same_tape(p, "concat_channels")?;
            let s = p.shape();
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("incompatible shapes {first:?} vs {s:?}"),
                ));
            }
        }
        let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total_c: usize = channels.iter().sum();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut out = ArrayD::zeros(IxDyn(&[n, total_c, h, w]));
        let mut start = 0isize;
        for p in parts {
            let c = p.shape()[1] as isize;
            p.with_value(|v| {
                out.slice_axis_mut(Axis(1), Slice::new(start, Some(start + c), 1))
                    .assign(v);
            });
            start += c;
        }
        Ok(Tensor::nary_op(parts, out, Box::new(ConcatChannelsBack { channels })))
    }

    pub fn sum_all(&self) -> Tensor {
        let v = self.with_value(|a| ArrayDyn::from_elem(IxDyn(&[]), a.sum()));
        self.unary_op(v, Box::new(SumAllBack))
    }

    pub fn mean_all(&self) -> Tensor {
        let v = self.with_value(|a| ArrayDyn::from_elem(IxDyn(&[]), a.sum() / a.len() as f64));
        self.unary_op(v, Box::new(MeanAllBack))
    }

    /// Mean binary cross entropy on logits with a positive-class weight.
    ///
    /// Per element: `w*t*softplus(-x) + (1-t)*softplus(x)`, averaged.
    pub fn bce_with_logits(&self, target: &ArrayDyn, pos_weight: f64) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", self.shape(), target.shape()),
            ));
        }
        let mut acc = 0.0;
        self.with_value(|x| {
            for (&xi, &ti) in x.iter().zip(target.iter()) {
                acc += pos_weight * ti * softplus_scalar(-xi) + (1.0 - ti) * softplus_scalar(xi);
            }
        });
        let v = ArrayDyn::from_elem(IxDyn(&[]), acc / target.len() as f64);
        Ok(self.unary_op(
            v,
            Box::new(BceWithLogitsBack {
                target: target.clone(),
                pos_weight,
            }),
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&self, target: &ArrayDyn) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", self.shape(), target.shape()),
            ));
        }
        if target.is_empty() {
            return Err(Error::contract("mse", "empty batch"));
        }
        let mut acc = 0.0;
        self.with_value(|x| {
            for (&xi, &ti) in x.iter().zip(target.iter()) {
                let d = xi - ti;
                acc += d * d;
            }
        });
        let v = ArrayDyn::from_elem(IxDyn(&[]), acc / target.len() as f64);
        Ok(self.unary_op(
            v,
            Box::new(MseBack {
                target: target.clone(),
            }),
        ))
    }
}
