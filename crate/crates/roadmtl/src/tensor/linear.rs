//! Fully connected layer: `y = x · Wᵀ + b`.

use ndarray::Array1;

use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

struct LinearBack {
    has_bias: bool,
}

impl BackwardOp for LinearBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix2>().expect("x 2d");
        let w = inputs[1].view().into_dimensionality::<ndarray::Ix2>().expect("w 2d");
        let g = grad.view().into_dimensionality::<ndarray::Ix2>().expect("grad 2d");
        let dx = g.dot(&w);
        let dw = g.t().dot(&x);
        let mut grads = vec![dx.into_dyn(), dw.into_dyn()];
        if self.has_bias {
            let mut db = Array1::<f64>::zeros(w.dim().0);
            for row in g.rows() {
                db += &row;
            }
            grads.push(db.into_dyn());
        }
        grads
    }
}

impl Tensor {
    /// `self`: `[N,F]`, `weight`: `[O,F]`, optional `bias`: `[O]` → `[N,O]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        self.same_tape(weight, "linear")?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("want 2-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input features {} do not match weight features {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = bias {
            self.same_tape(b, "linear")?;
            if b.shape() != [ws[0]] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match {} outputs", b.shape(), ws[0]),
                ));
            }
        }

        let mut out = ndarray::Array2::<f64>::zeros((xs[0], ws[0]));
        self.with_value(|xv| {
            weight.with_value(|wv| {
                let x = xv.view().into_dimensionality::<ndarray::Ix2>().expect("x 2d");
                let w = wv.view().into_dimensionality::<ndarray::Ix2>().expect("w 2d");
                out = x.dot(&w.t());
            });
        });
        if let Some(b) = bias {
            b.with_value(|bv| {
                let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("b 1d");
                for mut row in out.rows_mut() {
                    row += &b1;
                }
            });
        }

        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::nary_op(&parents, out.into_dyn(), Box::new(LinearBack { has_bias: bias.is_some() })))
    }
}
