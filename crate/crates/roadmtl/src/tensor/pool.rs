//! Max pooling with saved argmax for the backward pass.

use ndarray::Array4;

use super::conv::conv_out_len;
use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

struct MaxPoolBack {
    /// Flat input index chosen per output element, in output iteration order.
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPoolBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let mut dx = ArrayDyn::zeros(inputs[0].raw_dim());
        let dx_flat = dx.as_slice_mut().expect("contiguous input grad");
        for (g, &src) in grad.iter().zip(self.argmax.iter()) {
            dx_flat[src] += *g;
        }
        vec![dx]
    }
}

impl Tensor {
    /// Unpadded max pooling over `[N,C,H,W]`. Ties resolve to the
    /// first element in row-major window order.
    pub fn max_pool2d(&self, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("want 4-d input, got {xs:?}")));
        }
        let (kh, kw) = kernel;
        let oh = conv_out_len(xs[2], kh, stride.0, 0).ok_or_else(|| {
            Error::shape("max_pool2d", format!("height {} too small for window {kh}", xs[2]))
        })?;
        let ow = conv_out_len(xs[3], kw, stride.1, 0).ok_or_else(|| {
            Error::shape("max_pool2d", format!("width {} too small for window {kw}", xs[3]))
        })?;

        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Array4::<f64>::zeros((batch, ch, oh, ow));
        let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
        self.with_value(|xv| {
            let x = xv.as_slice().expect("contiguous input");
            for n in 0..batch {
                for c in 0..ch {
                    let base = (n * ch + c) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..kh {
                                let iy = oy * stride.0 + dy;
                                for dx in 0..kw {
                                    let ix = ox * stride.1 + dx;
                                    let idx = base + iy * w + ix;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[(n, c, oy, ox)] = best;
                            argmax.push(best_idx);
                        }
                    }
                }
            }
        });
        Ok(self.unary_op(out.into_dyn(), Box::new(MaxPoolBack { argmax })))
    }
}
