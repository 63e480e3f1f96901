//! 2-d convolution via im2col + GEMM.

use ndarray::{Array2, Array4, ArrayView4, Axis, IxDyn};

use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one sample `[Ci,H,W]` into `[Ci*KH*KW, OH*OW]` columns.
fn im2col(
    x: &ArrayView4<'_, f64>,
    n: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<f64> {
    let (_, ci, h, w) = x.dim();
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (oh, ow) = out;
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(n, c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold `[Ci*KH*KW, OH*OW]` column gradients back onto one input sample.
fn col2im_accumulate(
    dcols: &Array2<f64>,
    dx: &mut Array4<f64>,
    n: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) {
    let (_, ci, h, w) = dx.dim();
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (oh, ow) = out;
    for c in 0..ci {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dy) * kw + dxk;
                for oy in 0..oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + dxk) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(n, c, iy as usize, ix as usize)] += dcols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
}

struct Conv2dBack {
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    has_bias: bool,
}

impl BackwardOp for Conv2dBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
        let wv = inputs[1];
        let g = grad.view().into_dimensionality::<ndarray::Ix4>().expect("grad 4d");
        let (batch, _, oh, ow) = g.dim();
        let co = wv.shape()[0];
        let ci_khkw: usize = wv.shape()[1] * wv.shape()[2] * wv.shape()[3];
        let w2 = wv
            .view()
            .into_shape((co, ci_khkw))
            .expect("weight reshape");

        let mut dw = Array2::<f64>::zeros((co, ci_khkw));
        let mut dx = Array4::<f64>::zeros(x.dim());
        for n in 0..batch {
            let cols = im2col(&x, n, self.kernel, self.stride, self.pad, (oh, ow));
            let gn = g
                .index_axis(Axis(0), n)
                .into_shape((co, oh * ow))
                .expect("grad reshape");
            dw += &gn.dot(&cols.t());
            let dcols = w2.t().dot(&gn);
            col2im_accumulate(&dcols, &mut dx, n, self.kernel, self.stride, self.pad, (oh, ow));
        }
        let dw = dw
            .into_shape(IxDyn(wv.shape()))
            .expect("dw reshape");
        let mut grads = vec![dx.into_dyn(), dw];
        if self.has_bias {
            let mut db = ndarray::Array1::<f64>::zeros(co);
            for n in 0..batch {
                for c in 0..co {
                    db[c] += g.index_axis(Axis(0), n).index_axis(Axis(0), c).sum();
                }
            }
            grads.push(db.into_dyn());
        }
        grads
    }
}

impl Tensor {
    /// `self`: `[N,Ci,H,W]`, `weight`: `[Co,Ci,KH,KW]`, optional `bias`: `[Co]`.
    /// Zero padding, floor output arithmetic.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Tensor> {
        self.same_tape(weight, "conv2d")?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("want 4-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} do not match weight channels {}", xs[1], ws[1]),
            ));
        }
        let (kh, kw) = (ws[2], ws[3]);
        let oh = conv_out_len(xs[2], kh, stride.0, pad.0).ok_or_else(|| {
            Error::shape("conv2d", format!("height {} too small for kernel {kh}", xs[2]))
        })?;
        let ow = conv_out_len(xs[3], kw, stride.1, pad.1).ok_or_else(|| {
            Error::shape("conv2d", format!("width {} too small for kernel {kw}", xs[3]))
        })?;
        if let Some(b) = bias {
            self.same_tape(b, "conv2d")?;
            if b.shape() != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", b.shape(), ws[0]),
                ));
            }
        }

        let (batch, co) = (xs[0], ws[0]);
        let mut out = Array4::<f64>::zeros((batch, co, oh, ow));
        self.with_value(|xv| {
            weight.with_value(|wv| {
                let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
                let w2 = wv
                    .view()
                    .into_shape((co, ws[1] * kh * kw))
                    .expect("weight reshape");
                for n in 0..batch {
                    let cols = im2col(&x4, n, (kh, kw), stride, pad, (oh, ow));
                    let prod = w2.dot(&cols);
                    out.index_axis_mut(Axis(0), n)
                        .assign(&prod.into_shape((co, oh, ow)).expect("out reshape"));
                }
            });
        });
        if let Some(b) = bias {
            b.with_value(|bv| {
                for c in 0..co {
                    let add = bv[[c]];
                    out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + add);
                }
            });
        }

        let back = Box::new(Conv2dBack {
            kernel: (kh, kw),
            stride,
            pad,
            has_bias: bias.is_some(),
        });
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::nary_op(&parents, out.into_dyn(), back))
    }
}
