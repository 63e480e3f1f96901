//! Bilinear resize (half-pixel corner alignment, edge clamped).

use ndarray::{Array2, Array4, ArrayView2};

use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

/// For each destination index, the two source indices and the weight of
/// the lower one. Source coordinate is `(dst + 0.5) * in/out - 0.5`.
fn axis_lerp(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac)
        })
        .collect()
}

/// Resize a single `[H,W]` plane; shared by the autodiff op and image I/O.
pub fn bilinear_resize_plane(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows = axis_lerp(h, out_h);
    let cols = axis_lerp(w, out_w);
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
            let top = src[(y0, x0)] * wx + src[(y0, x1)] * (1.0 - wx);
            let bot = src[(y1, x0)] * wx + src[(y1, x1)] * (1.0 - wx);
            out[(oy, ox)] = top * wy + bot * (1.0 - wy);
        }
    }
    out
}

struct BilinearBack {
    out_h: usize,
    out_w: usize,
}

impl BackwardOp for BilinearBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let xs = inputs[0].shape();
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = axis_lerp(h, self.out_h);
        let cols = axis_lerp(w, self.out_w);
        let g = grad.view().into_dimensionality::<ndarray::Ix4>().expect("grad 4d");
        let mut dx = Array4::<f64>::zeros((batch, ch, h, w));
        for n in 0..batch {
            for c in 0..ch {
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let gv = g[(n, c, oy, ox)];
                        dx[(n, c, y0, x0)] += gv * wy * wx;
                        dx[(n, c, y0, x1)] += gv * wy * (1.0 - wx);
                        dx[(n, c, y1, x0)] += gv * (1.0 - wy) * wx;
                        dx[(n, c, y1, x1)] += gv * (1.0 - wy) * (1.0 - wx);
                    }
                }
            }
        }
        vec![dx.into_dyn()]
    }
}

impl Tensor {
    /// Bilinear resize of `[N,C,H,W]` to `(out_h, out_w)`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("want 4-d input, got {xs:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output size must be positive"));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let mut out = Array4::<f64>::zeros((batch, ch, out_h, out_w));
        self.with_value(|xv| {
            let x = xv.view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
            for n in 0..batch {
                for c in 0..ch {
                    let plane = bilinear_resize_plane(
                        x.index_axis(ndarray::Axis(0), n).index_axis(ndarray::Axis(0), c),
                        out_h,
                        out_w,
                    );
                    out.index_axis_mut(ndarray::Axis(0), n)
                        .index_axis_mut(ndarray::Axis(0), c)
                        .assign(&plane);
                }
            }
        });
        Ok(self.unary_op(out.into_dyn(), Box::new(BilinearBack { out_h, out_w })))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{central_difference, Tape};
    use super::*;
    use ndarray::{arr2, ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity_when_sizes_match() {
        let src = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let out = bilinear_resize_plane(src.view(), 2, 2);
        assert_eq!(out, src);
    }

    #[test]
    fn doubling_uses_half_pixel_centres() {
        // Upsampling [a, b] to length 4 with half-pixel alignment gives
        // samples at src coords -0.25, 0.25, 0.75, 1.25 (clamped).
        let src = arr2(&[[0.0, 1.0]]);
        let out = bilinear_resize_plane(src.view(), 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn downsampling_averages_neighbourhoods() {
        // 4 -> 2 with scale 2: src coords 0.5 and 2.5, exact midpoints.
        let src = arr2(&[[0.0, 2.0, 4.0, 6.0]]);
        let out = bilinear_resize_plane(src.view(), 1, 2);
        assert!((out[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((out[(0, 1)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let x0 = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 3, 4]),
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let loss = |xv: &ArrayDyn| -> f64 {
            let tape = Tape::new();
            let x = tape.var(xv.clone());
            x.bilinear_resize(5, 7).unwrap().square().mean_all().scalar_value()
        };
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = x.bilinear_resize(5, 7).unwrap().square().mean_all();
        let grads = tape.backward(&y).unwrap();
        let gx = grads.wrt(&x);
        for idx in [0usize, 5, 11, 17, 23] {
            let fd = central_difference(&loss, &x0, idx, 1e-6);
            assert!((gx.as_slice().unwrap()[idx] - fd).abs() < 1e-8);
        }
    }
}
