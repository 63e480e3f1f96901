//! Batch normalization over `[N,C,H,W]`.

use ndarray::{Array1, Array4};

use super::{ArrayDyn, BackwardOp, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics produced by a training-mode forward pass.
/// `var` is the biased (population) variance used for normalization;
/// `count` is the number of elements behind each channel statistic, so the
/// caller can form the unbiased estimate for running-average updates.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

impl BatchNormStats {
    /// Unbiased variance (`count / (count - 1)` correction), the convention
    /// for running-variance updates.
    pub fn var_unbiased(&self) -> Array1<f64> {
        let n = self.count as f64;
        if self.count > 1 {
            &self.var * (n / (n - 1.0))
        } else {
            self.var.clone()
        }
    }
}

fn check_affine(op: &'static str, ch: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [ch] {
            return Err(Error::shape(
                op,
                format!("{name} shape {:?} does not match {ch} channels", t.shape()),
            ));
        }
    }
    Ok(())
}

struct BatchNormTrainBack {
    mean: Array1<f64>,
    invstd: Array1<f64>,
}

impl BackwardOp for BatchNormTrainBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
        let gamma = inputs[1];
        let g = grad.view().into_dimensionality::<ndarray::Ix4>().expect("grad 4d");
        let (batch, ch, h, w) = x.dim();
        let m = (batch * h * w) as f64;

        let mut dx = Array4::<f64>::zeros(x.dim());
        let mut dgamma = Array1::<f64>::zeros(ch);
        let mut dbeta = Array1::<f64>::zeros(ch);
        for c in 0..ch {
            let mu = self.mean[c];
            let istd = self.invstd[c];
            let gam = gamma[[c]];
            // Accumulate the channel reductions needed by the closed-form
            // training-mode gradient: sum(dxhat) and sum(dxhat * xhat).
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for n in 0..batch {
                for y in 0..h {
                    for xc in 0..w {
                        let gv = g[(n, c, y, xc)];
                        let xhat = (x[(n, c, y, xc)] - mu) * istd;
                        sum_dxhat += gv * gam;
                        sum_dxhat_xhat += gv * gam * xhat;
                        dgamma[c] += gv * xhat;
                        dbeta[c] += gv;
                    }
                }
            }
            for n in 0..batch {
                for y in 0..h {
                    for xc in 0..w {
                        let xhat = (x[(n, c, y, xc)] - mu) * istd;
                        let dxhat = g[(n, c, y, xc)] * gam;
                        dx[(n, c, y, xc)] =
                            istd * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                    }
                }
            }
        }
        vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
    }
}

struct BatchNormEvalBack {
    invstd: Array1<f64>,
    mean: Array1<f64>,
}

impl BackwardOp for BatchNormEvalBack {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], _out: &ArrayDyn) -> Vec<ArrayDyn> {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
        let gamma = inputs[1];
        let g = grad.view().into_dimensionality::<ndarray::Ix4>().expect("grad 4d");
        let (batch, ch, h, w) = x.dim();
        let mut dx = Array4::<f64>::zeros(x.dim());
        let mut dgamma = Array1::<f64>::zeros(ch);
        let mut dbeta = Array1::<f64>::zeros(ch);
        for c in 0..ch {
            let istd = self.invstd[c];
            let mu = self.mean[c];
            let gam = gamma[[c]];
            for n in 0..batch {
                for y in 0..h {
                    for xc in 0..w {
                        let gv = g[(n, c, y, xc)];
                        dx[(n, c, y, xc)] = gv * gam * istd;
                        dgamma[c] += gv * (x[(n, c, y, xc)] - mu) * istd;
                        dbeta[c] += gv;
                    }
                }
            }
        }
        vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
    }
}

impl Tensor {
    /// Training-mode batch norm: normalize with the batch's own mean and
    /// biased variance, then apply the affine transform. Returns the batch
    /// statistics so the caller can maintain running averages.
    pub fn batch_norm2d_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchNormStats)> {
        self.same_tape(gamma, "batch_norm2d_train")?;
        self.same_tape(beta, "batch_norm2d_train")?;
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm2d_train", format!("want 4-d input, got {xs:?}")));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        check_affine("batch_norm2d_train", ch, gamma, beta)?;
        let m = batch * h * w;
        if m == 0 {
            return Err(Error::shape("batch_norm2d_train", "empty batch"));
        }

        let mut mean = Array1::<f64>::zeros(ch);
        let mut var = Array1::<f64>::zeros(ch);
        let mut out = Array4::<f64>::zeros((batch, ch, h, w));
        self.with_value(|xv| {
            let x = xv.view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
            for c in 0..ch {
                let mut sum = 0.0;
                for n in 0..batch {
                    for y in 0..h {
                        for xc in 0..w {
                            sum += x[(n, c, y, xc)];
                        }
                    }
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for n in 0..batch {
                    for y in 0..h {
                        for xc in 0..w {
                            let d = x[(n, c, y, xc)] - mu;
                            sq += d * d;
                        }
                    }
                }
                mean[c] = mu;
                var[c] = sq / m as f64;
            }
            gamma.with_value(|gv| {
                beta.with_value(|bv| {
                    for c in 0..ch {
                        let istd = 1.0 / (var[c] + eps).sqrt();
                        for n in 0..batch {
                            for y in 0..h {
                                for xc in 0..w {
                                    out[(n, c, y, xc)] =
                                        gv[[c]] * (x[(n, c, y, xc)] - mean[c]) * istd + bv[[c]];
                                }
                            }
                        }
                    }
                });
            });
        });

        let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let back = Box::new(BatchNormTrainBack { mean: mean.clone(), invstd });
        let out = Tensor::nary_op(&[self, gamma, beta], out.into_dyn(), back);
        Ok((out, BatchNormStats { mean, var, count: m }))
    }

    /// Inference-mode batch norm: a fixed affine transform built from running
    /// statistics.
    pub fn batch_norm2d_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Result<Tensor> {
        self.same_tape(gamma, "batch_norm2d_eval")?;
        self.same_tape(beta, "batch_norm2d_eval")?;
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm2d_eval", format!("want 4-d input, got {xs:?}")));
        }
        let ch = xs[1];
        check_affine("batch_norm2d_eval", ch, gamma, beta)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::shape(
                "batch_norm2d_eval",
                format!(
                    "running stats lengths ({}, {}) do not match {ch} channels",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }

        let invstd = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let (batch, h, w) = (xs[0], xs[2], xs[3]);
        let mut out = Array4::<f64>::zeros((batch, ch, h, w));
        self.with_value(|xv| {
            let x = xv.view().into_dimensionality::<ndarray::Ix4>().expect("x 4d");
            gamma.with_value(|gv| {
                beta.with_value(|bv| {
                    for c in 0..ch {
                        for n in 0..batch {
                            for y in 0..h {
                                for xc in 0..w {
                                    out[(n, c, y, xc)] = gv[[c]]
                                        * (x[(n, c, y, xc)] - running_mean[c])
                                        * invstd[c]
                                        + bv[[c]];
                                }
                            }
                        }
                    }
                });
            });
        });
        let back = Box::new(BatchNormEvalBack { invstd, mean: running_mean.clone() });
        Ok(Tensor::nary_op(&[self, gamma, beta], out.into_dyn(), back))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{central_difference, Tape};
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_array(shape: &[usize], rng: &mut StdRng) -> ArrayDyn {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn train_output_is_normalized() {
        let mut rng = StdRng::seed_from_u64(21);
        let x0 = rand_array(&[4, 3, 5, 5], &mut rng);
        let tape = Tape::new();
        let x = tape.var(x0);
        let gamma = tape.var(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let beta = tape.var(ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let (y, stats) = x.batch_norm2d_train(&gamma, &beta, 1e-5).unwrap();
        let yv = y.value();
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        sum += yv[[n, c, i, j]];
                        sq += yv[[n, c, i, j]] * yv[[n, c, i, j]];
                    }
                }
            }
            let m = 100.0;
            assert!((sum / m).abs() < 1e-10);
            assert!((sq / m - 1.0).abs() < 1e-4); // eps keeps it slightly under 1
        }
        assert_eq!(stats.count, 100);
        // unbiased correction is m/(m-1)
        let ratio = stats.var_unbiased()[0] / stats.var[0];
        assert!((ratio - 100.0 / 99.0).abs() < 1e-12);
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(22);
        let x0 = rand_array(&[2, 2, 3, 3], &mut rng);
        let g0 = rand_array(&[2], &mut rng);
        let b0 = rand_array(&[2], &mut rng);
        let loss = |xv: &ArrayDyn, gv: &ArrayDyn, bv: &ArrayDyn| -> f64 {
            let tape = Tape::new();
            let x = tape.var(xv.clone());
            let g = tape.var(gv.clone());
            let b = tape.var(bv.clone());
            let (y, _) = x.batch_norm2d_train(&g, &b, 1e-5).unwrap();
            // cube via square*x to make per-element grads asymmetric
            y.square().mul(&y).unwrap().mean_all().scalar_value()
        };
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let g = tape.var(g0.clone());
        let b = tape.var(b0.clone());
        let (y, _) = x.batch_norm2d_train(&g, &b, 1e-5).unwrap();
        let out = y.square().mul(&y).unwrap().mean_all();
        let grads = tape.backward(&out).unwrap();

        let gx = grads.wrt(&x);
        for idx in [0usize, 7, 16, 35] {
            let fd = central_difference(|v| loss(v, &g0, &b0), &x0, idx, 1e-5);
            assert!(
                (gx.as_slice().unwrap()[idx] - fd).abs() < 1e-6,
                "dx[{idx}]: {} vs {fd}",
                gx.as_slice().unwrap()[idx]
            );
        }
        let gg = grads.wrt(&g);
        let gb = grads.wrt(&b);
        for idx in 0..2 {
            let fdg = central_difference(|v| loss(&x0, v, &b0), &g0, idx, 1e-5);
            let fdb = central_difference(|v| loss(&x0, &g0, v), &b0, idx, 1e-5);
            assert!((gg.as_slice().unwrap()[idx] - fdg).abs() < 1e-6);
            assert!((gb.as_slice().unwrap()[idx] - fdb).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let tape = Tape::new();
        let x = tape.var(ArrayD::from_elem(IxDyn(&[1, 1, 1, 2]), 3.0));
        let gamma = tape.var(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let beta = tape.var(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let rm = Array1::from_vec(vec![1.0]);
        let rv = Array1::from_vec(vec![4.0]);
        let y = x.batch_norm2d_eval(&gamma, &beta, &rm, &rv, 0.0).unwrap();
        // 2 * (3 - 1) / 2 + 0.5 = 2.5
        assert!((y.value()[[0, 0, 0, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn eval_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let x0 = rand_array(&[2, 2, 2, 2], &mut rng);
        let g0 = rand_array(&[2], &mut rng);
        let b0 = rand_array(&[2], &mut rng);
        let rm = Array1::from_vec(vec![0.3, -0.2]);
        let rv = Array1::from_vec(vec![1.5, 0.7]);
        let loss = |xv: &ArrayDyn, gv: &ArrayDyn, bv: &ArrayDyn| -> f64 {
            let tape = Tape::new();
            let x = tape.var(xv.clone());
            let g = tape.var(gv.clone());
            let b = tape.var(bv.clone());
            x.batch_norm2d_eval(&g, &b, &rm, &rv, 1e-5)
                .unwrap()
                .square()
                .mean_all()
                .scalar_value()
        };
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let g = tape.var(g0.clone());
        let b = tape.var(b0.clone());
        let out = x
            .batch_norm2d_eval(&g, &b, &rm, &rv, 1e-5)
            .unwrap()
            .square()
            .mean_all();
        let grads = tape.backward(&out).unwrap();
        let gx = grads.wrt(&x);
        for idx in [0usize, 5, 10, 15] {
            let fd = central_difference(|v| loss(v, &g0, &b0), &x0, idx, 1e-6);
            assert!((gx.as_slice().unwrap()[idx] - fd).abs() < 1e-8);
        }
        let gg = grads.wrt(&g);
        for idx in 0..2 {
            let fd = central_difference(|v| loss(&x0, v, &b0), &g0, idx, 1e-6);
            assert!((gg.as_slice().unwrap()[idx] - fd).abs() < 1e-8);
        }
    }
}
