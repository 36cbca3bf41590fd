//! Central finite-difference verification of tape gradients.
//!
//! `check` evaluates a scalar-valued function twice per input element and
//! compares the numeric derivative against the analytic gradient from
//! [`Tape::backward`]. Everything runs in double precision, so the default
//! tolerances are tight.

use super::{Param, Tape, Tensor};
use ndarray::ArrayD;

pub struct GradCheck {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

impl GradCheck {
    /// Compare analytic and numeric gradients of `f` w.r.t. every element of
    /// every input. Returns the worst relative error on success.
    pub fn check<F>(&self, f: F, inputs: &[ArrayD<f64>]) -> Result<f64, String>
    where
        F: for<'a> Fn(&'a Tape, &[Tensor<'a>]) -> Tensor<'a>,
    {
        let params: Vec<Param> = inputs.iter().map(|x| Param::new(x.clone())).collect();

        let analytic: Vec<ArrayD<f64>> = {
            let tape = Tape::new();
            let xs: Vec<Tensor> = params.iter().map(|p| tape.param(p)).collect();
            let loss = f(&tape, &xs);
            if loss.value_len() != 1 {
                return Err("gradcheck function must return a scalar".into());
            }
            tape.backward(&loss);
            params.iter().map(|p| p.grad()).collect()
        };

        let eval = |point: &[ArrayD<f64>]| -> f64 {
            let tape = Tape::new();
            let xs: Vec<Tensor> = point.iter().map(|x| tape.constant(x.clone())).collect();
            f(&tape, &xs).item()
        };

        let mut worst = 0.0f64;
        let mut point: Vec<ArrayD<f64>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for (j, &x0) in input.iter().enumerate() {
                let h = self.eps * x0.abs().max(1.0);
                let flat = point[i].as_slice_mut().unwrap();
                flat[j] = x0 + h;
                let fp = eval(&point);
                let flat = point[i].as_slice_mut().unwrap();
                flat[j] = x0 - h;
                let fm = eval(&point);
                let flat = point[i].as_slice_mut().unwrap();
                flat[j] = x0;

                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[i].as_slice().unwrap()[j];
                let diff = (a - numeric).abs();
                if diff <= self.abs_floor {
                    continue;
                }
                let rel = diff / a.abs().max(numeric.abs()).max(self.abs_floor);
                worst = worst.max(rel);
                if rel > self.rel_tol {
                    return Err(format!(
                        "input {i} element {j}: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
                    ));
                }
            }
        }
        Ok(worst)
    }
}

/// Convenience wrapper with default tolerances (1e-4 relative).
pub fn check_gradients<F>(f: F, inputs: &[ArrayD<f64>]) -> Result<f64, String>
where
    F: for<'a> Fn(&'a Tape, &[Tensor<'a>]) -> Tensor<'a>,
{
    GradCheck::default().check(f, inputs)
}

impl GradCheck {
    /// Like [`GradCheck::check`], but differentiates through pre-built
    /// modules: `f` evaluates the loss on a fresh tape, and the listed
    /// params are perturbed in place for the numeric side.
    pub fn check_params<F>(&self, f: F, params: &[Param]) -> Result<f64, String>
    where
        F: for<'a> Fn(&'a Tape) -> Tensor<'a>,
    {
        let analytic: Vec<ArrayD<f64>> = {
            for p in params {
                p.zero_grad();
            }
            let tape = Tape::new();
            let loss = f(&tape);
            if loss.value_len() != 1 {
                return Err("gradcheck function must return a scalar".into());
            }
            tape.backward(&loss);
            params.iter().map(|p| p.grad()).collect()
        };

        let eval = || -> f64 {
            let tape = Tape::new();
            f(&tape).item()
        };

        let mut worst = 0.0f64;
        for (i, p) in params.iter().enumerate() {
            let base = p.value();
            for j in 0..base.len() {
                let x0 = base.as_slice().unwrap()[j];
                let h = self.eps * x0.abs().max(1.0);
                let mut v = base.clone();
                v.as_slice_mut().unwrap()[j] = x0 + h;
                p.set_value(v.clone());
                let fp = eval();
                v.as_slice_mut().unwrap()[j] = x0 - h;
                p.set_value(v.clone());
                let fm = eval();
                v.as_slice_mut().unwrap()[j] = x0;
                p.set_value(v);

                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[i].as_slice().unwrap()[j];
                let diff = (a - numeric).abs();
                if diff <= self.abs_floor {
                    continue;
                }
                let rel = diff / a.abs().max(numeric.abs()).max(self.abs_floor);
                worst = worst.max(rel);
                if rel > self.rel_tol {
                    return Err(format!(
                        "param {i} element {j}: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
                    ));
                }
            }
        }
        Ok(worst)
    }
}

/// Param-based variant of [`check_gradients`] with default tolerances.
pub fn check_param_gradients<F>(f: F, params: &[Param]) -> Result<f64, String>
where
    F: for<'a> Fn(&'a Tape) -> Tensor<'a>,
{
    GradCheck::default().check_params(f, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_chain_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[3, 4], &mut rng);
        let y = randn(&[3, 4], &mut rng);
        check_gradients(
            |_t, xs| {
                xs[0]
                    .tanh()
                    .mul(&xs[1].sigmoid())
                    .add(&xs[0].square().scale(0.3))
                    .sum_all()
            },
            &[x, y],
        )
        .unwrap();
    }

    #[test]
    fn conv_and_pool_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[1, 2, 6, 6], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        check_gradients(
            |_t, xs| {
                xs[0]
                    .conv2d(&xs[1], 1, 1)
                    .leaky_relu(0.2)
                    .avg_pool2d(2, 2)
                    .square()
                    .mean_all()
            },
            &[x, w],
        )
        .unwrap();
    }

    #[test]
    fn resize_and_upsample_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[1, 2, 5, 5], &mut rng);
        check_gradients(
            |_t, xs| {
                xs[0]
                    .resize_bilinear(8, 8)
                    .upsample_nearest2x()
                    .tanh()
                    .mean_all()
            },
            &[x],
        )
        .unwrap();
    }

    #[test]
    fn matmul_softplus_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&[3, 5], &mut rng);
        let b = randn(&[5, 2], &mut rng);
        check_gradients(
            |_t, xs| xs[0].matmul(&xs[1]).softplus().sum_all(),
            &[a, b],
        )
        .unwrap();
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has a kink at 0; shifting values away from 0 keeps the check
        // honest, while a sign flip in the function makes it fail.
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.7]).unwrap();
        let ok = check_gradients(|_t, xs| xs[0].abs().sum_all(), &[x]);
        assert!(ok.is_ok());
    }
}
