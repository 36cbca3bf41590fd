//! Elementwise, broadcasting, reduction, and shape ops on [`Tensor`].

use super::Tensor;
use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// NumPy-style co-broadcast of two shapes (right-aligned).
pub fn co_broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_value(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if v.shape() == shape {
        return v.clone();
    }
    v.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", v.shape(), shape))
        .to_owned()
}

/// Sum a gradient down to the shape of the operand it belongs to, undoing
/// broadcast expansion.
pub(crate) fn reduce_to_shape(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] > 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

impl<'t> Tensor<'t> {
    // ---- binary, broadcasting ----

    pub fn add(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        let shape = co_broadcast_shape(&sa, &sb);
        let out = broadcast_value(&self.value(), &shape) + broadcast_value(&other.value(), &shape);
        self.make_binary(other, out, move |g| {
            (
                reduce_to_shape(g.clone(), &sa),
                reduce_to_shape(g.clone(), &sb),
            )
        })
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        let shape = co_broadcast_shape(&sa, &sb);
        let out = broadcast_value(&self.value(), &shape) - broadcast_value(&other.value(), &shape);
        self.make_binary(other, out, move |g| {
            (
                reduce_to_shape(g.clone(), &sa),
                reduce_to_shape(-g.clone(), &sb),
            )
        })
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        let shape = co_broadcast_shape(&sa, &sb);
        let av = broadcast_value(&self.value(), &shape);
        let bv = broadcast_value(&other.value(), &shape);
        let out = &av * &bv;
        self.make_binary(other, out, move |g| {
            (
                reduce_to_shape(g * &bv, &sa),
                reduce_to_shape(g * &av, &sb),
            )
        })
    }

    pub fn div(&self, other: &Tensor<'t>) -> Tensor<'t> {
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        let shape = co_broadcast_shape(&sa, &sb);
        let av = broadcast_value(&self.value(), &shape);
        let bv = broadcast_value(&other.value(), &shape);
        let out = &av / &bv;
        self.make_binary(other, out, move |g| {
            let ga = g / &bv;
            let gb = -(g * &av) / (&bv * &bv);
            (reduce_to_shape(ga, &sa), reduce_to_shape(gb, &sb))
        })
    }

    // ---- unary ----

    pub fn neg(&self) -> Tensor<'t> {
        self.make_unary(-self.value(), |g| -g.clone())
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.make_unary(self.value() * c, move |g| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.make_unary(self.value() + c, |g| g.clone())
    }

    pub fn exp(&self) -> Tensor<'t> {
        let y = self.value().mapv(f64::exp);
        let yc = y.clone();
        self.make_unary(y, move |g| g * &yc)
    }

    pub fn ln(&self) -> Tensor<'t> {
        let x = self.value();
        let y = x.mapv(f64::ln);
        self.make_unary(y, move |g| g / &x)
    }

    pub fn sqrt(&self) -> Tensor<'t> {
        let y = self.value().mapv(f64::sqrt);
        let yc = y.clone();
        self.make_unary(y, move |g| g * &yc.mapv(|v| 0.5 / v))
    }

    pub fn square(&self) -> Tensor<'t> {
        let x = self.value();
        let y = &x * &x;
        self.make_unary(y, move |g| g * &(x * 2.0))
    }

    pub fn abs(&self) -> Tensor<'t> {
        let x = self.value();
        let y = x.mapv(f64::abs);
        self.make_unary(y, move |g| g * &x.mapv(|v| v.signum() * f64::from(v != 0.0)))
    }

    pub fn tanh(&self) -> Tensor<'t> {
        let y = self.value().mapv(f64::tanh);
        let yc = y.clone();
        self.make_unary(y, move |g| g * &yc.mapv(|v| 1.0 - v * v))
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        let y = self.value().mapv(stable_sigmoid);
        let yc = y.clone();
        self.make_unary(y, move |g| g * &yc.mapv(|v| v * (1.0 - v)))
    }

    /// `ln(1 + e^x)`, evaluated stably; derivative is the sigmoid.
    pub fn softplus(&self) -> Tensor<'t> {
        let x = self.value();
        let y = x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.make_unary(y, move |g| g * &x.mapv(stable_sigmoid))
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<'t> {
        let x = self.value();
        let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.make_unary(y, move |g| {
            g * &x.mapv(|v| if v > 0.0 { 1.0 } else { slope })
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<'t> {
        let shape = self.shape.clone();
        let s = self.value().sum();
        self.make_unary(ArrayD::from_elem(IxDyn(&[1]), s), move |g| {
            ArrayD::from_elem(IxDyn(&shape), g[[0]])
        })
    }

    pub fn mean_all(&self) -> Tensor<'t> {
        let n = self.value_len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the given axes, keeping them as size-1 dims.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Tensor<'t> {
        let in_shape = self.shape.clone();
        let mut out = self.value();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.make_unary(out, move |g| broadcast_value(g, &in_shape))
    }

    /// Mean over the given axes, keeping them as size-1 dims.
    pub fn mean_axes_keep(&self, axes: &[usize]) -> Tensor<'t> {
        let n: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum_axes_keep(axes).scale(1.0 / n as f64)
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<'t> {
        let old = self.shape.clone();
        assert_eq!(
            self.value_len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            old,
            shape
        );
        let v = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape requires standard layout");
        self.make_unary(v, move |g| {
            g.clone().into_shape_with_order(IxDyn(&old)).unwrap()
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<'t> {
        let old = self.shape.clone();
        let v = broadcast_value(&self.value(), shape);
        self.make_unary(v, move |g| reduce_to_shape(g.clone(), &old))
    }

    /// `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor<'t> {
        let in_shape = self.shape.clone();
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.make_unary(v, move |g| {
            let mut full = ArrayD::zeros(IxDyn(&in_shape));
            full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            full
        })
    }

    // ---- linear algebra ----

    /// 2-D matrix product: `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor<'t>) -> Tensor<'t> {
        assert_eq!(self.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.ndim(), 2, "matmul rhs must be 2-D");
        let a = self
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = other
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let out = a.dot(&b).into_dyn();
        self.make_binary(other, out, move |g| {
            let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            let ga = g2.dot(&b.t()).into_dyn();
            let gb = a.t().dot(&g2).into_dyn();
            (ga, gb)
        })
    }
}

/// Concatenate along `axis`. All tensors must share a tape.
pub fn concat<'t>(tensors: &[Tensor<'t>], axis: usize) -> Tensor<'t> {
    assert!(!tensors.is_empty());
    let tape = tensors[0].tape();
    let values: Vec<ArrayD<f64>> = tensors.iter().map(|t| t.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let parents: Vec<usize> = tensors.iter().map(|t| t.id).collect();
    tape.make(
        out,
        parents,
        Some(Box::new(move |g| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &sz in &sizes {
                grads.push(
                    g.slice_axis(Axis(axis), Slice::from(off..off + sz))
                        .to_owned(),
                );
                off += sz;
            }
            grads
        })),
    )
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Param, Tape};
    use super::*;
    use ndarray::array;

    #[test]
    fn broadcast_add_reduces_grad() {
        let a = Param::new(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = Param::new(ArrayD::ones(IxDyn(&[3])));
        let tape = Tape::new();
        let x = tape.param(&a);
        let y = tape.param(&b);
        let z = x.add(&y).sum_all();
        tape.backward(&z);
        assert_eq!(a.grad(), ArrayD::<f64>::ones(IxDyn(&[2, 3])));
        // b broadcast over 2 rows: grad sums to 2 per entry
        assert_eq!(b.grad(), ArrayD::from_elem(IxDyn(&[3]), 2.0));
    }

    #[test]
    fn matmul_matches_hand_gradient() {
        let a = Param::new(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = Param::new(array![[5.0], [6.0]].into_dyn());
        let tape = Tape::new();
        let x = tape.param(&a);
        let y = tape.param(&b);
        let z = x.matmul(&y).sum_all();
        tape.backward(&z);
        // d/dA sum(A B) = 1 B^T broadcast
        assert_eq!(a.grad(), array![[5.0, 6.0], [5.0, 6.0]].into_dyn());
        assert_eq!(b.grad(), array![[4.0], [6.0]].into_dyn());
    }

    #[test]
    fn slice_backward_zero_pads() {
        let p = Param::new(array![1.0, 2.0, 3.0, 4.0].into_dyn());
        let tape = Tape::new();
        let x = tape.param(&p);
        let y = x.slice_axis(0, 1, 3).sum_all();
        tape.backward(&y);
        assert_eq!(p.grad(), array![0.0, 1.0, 1.0, 0.0].into_dyn());
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Param::new(array![1.0, 2.0].into_dyn());
        let b = Param::new(array![3.0].into_dyn());
        let tape = Tape::new();
        let x = tape.param(&a);
        let y = tape.param(&b);
        let z = concat(&[x, y.scale(2.0)], 0);
        let s = z.mul(&tape.constant(array![1.0, 10.0, 100.0].into_dyn()));
        tape.backward(&s.sum_all());
        assert_eq!(a.grad(), array![1.0, 10.0].into_dyn());
        assert_eq!(b.grad(), array![200.0].into_dyn());
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(array![800.0, -800.0, 0.0].into_dyn());
        let y = x.softplus().value();
        assert_eq!(y[[0]], 800.0);
        assert_eq!(y[[1]], 0.0);
        assert!((y[[2]] - 2f64.ln()).abs() < 1e-12);
    }
}
