//! Neural-network layers on top of the tape: linear, conv, LSTM, spectral
//! normalization, and initialization helpers.

use crate::autodiff::{join_path, Module, Param, Tape, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used for all parameter initialization.
pub type InitRng = ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    InitRng::seed_from_u64(seed)
}

/// Uniform(-b, b) with b = sqrt(1 / fan_in), the usual conv/linear default.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut InitRng) -> ArrayD<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Spectral normalization state: one power-iteration vector per weight.
/// The `u` buffer is persisted in checkpoints so that forwards reproduce
/// bit-identically after a round trip.
pub struct SpectralNorm {
    pub u: Param,
}

impl SpectralNorm {
    pub fn new(rows: usize, rng: &mut InitRng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|v| *v /= norm);
        SpectralNorm {
            u: Param::new_buffer(ArrayD::from_shape_vec(IxDyn(&[rows]), u).unwrap()),
        }
    }

    /// Divide `w` by its spectral norm, estimated with one power-iteration
    /// step from the stored `u`. On training tapes the improved `u` is
    /// written back.
    pub fn apply<'t>(&self, tape: &'t Tape, w: &Tensor<'t>) -> Tensor<'t> {
        let wv = w.value();
        let rows = wv.shape()[0];
        let cols = wv.len() / rows;
        let w2 = wv
            .clone()
            .into_shape_with_order(IxDyn(&[rows, cols]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let u = self
            .u
            .value()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let normalize = |v: ndarray::Array1<f64>| {
            let n = v.dot(&v).sqrt().max(1e-12);
            v / n
        };
        let v = normalize(w2.t().dot(&u));
        let u2 = normalize(w2.dot(&v));
        if tape.is_training() {
            self.u.set_value(u2.clone().into_dyn());
        }
        // sigma = u2^T W v = sum(W .* outer(u2, v)); u2 and v enter as
        // constants, so gradients flow through W alone.
        let outer = {
            let mut o = ndarray::Array2::<f64>::zeros((rows, cols));
            for i in 0..rows {
                for j in 0..cols {
                    o[[i, j]] = u2[i] * v[j];
                }
            }
            o.into_dyn()
                .into_shape_with_order(IxDyn(wv.shape()))
                .unwrap()
        };
        let sigma = w.mul(&tape.constant(outer)).sum_all().add_scalar(1e-12);
        w.div(&sigma)
    }
}

impl Module for SpectralNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "u"), &self.u);
    }
}

/// Fully connected layer; weight is (in, out) so forward is `x @ w + b`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut InitRng) -> Self {
        Linear {
            weight: Param::new(uniform_init(&[in_f, out_f], in_f, rng)),
            bias: Param::new(zeros(&[out_f])),
        }
    }

    /// Zero weights and bias: the layer outputs exactly zero at start.
    pub fn new_zero(in_f: usize, out_f: usize) -> Self {
        Linear {
            weight: Param::new(zeros(&[in_f, out_f])),
            bias: Param::new(zeros(&[out_f])),
        }
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        x.matmul(&w).add(&b)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
    }
}

/// 2-D convolution layer with optional spectral normalization.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    pub spectral: Option<SpectralNorm>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut InitRng,
    ) -> Self {
        Conv2d {
            weight: Param::new(uniform_init(&[cout, cin, k, k], cin * k * k, rng)),
            bias: Param::new(zeros(&[cout])),
            stride,
            pad,
            spectral: None,
        }
    }

    /// Zero-initialized conv (used for the final layer of affine extractors
    /// and flow heads). Spectral norm is never attached to these: dividing a
    /// zero weight by its ~zero spectral norm would blow up the gradient.
    pub fn new_zero(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::new(zeros(&[cout, cin, k, k])),
            bias: Param::new(zeros(&[cout])),
            stride,
            pad,
            spectral: None,
        }
    }

    pub fn with_spectral_norm(mut self, rng: &mut InitRng) -> Self {
        let rows = self.weight.shape()[0];
        self.spectral = Some(SpectralNorm::new(rows, rng));
        self
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        let tape = x.tape();
        let mut w = tape.param(&self.weight);
        if let Some(sn) = &self.spectral {
            w = sn.apply(tape, &w);
        }
        let b = tape.param(&self.bias);
        let cout = self.weight.shape()[0];
        x.conv2d(&w, self.stride, self.pad)
            .add(&b.reshape(&[1, cout, 1, 1]))
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
        if let Some(sn) = &self.spectral {
            sn.visit_params(&join_path(prefix, "sn"), f);
        }
    }
}

/// 1-D convolution layer, input (B,Cin,L).
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut InitRng,
    ) -> Self {
        Conv1d {
            weight: Param::new(uniform_init(&[cout, cin, k], cin * k, rng)),
            bias: Param::new(zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let cout = self.weight.shape()[0];
        x.conv1d(&w, self.stride, self.pad)
            .add(&b.reshape(&[1, cout, 1]))
    }
}

impl Module for Conv1d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "weight"), &self.weight);
        f(&join_path(prefix, "bias"), &self.bias);
    }
}

/// Single-layer LSTM; returns the final hidden state. Gate layout in the
/// packed weights is (input, forget, cell, output).
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, rng: &mut InitRng) -> Self {
        Lstm {
            w_ih: Param::new(uniform_init(&[input, 4 * hidden], input.max(1), rng)),
            w_hh: Param::new(uniform_init(&[hidden, 4 * hidden], hidden, rng)),
            bias: Param::new(zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// x: (B, T, F) -> (B, hidden)
    pub fn forward<'t>(&self, x: &Tensor<'t>) -> Tensor<'t> {
        let tape = x.tape();
        let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hsz = self.hidden;
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let bias = tape.param(&self.bias);
        let mut h = tape.constant(zeros(&[b, hsz]));
        let mut c = tape.constant(zeros(&[b, hsz]));
        for step in 0..t {
            let xt = x.slice_axis(1, step, step + 1).reshape(&[b, f]);
            let gates = xt.matmul(&w_ih).add(&h.matmul(&w_hh)).add(&bias);
            let i = gates.slice_axis(1, 0, hsz).sigmoid();
            let fg = gates.slice_axis(1, hsz, 2 * hsz).sigmoid();
            let g = gates.slice_axis(1, 2 * hsz, 3 * hsz).tanh();
            let o = gates.slice_axis(1, 3 * hsz, 4 * hsz).sigmoid();
            c = fg.mul(&c).add(&i.mul(&g));
            h = o.mul(&c.tanh());
        }
        h
    }
}

impl Module for Lstm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_path(prefix, "w_ih"), &self.w_ih);
        f(&join_path(prefix, "w_hh"), &self.w_hh);
        f(&join_path(prefix, "bias"), &self.bias);
    }
}
