//! 2-D convolution via im2col. Columns are recomputed in the backward pass
//! instead of being captured, trading a little CPU for a much smaller tape.

use super::Tensor;
use ndarray::{Array2, ArrayD, IxDyn};

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel larger than padded input");
    (n + 2 * pad - k) / stride + 1
}

/// Unfold `x` (B,Cin,H,W) into (B*Ho*Wo, Cin*kh*kw).
fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((b * ho * wo, cin * kh * kw));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * kh + ky) * kw + kx]] =
                                x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Fold gradient columns back onto the input (transpose of [`im2col`]).
fn col2im(
    cols: &Array2<f64>,
    x_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (b, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut dx = ArrayD::<f64>::zeros(IxDyn(x_shape));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, iy as usize, ix as usize]] +=
                                cols[[row, (ci * kh + ky) * kw + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (B*Ho*Wo, Cout) -> (B, Cout, Ho, Wo)
fn rows_to_nchw(rows: &Array2<f64>, b: usize, cout: usize, ho: usize, wo: usize) -> ArrayD<f64> {
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for co in 0..cout {
                    out[[bi, co, oy, ox]] = rows[[row, co]];
                }
            }
        }
    }
    out
}

/// (B, Cout, Ho, Wo) -> (B*Ho*Wo, Cout)
fn nchw_to_rows(g: &ArrayD<f64>) -> Array2<f64> {
    let (b, cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut rows = Array2::<f64>::zeros((b * ho * wo, cout));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for co in 0..cout {
                    rows[[row, co]] = g[[bi, co, oy, ox]];
                }
            }
        }
    }
    rows
}

impl<'t> Tensor<'t> {
    /// 2-D convolution. `self` is (B,Cin,H,W), `weight` is (Cout,Cin,kh,kw).
    pub fn conv2d(&self, weight: &Tensor<'t>, stride: usize, pad: usize) -> Tensor<'t> {
        assert_eq!(self.ndim(), 4, "conv2d input must be (B,Cin,H,W)");
        assert_eq!(weight.ndim(), 4, "conv2d weight must be (Cout,Cin,kh,kw)");
        assert_eq!(
            self.shape()[1],
            weight.shape()[1],
            "conv2d channel mismatch"
        );
        let x = self.value();
        let w = weight.value();
        let x_shape = x.shape().to_vec();
        let (b, cout) = (x_shape[0], w.shape()[0]);
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let (cols, ho, wo) = im2col(&x, kh, kw, stride, pad);
        let w2 = w
            .clone()
            .into_shape_with_order(IxDyn(&[cout, w.len() / cout]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let out_rows = cols.dot(&w2.t());
        let out = rows_to_nchw(&out_rows, b, cout, ho, wo);
        drop(cols);
        let w_shape = w.shape().to_vec();
        self.make_binary(weight, out, move |g| {
            let g2 = nchw_to_rows(g);
            let (cols, _, _) = im2col(&x, kh, kw, stride, pad);
            let dw2 = g2.t().dot(&cols);
            let dw = dw2.into_dyn().into_shape_with_order(IxDyn(&w_shape)).unwrap();
            let dcols = g2.dot(&w2);
            let dx = col2im(&dcols, &x_shape, kh, kw, stride, pad);
            (dx, dw)
        })
    }

    /// 1-D convolution expressed through [`Tensor::conv2d`]. `self` is
    /// (B,Cin,L), `weight` is (Cout,Cin,k). Padding is applied to the length
    /// axis only (conv2d's symmetric pad would also grow the dummy height).
    pub fn conv1d(&self, weight: &Tensor<'t>, stride: usize, pad: usize) -> Tensor<'t> {
        assert_eq!(self.ndim(), 3, "conv1d input must be (B,Cin,L)");
        assert_eq!(weight.ndim(), 3, "conv1d weight must be (Cout,Cin,k)");
        let padded = self.pad_last(pad);
        let (b, cin, l) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
        let (cout, _, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        let x4 = padded.reshape(&[b, cin, 1, l]);
        let w4 = weight.reshape(&[cout, cin, 1, k]);
        let out = x4.conv2d(&w4, stride, 0);
        let lo = out.shape()[3];
        out.reshape(&[b, cout, lo])
    }
}

impl<'t> Tensor<'t> {
    /// Zero-pad the last axis on both sides.
    pub fn pad_last(&self, pad: usize) -> Tensor<'t> {
        if pad == 0 {
            return self.clone();
        }
        let in_shape = self.shape.clone();
        let axis = in_shape.len() - 1;
        let mut out_shape = in_shape.clone();
        out_shape[axis] += 2 * pad;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        out.slice_axis_mut(
            ndarray::Axis(axis),
            ndarray::Slice::from(pad..pad + in_shape[axis]),
        )
        .assign(&self.value());
        self.make_unary(out, move |g| {
            g.slice_axis(
                ndarray::Axis(axis),
                ndarray::Slice::from(pad..pad + in_shape[axis]),
            )
            .to_owned()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Param, Tape};
    use ndarray::{ArrayD, IxDyn};

    /// Direct quadruple-loop convolution used as an independent oracle.
    fn conv2d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| (i as f64) * 0.1 - 0.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = ramp(&[2, 3, 5, 6]);
            let w = ramp(&[4, 3, 3, 3]);
            let tape = Tape::new();
            let xt = tape.constant(x.clone());
            let wt = tape.constant(w.clone());
            let got = xt.conv2d(&wt, stride, pad).value();
            let want = conv2d_naive(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv1d_matches_conv2d_on_height1() {
        let tape = Tape::new();
        let x = tape.constant(ramp(&[1, 2, 7]));
        let w = tape.constant(ramp(&[3, 2, 3]));
        let y = x.pad_last(1).conv1d(&w, 1, 0);
        assert_eq!(y.shape(), &[1, 3, 7]);
    }

    #[test]
    fn conv2d_gradients_accumulate() {
        let x = Param::new(ramp(&[1, 2, 4, 4]));
        let w = Param::new(ramp(&[2, 2, 3, 3]));
        let tape = Tape::new();
        let xt = tape.param(&x);
        let wt = tape.param(&w);
        let y = xt.conv2d(&wt, 1, 1).sum_all();
        tape.backward(&y);
        // d sum / d w[co,ci,ky,kx] = sum over windows of x values: nonzero
        assert!(w.grad().iter().any(|&g| g != 0.0));
        assert!(x.grad().iter().any(|&g| g != 0.0));
    }
}
