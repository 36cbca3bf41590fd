//! Pooling, nearest upsampling, and bilinear resize on (B,C,H,W) tensors.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};

/// Source taps for one output coordinate under half-pixel-center bilinear
/// sampling, clamped to the image.
fn bilinear_taps(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

impl<'t> Tensor<'t> {
    /// Average pooling with square kernel `k` and stride `s`, no padding.
    pub fn avg_pool2d(&self, k: usize, s: usize) -> Tensor<'t> {
        assert_eq!(self.ndim(), 4);
        let x = self.value();
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = (h - k) / s + 1;
        let wo = (w - k) / s + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, ho, wo]));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += x[[bi, ci, oy * s + ky, ox * s + kx]];
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.make_unary(out, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[[bi, ci, oy, ox]] * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    dx[[bi, ci, oy * s + ky, ox * s + kx]] += gv;
                                }
                            }
                        }
                    }
                }
            }
            dx
        })
    }

    /// Global average pool to (B,C,1,1).
    pub fn global_avg_pool(&self) -> Tensor<'t> {
        self.mean_axes_keep(&[2, 3])
    }

    /// Global max pool to (B,C,1,1); gradient routes to the first argmax in
    /// row-major order.
    pub fn global_max_pool(&self) -> Tensor<'t> {
        assert_eq!(self.ndim(), 4);
        let x = self.value();
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, 1, 1]));
        let mut argmax = vec![(0usize, 0usize); b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = (0, 0);
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[bi, ci, y, xx]];
                        if v > best {
                            best = v;
                            at = (y, xx);
                        }
                    }
                }
                out[[bi, ci, 0, 0]] = best;
                argmax[bi * c + ci] = at;
            }
        }
        let in_shape = x.shape().to_vec();
        self.make_unary(out, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
            for bi in 0..b {
                for ci in 0..c {
                    let (y, xx) = argmax[bi * c + ci];
                    dx[[bi, ci, y, xx]] += g[[bi, ci, 0, 0]];
                }
            }
            dx
        })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2x(&self) -> Tensor<'t> {
        assert_eq!(self.ndim(), 4);
        let x = self.value();
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[bi, ci, y, xx]] = x[[bi, ci, y / 2, xx / 2]];
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.make_unary(out, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[[bi, ci, y / 2, xx / 2]] += g[[bi, ci, y, xx]];
                        }
                    }
                }
            }
            dx
        })
    }

    /// Bilinear resize to (oh, ow), half-pixel centers, edges clamped.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor<'t> {
        assert_eq!(self.ndim(), 4);
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if oh == h && ow == w {
            return self.clone();
        }
        let x = self.value();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, oh, ow]));
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, w, ow);
                for bi in 0..b {
                    for ci in 0..c {
                        let v = (1.0 - fy) * (1.0 - fx) * x[[bi, ci, y0, x0]]
                            + (1.0 - fy) * fx * x[[bi, ci, y0, x1]]
                            + fy * (1.0 - fx) * x[[bi, ci, y1, x0]]
                            + fy * fx * x[[bi, ci, y1, x1]];
                        out[[bi, ci, oy, ox]] = v;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.make_unary(out, move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
            for oy in 0..oh {
                let (y0, y1, fy) = bilinear_taps(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = bilinear_taps(ox, w, ow);
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[[bi, ci, oy, ox]];
                            dx[[bi, ci, y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                            dx[[bi, ci, y0, x1]] += (1.0 - fy) * fx * gv;
                            dx[[bi, ci, y1, x0]] += fy * (1.0 - fx) * gv;
                            dx[[bi, ci, y1, x1]] += fy * fx * gv;
                        }
                    }
                }
            }
            dx
        })
    }
}
