//! im2col lowering for the three convolution flavours used by the models:
//! per-frame 2D convs, causal temporal convs, and full 3D convs.
//!
//! Video activations are laid out `(C, T, H, W)`. For 2D convs the temporal
//! axis acts as a batch of frames. Causal temporal convs left-pad with k-1
//! zeros so frame t never sees frames after t.

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

pub fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn dims4(x: &ArrayViewD<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// Columns for a per-frame 2D conv: `(Cin*kh*kw, B*Ho*Wo)`.
pub fn im2col_2d(
    x: &ArrayViewD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (cin, b, h, w) = dims4(x);
    let ho = out_len(h, kh, stride, pad);
    let wo = out_len(w, kw, stride, pad);
    let ncol = b * ho * wo;
    let mut cols = Array2::zeros((cin * kh * kw, ncol));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let csl = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let rbase = row * ncol;
                for bb in 0..b {
                    for oh in 0..ho {
                        let ih = (oh * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = ((ci * b + bb) * h + ih as usize) * w;
                        let crow = rbase + (bb * ho + oh) * wo;
                        // valid output columns given horizontal padding
                        let lo = (pad.saturating_sub(j) + stride - 1) / stride;
                        let Some(span) = (w + pad).checked_sub(j + 1) else {
                            continue;
                        };
                        let hi = (span / stride + 1).min(wo);
                        if lo >= hi {
                            continue;
                        }
                        if stride == 1 {
                            let iw0 = lo + j - pad;
                            csl[crow + lo..crow + hi]
                                .copy_from_slice(&xsl[xrow + iw0..xrow + iw0 + (hi - lo)]);
                        } else {
                            for ow in lo..hi {
                                let iw = ow * stride + j - pad;
                                csl[crow + ow] = xsl[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col_2d`], used for input gradients.
pub fn col2im_2d(
    cols: &Array2<f64>,
    xshape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (cin, b, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let ho = out_len(h, kh, stride, pad);
    let wo = out_len(w, kw, stride, pad);
    let ncol = b * ho * wo;
    assert_eq!(cols.dim(), (cin * kh * kw, ncol));
    let mut x = ArrayD::zeros(IxDyn(xshape));
    let xsl = x.as_slice_mut().unwrap();
    let csl = cols.as_slice().unwrap();
    for ci in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let rbase = row * ncol;
                for bb in 0..b {
                    for oh in 0..ho {
                        let ih = (oh * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = ((ci * b + bb) * h + ih as usize) * w;
                        let crow = rbase + (bb * ho + oh) * wo;
                        let lo = (pad.saturating_sub(j) + stride - 1) / stride;
                        let Some(span) = (w + pad).checked_sub(j + 1) else {
                            continue;
                        };
                        let hi = (span / stride + 1).min(wo);
                        for ow in lo..hi {
                            let iw = ow * stride + j - pad;
                            xsl[xrow + iw] += csl[crow + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Columns for a causal temporal conv: `(Cin*k, To*H*W)`. The input is
/// left-padded with k-1 zero frames, so `To = (T-1)/stride + 1`.
pub fn im2col_temporal(x: &ArrayViewD<f64>, k: usize, stride: usize) -> Array2<f64> {
    let (cin, t, h, w) = dims4(x);
    let to = (t - 1) / stride + 1;
    let hw = h * w;
    let ncol = to * hw;
    let mut cols = Array2::zeros((cin * k, ncol));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let csl = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for j in 0..k {
            let rbase = (ci * k + j) * ncol;
            for ot in 0..to {
                let it = (ot * stride + j) as isize - (k - 1) as isize;
                if it < 0 || it >= t as isize {
                    continue;
                }
                let src = (ci * t + it as usize) * hw;
                let dst = rbase + ot * hw;
                csl[dst..dst + hw].copy_from_slice(&xsl[src..src + hw]);
            }
        }
    }
    cols
}

pub fn col2im_temporal(cols: &Array2<f64>, xshape: &[usize], k: usize, stride: usize) -> ArrayD<f64> {
    let (cin, t, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let to = (t - 1) / stride + 1;
    let hw = h * w;
    let ncol = to * hw;
    assert_eq!(cols.dim(), (cin * k, ncol));
    let mut x = ArrayD::zeros(IxDyn(xshape));
    let xsl = x.as_slice_mut().unwrap();
    let csl = cols.as_slice().unwrap();
    for ci in 0..cin {
        for j in 0..k {
            let rbase = (ci * k + j) * ncol;
            for ot in 0..to {
                let it = (ot * stride + j) as isize - (k - 1) as isize;
                if it < 0 || it >= t as isize {
                    continue;
                }
                let dst = (ci * t + it as usize) * hw;
                let src = rbase + ot * hw;
                for p in 0..hw {
                    xsl[dst + p] += csl[src + p];
                }
            }
        }
    }
    x
}

/// Columns for a 3D conv with symmetric zero padding:
/// `(Cin*kt*kh*kw, To*Ho*Wo)`.
pub fn im2col_3d(
    x: &ArrayViewD<f64>,
    k: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Array2<f64> {
    let (cin, t, h, w) = dims4(x);
    let (kt, kh, kw) = k;
    let to = out_len(t, kt, stride.0, pad.0);
    let ho = out_len(h, kh, stride.1, pad.1);
    let wo = out_len(w, kw, stride.2, pad.2);
    let ncol = to * ho * wo;
    let mut cols = Array2::zeros((cin * kt * kh * kw, ncol));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let csl = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for dt in 0..kt {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kt + dt) * kh + i) * kw + j;
                    let rbase = row * ncol;
                    for ot in 0..to {
                        let it = (ot * stride.0 + dt) as isize - pad.0 as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride.1 + i) as isize - pad.1 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ci * t + it as usize) * h + ih as usize) * w;
                            let crow = rbase + (ot * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride.2 + j) as isize - pad.2 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                csl[crow + ow] = xsl[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_3d(
    cols: &Array2<f64>,
    xshape: &[usize],
    k: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> ArrayD<f64> {
    let (cin, t, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (kt, kh, kw) = k;
    let to = out_len(t, kt, stride.0, pad.0);
    let ho = out_len(h, kh, stride.1, pad.1);
    let wo = out_len(w, kw, stride.2, pad.2);
    let ncol = to * ho * wo;
    assert_eq!(cols.dim(), (cin * kt * kh * kw, ncol));
    let mut x = ArrayD::zeros(IxDyn(xshape));
    let xsl = x.as_slice_mut().unwrap();
    let csl = cols.as_slice().unwrap();
    for ci in 0..cin {
        for dt in 0..kt {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kt + dt) * kh + i) * kw + j;
                    let rbase = row * ncol;
                    for ot in 0..to {
                        let it = (ot * stride.0 + dt) as isize - pad.0 as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride.1 + i) as isize - pad.1 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ci * t + it as usize) * h + ih as usize) * w;
                            let crow = rbase + (ot * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride.2 + j) as isize - pad.2 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                xsl[xrow + iw as usize] += csl[crow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive_conv2d(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (cin, b, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = out_len(h, kh, stride, pad);
        let wo = out_len(ww, kw, stride, pad);
        let mut y = ArrayD::zeros(IxDyn(&[co, b, ho, wo]));
        for o in 0..co {
            for bb in 0..b {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * stride + i) as isize - pad as isize;
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= h as isize
                                        || iw >= ww as isize
                                    {
                                        continue;
                                    }
                                    acc += x[[ci, bb, ih as usize, iw as usize]]
                                        * w[[o, ci, i, j]];
                                }
                            }
                        }
                        y[[o, bb, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_handles_inputs_smaller_than_kernel() {
        let x = Array::linspace(-1.0, 1.0, 2 * 3)
            .into_shape_with_order(IxDyn(&[2, 3, 1, 1]))
            .unwrap();
        let w = Array::linspace(-0.5, 0.7, 4 * 2 * 3 * 3)
            .into_shape_with_order(IxDyn(&[4, 2, 3, 3]))
            .unwrap();
        for (stride, pad) in [(1, 1), (2, 1)] {
            let cols = im2col_2d(&x.view(), 3, 3, stride, pad);
            let w2 = w.to_shape((4, 18)).unwrap();
            let y2 = crate::tensor::gemm::matmul(&w2.view(), &cols.view());
            let ho = out_len(1, 3, stride, pad);
            let y = y2
                .into_shape_with_order(IxDyn(&[4, 3, ho, ho]))
                .unwrap();
            let want = naive_conv2d(&x.clone().into_dyn(), &w.clone().into_dyn(), stride, pad);
            assert!(y.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            let back = col2im_2d(&cols, &[2, 3, 1, 1], 3, 3, stride, pad);
            assert_eq!(back.shape(), &[2, 3, 1, 1]);
        }
    }

    #[test]
    fn im2col_matches_naive_conv() {
        let x = Array::linspace(-1.0, 1.0, 2 * 3 * 5 * 5)
            .into_shape_with_order(IxDyn(&[2, 3, 5, 5]))
            .unwrap();
        let w = Array::linspace(-0.5, 0.7, 4 * 2 * 3 * 3)
            .into_shape_with_order(IxDyn(&[4, 2, 3, 3]))
            .unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let cols = im2col_2d(&x.view(), 3, 3, stride, pad);
            let w2 = w.to_shape((4, 18)).unwrap();
            let y2 = crate::tensor::gemm::matmul(&w2.view(), &cols.view());
            let ho = out_len(5, 3, stride, pad);
            let wo = out_len(5, 3, stride, pad);
            let y = y2
                .into_shape_with_order((4, 3, ho, wo))
                .unwrap()
                .into_dyn();
            let want = naive_conv2d(&x, &w, stride, pad);
            let diff = (&y - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} pad {pad}: max diff {diff}");
        }
    }

    #[test]
    fn temporal_cols_are_causal() {
        // One channel, identity spatial extent: cols row j at output t
        // must hold input frame t*stride + j - (k-1) or zero.
        let t = 5;
        let x = Array::from_shape_fn(IxDyn(&[1, t, 1, 1]), |ix| (ix[1] + 1) as f64);
        let cols = im2col_temporal(&x.view(), 3, 2);
        let to = (t - 1) / 2 + 1;
        assert_eq!(cols.dim(), (3, to));
        for ot in 0..to {
            for j in 0..3 {
                let it = (ot * 2 + j) as isize - 2;
                let want = if it < 0 { 0.0 } else { (it + 1) as f64 };
                assert_eq!(cols[[j, ot]], want);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        use rand::Rng;
        let mut rng = crate::rng::stream(11, 0, crate::rng::Stream::DataGen);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 4, 4]), |_| rng.random_range(-1.0..1.0));
        let cols_shape = im2col_2d(&x.view(), 3, 3, 2, 1).dim();
        let c = Array2::from_shape_fn(cols_shape, |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&im2col_2d(&x.view(), 3, 3, 2, 1) * &c).sum();
        let rhs: f64 = (&x * &col2im_2d(&c, x.shape(), 3, 3, 2, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
