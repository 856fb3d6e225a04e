//! Raw tensor kernels shared by the layers.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output spatial extent of a convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Unfolds `[N, C, H, W]` into patch rows `[N * Ho * Wo, C * k * k]`.
pub fn im2col(x: ArrayView4<f64>, kernel: usize, stride: usize, padding: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = conv_out(h, kernel, stride, padding);
    let wo = conv_out(w, kernel, stride, padding);
    let kk = kernel * kernel;
    let width = c * kk;
    let mut cols = Array2::<f64>::zeros((n * ho * wo, width));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    for b in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((b * ho + oh) * wo + ow) * width;
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for kh in 0..kernel {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = base + ih as usize * w;
                        let dst = row + ch * kk + kh * kernel;
                        for kw in 0..kernel {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw >= 0 && iw < w as isize {
                                out[dst + kw] = xs[src + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back, summing overlaps.
pub fn col2im(
    cols: ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let ho = conv_out(h, kernel, stride, padding);
    let wo = conv_out(w, kernel, stride, padding);
    let kk = kernel * kernel;
    let width = c * kk;
    let mut x = Array4::<f64>::zeros(shape);
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    for b in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((b * ho + oh) * wo + ow) * width;
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for kh in 0..kernel {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = base + ih as usize * w;
                        let src = row + ch * kk + kh * kernel;
                        for kw in 0..kernel {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw >= 0 && iw < w as isize {
                                xs[dst + iw as usize] += cs[src + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, H, W]` to per-pixel rows `[N * H * W, C]`.
pub fn to_rows(x: ArrayView4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let permuted = x.permuted_axes([0, 2, 3, 1]);
    let owned = permuted.as_standard_layout().into_owned();
    owned.into_shape_with_order((n * h * w, c)).expect("contiguous")
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = rows.ncols();
    let rows = rows.as_standard_layout().into_owned();
    let nhwc = rows.into_shape_with_order((n, h, w, c)).expect("row count matches");
    nhwc.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each selected element.
pub fn max_pool2(x: ArrayView4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let os = out.as_slice_mut().expect("fresh array");
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + dh) * w + 2 * ow + dw;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                os[k] = xs[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(
    dy: ArrayView4<f64>,
    arg: &[usize],
    shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(shape);
    let dxs = dx.as_slice_mut().expect("fresh array");
    for (g, &i) in dy.iter().zip(arg) {
        dxs[i] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, i, j)| x[[b, ch, i / 2, j / 2]])
}

pub fn upsample2_backward(dy: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
    for ((b, ch, i, j), g) in dy.indexed_iter() {
        dx[[b, ch, i / 2, j / 2]] += g;
    }
    dx
}

pub fn global_avg_pool(x: ArrayView4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dy: ArrayView2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_iter((0..len).map(|v| (v as f64 * 0.37).sin()))
            .into_shape_with_order(shape)
            .unwrap()
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c.
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = ramp((2, 3, 6, 6));
            let cols = im2col(x.view(), k, s, p);
            let c = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 7 + j * 3) as f64).cos());
            let lhs = (&cols * &c).sum();
            let back = col2im(c.view(), x.dim(), k, s, p);
            let rhs = (&x * &back).sum();
            assert!((lhs - rhs).abs() < 1e-9, "k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn rows_round_trip() {
        let x = ramp((2, 5, 3, 4));
        let back = from_rows(to_rows(x.view()), 2, 3, 4);
        assert_eq!(x, back);
        let rows = to_rows(x.view());
        assert_eq!(rows[[0, 3]], x[[0, 3, 0, 0]]);
        assert_eq!(rows[[13, 1]], x[[1, 1, 0, 1]]);
    }

    #[test]
    fn max_pool_picks_maxima() {
        let x = ramp((1, 2, 4, 4));
        let (y, arg) = max_pool2(x.view());
        for ((b, c, i, j), v) in y.indexed_iter() {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, d)| x[[b, c, 2 * i + a, 2 * j + d]])
                .fold(f64::MIN, f64::max);
            assert_eq!(*v, m);
        }
        let dx = max_pool2_backward(Array4::ones(y.dim()).view(), &arg, x.dim());
        assert_eq!(dx.sum(), y.len() as f64);
    }
}
