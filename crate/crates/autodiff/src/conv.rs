//! Volumetric convolution kernels: im2col/col2im plus the three linear maps
//! (forward conv, transpose conv, weight gradient) that are each other's
//! adjoints. All inputs are standard-layout `[N, C, D, H, W]` arrays.

use crate::Element;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, IxDyn};

/// Output spatial extent of a strided convolution. Panics unless the stride
/// divides exactly, which the network builders guarantee.
pub(crate) fn conv_out_dim(d: usize, k: usize, s: usize, p: usize) -> usize {
    let num = d + 2 * p - k;
    assert!(
        num % s == 0,
        "conv geometry not exact: input {d}, kernel {k}, stride {s}, pad {p}"
    );
    num / s + 1
}

/// Output spatial extent of a transpose convolution.
pub(crate) fn convt_out_dim(q: usize, k: usize, s: usize, p: usize) -> usize {
    (q - 1) * s + k - 2 * p
}

fn dims5(x: &ArrayD<impl Element>) -> [usize; 5] {
    let sh = x.shape();
    assert_eq!(sh.len(), 5, "expected 5-D [N,C,D,H,W], got {sh:?}");
    [sh[0], sh[1], sh[2], sh[3], sh[4]]
}

fn as_contiguous<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    }
}

/// Unfolds `x` into a `[N*Q, C*K]` patch matrix for kernel `k`, stride `s`,
/// zero padding `p`. Returns the matrix and the output spatial dims.
fn im2col<T: Element>(x: &ArrayD<T>, k: [usize; 3], s: usize, p: usize) -> (Array2<T>, [usize; 3]) {
    let [n, c, d, h, w] = dims5(x);
    let od = conv_out_dim(d, k[0], s, p);
    let oh = conv_out_dim(h, k[1], s, p);
    let ow = conv_out_dim(w, k[2], s, p);
    let kk = k[0] * k[1] * k[2];
    let q = od * oh * ow;
    let row_len = c * kk;
    let x = as_contiguous(x);
    let xs = x.as_slice().expect("contiguous");
    let mut cols = Array2::<T>::zeros((n * q, row_len));
    let cs = cols.as_slice_mut().expect("contiguous");

    for ni in 0..n {
        for oz in 0..od {
            let z0 = (oz * s) as i64 - p as i64;
            for oy in 0..oh {
                let y0 = (oy * s) as i64 - p as i64;
                for ox in 0..ow {
                    let x0 = (ox * s) as i64 - p as i64;
                    let row = ((ni * od + oz) * oh + oy) * ow + ox;
                    let rbase = row * row_len;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = ((w as i64 - x0).min(k[2] as i64)).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let span = kx_hi - kx_lo;
                    for ci in 0..c {
                        for kz in 0..k[0] {
                            let z = z0 + kz as i64;
                            if z < 0 || z >= d as i64 {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let y = y0 + ky as i64;
                                if y < 0 || y >= h as i64 {
                                    continue;
                                }
                                let src = (((ni * c + ci) * d + z as usize) * h + y as usize) * w
                                    + (x0 + kx_lo as i64) as usize;
                                let dst = rbase + ci * kk + (kz * k[1] + ky) * k[2] + kx_lo;
                                cs[dst..dst + span].copy_from_slice(&xs[src..src + span]);
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, [od, oh, ow])
}

/// Scatter-adds a `[N*Q, C*K]` patch matrix back into a `[N, C, D, H, W]`
/// volume: the adjoint of [`im2col`].
fn col2im<T: Element>(
    cols: &Array2<T>,
    out_dims: [usize; 5],
    k: [usize; 3],
    s: usize,
    p: usize,
) -> ArrayD<T> {
    let [n, c, d, h, w] = out_dims;
    let od = conv_out_dim(d, k[0], s, p);
    let oh = conv_out_dim(h, k[1], s, p);
    let ow = conv_out_dim(w, k[2], s, p);
    let kk = k[0] * k[1] * k[2];
    let row_len = c * kk;
    assert_eq!(cols.shape(), &[n * od * oh * ow, row_len]);
    let cs = cols.as_slice().expect("contiguous");
    let mut out = ArrayD::<T>::zeros(IxDyn(&out_dims));
    let os = out.as_slice_mut().expect("contiguous");

    for ni in 0..n {
        for oz in 0..od {
            let z0 = (oz * s) as i64 - p as i64;
            for oy in 0..oh {
                let y0 = (oy * s) as i64 - p as i64;
                for ox in 0..ow {
                    let x0 = (ox * s) as i64 - p as i64;
                    let row = ((ni * od + oz) * oh + oy) * ow + ox;
                    let rbase = row * row_len;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = ((w as i64 - x0).min(k[2] as i64)).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let span = kx_hi - kx_lo;
                    for ci in 0..c {
                        for kz in 0..k[0] {
                            let z = z0 + kz as i64;
                            if z < 0 || z >= d as i64 {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let y = y0 + ky as i64;
                                if y < 0 || y >= h as i64 {
                                    continue;
                                }
                                let dst = (((ni * c + ci) * d + z as usize) * h + y as usize) * w
                                    + (x0 + kx_lo as i64) as usize;
                                let src = rbase + ci * kk + (kz * k[1] + ky) * k[2] + kx_lo;
                                for j in 0..span {
                                    os[dst + j] = os[dst + j] + cs[src + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reinterprets `[N, C, Q...]` as a `[N*Q, C]` matrix (channel-minor copy).
fn to_rows_channel_minor<T: Element>(x: &ArrayD<T>) -> Array2<T> {
    let [n, c, d, h, w] = dims5(x);
    let q = d * h * w;
    let x = as_contiguous(x);
    let xs = x.as_slice().expect("contiguous");
    let mut out = Array2::<T>::zeros((n * q, c));
    let os = out.as_slice_mut().expect("contiguous");
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * q;
            for qi in 0..q {
                os[(ni * q + qi) * c + ci] = xs[src + qi];
            }
        }
    }
    out
}

/// Inverse of [`to_rows_channel_minor`]: `[N*Q, C]` to `[N, C, Q...]`.
fn from_rows_channel_minor<T: Element>(rows: &Array2<T>, dims: [usize; 5]) -> ArrayD<T> {
    let [n, c, d, h, w] = dims;
    let q = d * h * w;
    assert_eq!(rows.shape(), &[n * q, c]);
    let rs = rows.as_slice().expect("contiguous");
    let mut out = ArrayD::<T>::zeros(IxDyn(&dims));
    let os = out.as_slice_mut().expect("contiguous");
    for ni in 0..n {
        for ci in 0..c {
            let dst = (ni * c + ci) * q;
            for qi in 0..q {
                os[dst + qi] = rs[(ni * q + qi) * c + ci];
            }
        }
    }
    out
}

fn weight2(w: &ArrayD<impl Element>) -> ([usize; 5], usize) {
    let sh = w.shape();
    assert_eq!(sh.len(), 5, "expected 5-D weight, got {sh:?}");
    (
        [sh[0], sh[1], sh[2], sh[3], sh[4]],
        sh[1] * sh[2] * sh[3] * sh[4],
    )
}

fn is_pointwise(k: [usize; 3], s: usize, p: usize) -> bool {
    k == [1, 1, 1] && s == 1 && p == 0
}

/// Correlation with weight `[O, I, kd, kh, kw]`: `y[n,o,·] = Σ x·w`.
pub(crate) fn conv3d<T: Element>(x: &ArrayD<T>, w: &ArrayD<T>, s: usize, p: usize) -> ArrayD<T> {
    let [n, ci, d, h, wd] = dims5(x);
    let ([o, wi, kd, kh, kw], row) = weight2(w);
    assert_eq!(ci, wi, "channel mismatch: input {ci}, weight {wi}");
    let k = [kd, kh, kw];
    let wc = as_contiguous(w);
    let w2 = wc.view().into_shape_with_order((o, row)).unwrap();

    if is_pointwise(k, s, p) {
        // 1x1x1 conv is a per-sample channel mixing GEMM
        let q = d * h * wd;
        let xc = as_contiguous(x);
        let x3 = xc.view().into_shape_with_order((n, ci, q)).unwrap();
        let mut out = Array2::<T>::zeros((n * o, q));
        for ni in 0..n {
            let xn = x3.index_axis(ndarray::Axis(0), ni);
            let mut on = out.slice_mut(ndarray::s![ni * o..(ni + 1) * o, ..]);
            general_mat_mul(T::one(), &w2, &xn, T::zero(), &mut on);
        }
        return out
            .into_shape_with_order(IxDyn(&[n, o, d, h, wd]))
            .unwrap();
    }

    let (cols, [od, oh, ow]) = im2col(x, k, s, p);
    let mut y2 = Array2::<T>::zeros((cols.nrows(), o));
    general_mat_mul(T::one(), &cols, &w2.t(), T::zero(), &mut y2.view_mut());
    from_rows_channel_minor(&y2, [n, o, od, oh, ow])
}

/// Transpose convolution with weight `[Cin, Cout, kd, kh, kw]`; the adjoint
/// of [`conv3d`] in its input.
pub(crate) fn conv_transpose3d<T: Element>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    s: usize,
    p: usize,
) -> ArrayD<T> {
    let [n, ci, qd, qh, qw] = dims5(x);
    let ([wo, co, kd, kh, kw], row) = weight2(w);
    assert_eq!(ci, wo, "channel mismatch: input {ci}, weight rows {wo}");
    let k = [kd, kh, kw];
    let wc = as_contiguous(w);
    let w2 = wc.view().into_shape_with_order((wo, row)).unwrap();

    if is_pointwise(k, s, p) {
        let q = qd * qh * qw;
        let xc = as_contiguous(x);
        let x3 = xc.view().into_shape_with_order((n, ci, q)).unwrap();
        let mut out = Array2::<T>::zeros((n * co, q));
        for ni in 0..n {
            let xn = x3.index_axis(ndarray::Axis(0), ni);
            let mut on = out.slice_mut(ndarray::s![ni * co..(ni + 1) * co, ..]);
            general_mat_mul(T::one(), &w2.t(), &xn, T::zero(), &mut on);
        }
        return out
            .into_shape_with_order(IxDyn(&[n, co, qd, qh, qw]))
            .unwrap();
    }

    let td = convt_out_dim(qd, k[0], s, p);
    let th = convt_out_dim(qh, k[1], s, p);
    let tw = convt_out_dim(qw, k[2], s, p);
    let x2 = to_rows_channel_minor(x); // [N*Q, Cin]
    let mut cols = Array2::<T>::zeros((x2.nrows(), row));
    general_mat_mul(T::one(), &x2, &w2, T::zero(), &mut cols.view_mut());
    col2im(&cols, [n, co, td, th, tw], k, s, p)
}

/// Gradient of [`conv3d`] with respect to its weight: correlates the big
/// input `x` with the small output cotangent `gy`. Returns `[O, I, k...]`.
pub(crate) fn conv3d_wgrad<T: Element>(
    x: &ArrayD<T>,
    gy: &ArrayD<T>,
    k: [usize; 3],
    s: usize,
    p: usize,
) -> ArrayD<T> {
    let [n, ci, d, h, w] = dims5(x);
    let [gn, o, od, oh, ow] = dims5(gy);
    assert_eq!(n, gn, "batch mismatch");

    if is_pointwise(k, s, p) {
        let q = d * h * w;
        let xc = as_contiguous(x);
        let gc = as_contiguous(gy);
        let x3 = xc.view().into_shape_with_order((n, ci, q)).unwrap();
        let g3 = gc.view().into_shape_with_order((n, o, q)).unwrap();
        let mut w2 = Array2::<T>::zeros((o, ci));
        for ni in 0..n {
            let xn = x3.index_axis(ndarray::Axis(0), ni);
            let gn = g3.index_axis(ndarray::Axis(0), ni);
            general_mat_mul(T::one(), &gn, &xn.t(), T::one(), &mut w2.view_mut());
        }
        return w2.into_shape_with_order(IxDyn(&[o, ci, 1, 1, 1])).unwrap();
    }

    let (cols, odims) = im2col(x, k, s, p);
    assert_eq!(odims, [od, oh, ow], "cotangent spatial dims mismatch");
    let g2 = to_rows_channel_minor(gy); // [N*Q, O]
    let mut w2 = Array2::<T>::zeros((o, cols.ncols()));
    general_mat_mul(T::one(), &g2.t(), &cols, T::zero(), &mut w2.view_mut());
    w2.into_shape_with_order(IxDyn(&[o, ci, k[0], k[1], k[2]]))
        .unwrap()
}
