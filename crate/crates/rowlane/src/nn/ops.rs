//! Functional tensor ops with hand-written backward passes.
//!
//! Feature maps are `Array4<T>` with (batch, channels, height, width) axes.
//! Convolution runs as im2col + matmul; the column matrix is rebuilt during
//! the backward pass instead of being cached, trading a little compute for
//! a much smaller memory footprint.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::Real;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Expand one sample into the (C*k*k, out_h*out_w) column matrix.
pub fn im2col<T: Real>(
    x: &ArrayView2<'_, T>, // (C, H*W) flattened sample
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let out_h = conv_out_dim(h, k, stride, pad);
    let out_w = conv_out_dim(w, k, stride, pad);
    let mut col = Array2::<T>::zeros((c * k * k, out_h * out_w));
    // Non-contiguous inputs are healed by a copy rather than rejected.
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("owned copy is contiguous")
        }
    };
    {
        let cs = col.as_slice_mut().expect("col is contiguous");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_base = row * out_h * out_w;
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = ci * h * w + iy as usize * w;
                        let dst_row = dst_base + oy * out_w;
                        if stride == 1 {
                            // ix = ox + kx - pad; clip to [0, w)
                            let shift = kx as isize - pad as isize;
                            let ox_lo = (-shift).max(0) as usize;
                            let ox_hi = ((w as isize - shift).min(out_w as isize)).max(0) as usize;
                            if ox_lo < ox_hi {
                                let src_lo = (ox_lo as isize + shift) as usize;
                                cs[dst_row + ox_lo..dst_row + ox_hi].copy_from_slice(
                                    &xs[src_base + src_lo..src_base + src_lo + (ox_hi - ox_lo)],
                                );
                            }
                        } else {
                            for ox in 0..out_w {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[dst_row + ox] = xs[src_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column-matrix gradient back onto the input sample.
fn col2im_acc<T: Real>(
    gcol: &Array2<T>,
    gx: &mut [T], // (C*H*W) slice of the sample gradient
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let out_h = conv_out_dim(h, k, stride, pad);
    let out_w = conv_out_dim(w, k, stride, pad);
    let gs = gcol.as_slice().expect("gcol is contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_base = row * out_h * out_w;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_row = src_base + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = dst_base + ix as usize;
                            gx[d] = gx[d] + gs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `w` is (out_c, in_c, k, k); bias optional.
pub fn conv2d_fwd<T: Real>(
    x: &Array4<T>,
    w: &ArrayView4<'_, T>,
    b: Option<&ArrayView1<'_, T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (bsz, in_c, h, wd) = x.dim();
    let (out_c, w_in_c, k, k2) = w.dim();
    assert_eq!(in_c, w_in_c, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    let out_h = conv_out_dim(h, k, stride, pad);
    let out_w = conv_out_dim(wd, k, stride, pad);
    let w2 = w
        .to_shape((out_c, in_c * k * k))
        .expect("weight reshape");
    let mut y = Array4::<T>::zeros((bsz, out_c, out_h, out_w));
    for bi in 0..bsz {
        let xb = x.index_axis(Axis(0), bi);
        let xflat = xb
            .to_shape((in_c, h * wd))
            .expect("sample reshape");
        let col = im2col(&xflat.view(), in_c, h, wd, k, stride, pad);
        let out = w2.dot(&col); // (out_c, out_h*out_w)
        let mut yb = y.index_axis_mut(Axis(0), bi);
        let ys = yb.as_slice_mut().expect("contiguous");
        ys.copy_from_slice(out.as_slice().expect("contiguous"));
        if let Some(bias) = b {
            for oc in 0..out_c {
                let bv = bias[oc];
                for v in &mut ys[oc * out_h * out_w..(oc + 1) * out_h * out_w] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

/// Convolution backward. Returns grad wrt input; accumulates grad wrt weight
/// and bias into the provided buffers.
pub fn conv2d_bwd<T: Real>(
    x: &Array4<T>,
    w: &ArrayView4<'_, T>,
    gy: &Array4<T>,
    gw: &mut ndarray::ArrayViewMutD<'_, T>,
    gb: Option<&mut ndarray::ArrayViewMutD<'_, T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (bsz, in_c, h, wd) = x.dim();
    let (out_c, _, k, _) = w.dim();
    let (_, gy_c, out_h, out_w) = gy.dim();
    assert_eq!(gy_c, out_c);
    let w2 = w
        .to_shape((out_c, in_c * k * k))
        .expect("weight reshape");
    let mut gx = Array4::<T>::zeros((bsz, in_c, h, wd));
    let mut gw_acc = Array2::<T>::zeros((out_c, in_c * k * k));
    for bi in 0..bsz {
        let xb = x.index_axis(Axis(0), bi);
        let xflat = xb.to_shape((in_c, h * wd)).expect("sample reshape");
        let col = im2col(&xflat.view(), in_c, h, wd, k, stride, pad);
        let gyb = gy.index_axis(Axis(0), bi);
        let gym = gyb
            .to_shape((out_c, out_h * out_w))
            .expect("grad reshape");
        // dW += gy . col^T
        ndarray::linalg::general_mat_mul(T::one(), &gym.view(), &col.t(), T::one(), &mut gw_acc);
        // dx = col2im(W^T . gy)
        let gcol = w2.t().dot(&gym.view());
        let mut gxb = gx.index_axis_mut(Axis(0), bi);
        col2im_acc(
            &gcol,
            gxb.as_slice_mut().expect("contiguous"),
            in_c,
            h,
            wd,
            k,
            stride,
            pad,
        );
    }
    {
        let mut gwv = gw.view_mut().into_shape_with_order((out_c, in_c * k * k)).expect("gw reshape");
        gwv.zip_mut_with(&gw_acc, |d, &s| *d = *d + s);
    }
    if let Some(gbv) = gb {
        let mut gb1 = gbv
            .view_mut()
            .into_shape_with_order(out_c)
            .expect("gb reshape");
        for oc in 0..out_c {
            let mut acc = T::zero();
            for bi in 0..bsz {
                acc = acc
                    + gy.slice(s![bi, oc, .., ..])
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
            }
            gb1[oc] = gb1[oc] + acc;
        }
    }
    gx
}

/// Cached values from a batch-norm forward needed for its backward.
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
    /// True when normalization used batch statistics (training mode).
    pub batch_stats: bool,
}

/// Batch-norm forward. In training mode returns the updated running
/// statistics so the caller can commit them after the step.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_fwd<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayView1<'_, T>,
    beta: &ArrayView1<'_, T>,
    running_mean: &ArrayView1<'_, T>,
    running_var: &ArrayView1<'_, T>,
    eps: f64,
    momentum: f64,
    train: bool,
) -> (Array4<T>, BnCache<T>, Option<(Array1<T>, Array1<T>)>) {
    let (bsz, c, h, w) = x.dim();
    let n = (bsz * h * w) as f64;
    let eps_t = T::of(eps);
    let (mean, var) = if train {
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut acc = T::zero();
            for bi in 0..bsz {
                for v in x.slice(s![bi, ci, .., ..]).iter() {
                    acc = acc + *v;
                }
            }
            let m = acc / T::of(n);
            let mut vacc = T::zero();
            for bi in 0..bsz {
                for v in x.slice(s![bi, ci, .., ..]).iter() {
                    let d = *v - m;
                    vacc = vacc + d * d;
                }
            }
            mean[ci] = m;
            var[ci] = vacc / T::of(n);
        }
        (mean, var)
    } else {
        (running_mean.to_owned(), running_var.to_owned())
    };

    let inv_std = var.mapv(|v| T::one() / (v + eps_t).sqrt());
    let mut xhat = x.clone();
    for ci in 0..c {
        let m = mean[ci];
        let is = inv_std[ci];
        for bi in 0..bsz {
            for v in xhat.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                *v = (*v - m) * is;
            }
        }
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let g = gamma[ci];
        let b = beta[ci];
        for bi in 0..bsz {
            for v in y.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                *v = *v * g + b;
            }
        }
    }

    let updates = if train {
        let m_t = T::of(momentum);
        let one_m = T::of(1.0 - momentum);
        // Unbiased variance for the running estimate.
        let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let new_mean =
            running_mean.to_owned() * one_m + mean.mapv(|v| v * m_t);
        let new_var = running_var.to_owned() * one_m
            + var.mapv(|v| v * T::of(bessel) * m_t);
        Some((new_mean, new_var))
    } else {
        None
    };

    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: train,
        },
        updates,
    )
}

/// Batch-norm backward. Accumulates gamma/beta grads, returns input grad.
pub fn batchnorm_bwd<T: Real>(
    cache: &BnCache<T>,
    gamma: &ArrayView1<'_, T>,
    gy: &Array4<T>,
    ggamma: &mut ndarray::ArrayViewMutD<'_, T>,
    gbeta: &mut ndarray::ArrayViewMutD<'_, T>,
) -> Array4<T> {
    let (bsz, c, h, w) = gy.dim();
    let n = T::of((bsz * h * w) as f64);
    let mut gx = Array4::<T>::zeros(gy.raw_dim());
    let mut gg = ggamma
        .view_mut()
        .into_shape_with_order(c)
        .expect("ggamma reshape");
    let mut gb = gbeta
        .view_mut()
        .into_shape_with_order(c)
        .expect("gbeta reshape");
    for ci in 0..c {
        let mut sum_gy = T::zero();
        let mut sum_gy_xhat = T::zero();
        for bi in 0..bsz {
            let gys = gy.slice(s![bi, ci, .., ..]);
            let xh = cache.xhat.slice(s![bi, ci, .., ..]);
            for (g, x) in gys.iter().zip(xh.iter()) {
                sum_gy = sum_gy + *g;
                sum_gy_xhat = sum_gy_xhat + *g * *x;
            }
        }
        gg[ci] = gg[ci] + sum_gy_xhat;
        gb[ci] = gb[ci] + sum_gy;
        let scale = gamma[ci] * cache.inv_std[ci];
        if cache.batch_stats {
            for bi in 0..bsz {
                let gys = gy.slice(s![bi, ci, .., ..]);
                let xh = cache.xhat.slice(s![bi, ci, .., ..]);
                let mut gxs = gx.slice_mut(s![bi, ci, .., ..]);
                for ((gx_v, g), x) in gxs.iter_mut().zip(gys.iter()).zip(xh.iter()) {
                    *gx_v = scale * (*g - sum_gy / n - *x * sum_gy_xhat / n);
                }
            }
        } else {
            for bi in 0..bsz {
                let gys = gy.slice(s![bi, ci, .., ..]);
                let mut gxs = gx.slice_mut(s![bi, ci, .., ..]);
                for (gx_v, g) in gxs.iter_mut().zip(gys.iter()) {
                    *gx_v = scale * *g;
                }
            }
        }
    }
    gx
}

pub fn relu_fwd<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_bwd<T: Real>(y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= T::zero() {
            *g = T::zero()
        }
    });
    gx
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Horizontal average pooling by ratio `r` (height untouched).
pub fn hpool_avg_fwd<T: Real>(x: &Array4<T>, r: usize) -> Array4<T> {
    let (bsz, c, h, w) = x.dim();
    assert_eq!(w % r, 0, "width divisible by pooling ratio");
    let ow = w / r;
    let inv_r = T::of(1.0 / r as f64);
    let mut y = Array4::<T>::zeros((bsz, c, h, ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wo in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..r {
                        acc = acc + x[[bi, ci, hi, wo * r + i]];
                    }
                    y[[bi, ci, hi, wo]] = acc * inv_r;
                }
            }
        }
    }
    y
}

pub fn hpool_avg_bwd<T: Real>(gy: &Array4<T>, r: usize) -> Array4<T> {
    let (bsz, c, h, ow) = gy.dim();
    let inv_r = T::of(1.0 / r as f64);
    let mut gx = Array4::<T>::zeros((bsz, c, h, ow * r));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wo in 0..ow {
                    let g = gy[[bi, ci, hi, wo]] * inv_r;
                    for i in 0..r {
                        gx[[bi, ci, hi, wo * r + i]] = g;
                    }
                }
            }
        }
    }
    gx
}

/// Global average pooling to (B, C).
pub fn gap_fwd<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (bsz, c, h, w) = x.dim();
    let inv = T::of(1.0 / (h * w) as f64);
    let mut y = Array2::<T>::zeros((bsz, c));
    for bi in 0..bsz {
        for ci in 0..c {
            let mut acc = T::zero();
            for v in x.slice(s![bi, ci, .., ..]).iter() {
                acc = acc + *v;
            }
            y[[bi, ci]] = acc * inv;
        }
    }
    y
}

pub fn gap_bwd<T: Real>(gy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (bsz, c) = gy.dim();
    let inv = T::of(1.0 / (h * w) as f64);
    let mut gx = Array4::<T>::zeros((bsz, c, h, w));
    for bi in 0..bsz {
        for ci in 0..c {
            let g = gy[[bi, ci]] * inv;
            gx.slice_mut(s![bi, ci, .., ..]).fill(g);
        }
    }
    gx
}

/// Fully connected: y = x . W^T + b, with x (B, in) and W (out, in).
pub fn linear_fwd<T: Real>(
    x: &Array2<T>,
    w: &ArrayView2<'_, T>,
    b: Option<&ArrayView1<'_, T>>,
) -> Array2<T> {
    let mut y = x.dot(&w.t());
    if let Some(bias) = b {
        for mut row in y.outer_iter_mut() {
            row.zip_mut_with(bias, |v, &bv| *v = *v + bv);
        }
    }
    y
}

pub fn linear_bwd<T: Real>(
    x: &Array2<T>,
    w: &ArrayView2<'_, T>,
    gy: &Array2<T>,
    gw: &mut ndarray::ArrayViewMutD<'_, T>,
    gb: Option<&mut ndarray::ArrayViewMutD<'_, T>>,
) -> Array2<T> {
    let (out_c, in_c) = w.dim();
    {
        let mut gwv = gw
            .view_mut()
            .into_shape_with_order((out_c, in_c))
            .expect("gw reshape");
        ndarray::linalg::general_mat_mul(T::one(), &gy.t(), &x.view(), T::one(), &mut gwv);
    }
    if let Some(gbv) = gb {
        let mut gb1 = gbv
            .view_mut()
            .into_shape_with_order(out_c)
            .expect("gb reshape");
        for gyr in gy.outer_iter() {
            gb1.zip_mut_with(&gyr, |d, &s| *d = *d + s);
        }
    }
    gy.dot(w)
}

/// Horizontal pixel unshuffle: (B, C, H, W) -> (B, rC, H, W/r).
/// Element (c, h, w) moves to (c*r + w mod r, h, w/r).
pub fn hunshuffle_fwd<T: Real>(x: &Array4<T>, r: usize) -> Array4<T> {
    let (bsz, c, h, w) = x.dim();
    assert_eq!(w % r, 0, "width divisible by unshuffle ratio");
    let ow = w / r;
    let mut y = Array4::<T>::zeros((bsz, c * r, h, ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    y[[bi, ci * r + wi % r, hi, wi / r]] = x[[bi, ci, hi, wi]];
                }
            }
        }
    }
    y
}

/// Inverse of [`hunshuffle_fwd`]: (B, rC, H, W) -> (B, C, H, rW).
pub fn hshuffle_fwd<T: Real>(x: &Array4<T>, r: usize) -> Array4<T> {
    let (bsz, rc, h, w) = x.dim();
    assert_eq!(rc % r, 0, "channels divisible by shuffle ratio");
    let c = rc / r;
    let mut y = Array4::<T>::zeros((bsz, c, h, w * r));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w * r {
                    y[[bi, ci, hi, wi]] = x[[bi, ci * r + wi % r, hi, wi / r]];
                }
            }
        }
    }
    y
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x_fwd<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (bsz, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((bsz, c, h * 2, w * 2));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[bi, ci, hi, wi]];
                    y[[bi, ci, 2 * hi, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_bwd<T: Real>(gy: &Array4<T>) -> Array4<T> {
    let (bsz, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<T>::zeros((bsz, c, h, w));
    for bi in 0..bsz {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    gx[[bi, ci, hi, wi]] = gy[[bi, ci, 2 * hi, 2 * wi]]
                        + gy[[bi, ci, 2 * hi, 2 * wi + 1]]
                        + gy[[bi, ci, 2 * hi + 1, 2 * wi]]
                        + gy[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    gx
}

/// Concatenate two maps along the channel axis.
pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    // Built by hand: ndarray's concatenate can return a layout with the
    // concat axis outermost, which the conv fast path cannot slice.
    let (bsz, ca, h, w) = a.dim();
    let (bsz_b, cb, hb, wb) = b.dim();
    assert_eq!((bsz, h, w), (bsz_b, hb, wb), "concat spatial dims");
    let mut y = Array4::<T>::zeros((bsz, ca + cb, h, w));
    y.slice_mut(s![.., ..ca, .., ..]).assign(a);
    y.slice_mut(s![.., ca.., .., ..]).assign(b);
    y
}

/// Split a channel-axis gradient back into the two concat inputs.
pub fn split_channels<T: Real>(g: &Array4<T>, c_a: usize) -> (Array4<T>, Array4<T>) {
    let ga = g.slice(s![.., ..c_a, .., ..]).to_owned();
    let gb = g.slice(s![.., c_a.., .., ..]).to_owned();
    (ga, gb)
}

/// Per-sample per-channel scaling (the squeeze-excitation gate).
pub fn channel_scale_fwd<T: Real>(x: &Array4<T>, scale: &Array2<T>) -> Array4<T> {
    let (bsz, c, _, _) = x.dim();
    let mut y = x.clone();
    for bi in 0..bsz {
        for ci in 0..c {
            let sv = scale[[bi, ci]];
            for v in y.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                *v = *v * sv;
            }
        }
    }
    y
}

/// Backward of [`channel_scale_fwd`]: returns (grad x, grad scale).
pub fn channel_scale_bwd<T: Real>(
    x: &Array4<T>,
    scale: &Array2<T>,
    gy: &Array4<T>,
) -> (Array4<T>, Array2<T>) {
    let (bsz, c, _, _) = x.dim();
    let mut gx = gy.clone();
    let mut gs = Array2::<T>::zeros((bsz, c));
    for bi in 0..bsz {
        for ci in 0..c {
            let sv = scale[[bi, ci]];
            let mut acc = T::zero();
            let xs = x.slice(s![bi, ci, .., ..]);
            let gys = gy.slice(s![bi, ci, .., ..]);
            for (xv, gv) in xs.iter().zip(gys.iter()) {
                acc = acc + *xv * *gv;
            }
            gs[[bi, ci]] = acc;
            for v in gx.slice_mut(s![bi, ci, .., ..]).iter_mut() {
                *v = *v * sv;
            }
        }
    }
    (gx, gs)
}

/// Inverted dropout; the mask already carries the 1/keep scaling.
pub fn dropout_mask<T: Real, R: rand::Rng>(shape: (usize, usize, usize, usize), p: f64, rng: &mut R) -> Array4<T> {
    let keep = 1.0 - p;
    let scale = T::of(1.0 / keep);
    let mut mask = Array4::<T>::zeros(shape);
    for v in mask.iter_mut() {
        *v = if rng.gen::<f64>() < keep {
            scale
        } else {
            T::zero()
        };
    }
    mask
}
