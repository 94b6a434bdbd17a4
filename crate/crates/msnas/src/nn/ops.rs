//! Forward and backward kernels on plain tensors.
//!
//! Every kernel here is a pure function; the tape in `nn::tape` wires them
//! into a graph. Convolutions use zero padding of `k / 2` ("same" spatial
//! size before stride), so a strided conv and a ceil-mode pool of the same
//! stride produce aligned spatial sizes.

use crate::tensor::Tensor;

/// Output spatial size of a convolution: `(h + 2*pad - k) / stride + 1`.
pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Output spatial size of a ceil-mode pool: `ceil(h / stride)`.
pub fn pool_out_size(h: usize, stride: usize) -> usize {
    h.div_ceil(stride)
}

fn valid_range(out_len: usize, in_len: usize, k_off: isize, stride: usize) -> (usize, usize) {
    // Output indices o for which i = o*stride + k_off lies in [0, in_len).
    let s = stride as isize;
    let lo = if k_off < 0 { ((-k_off) + s - 1) / s } else { 0 };
    let hi_i = in_len as isize - 1 - k_off;
    if hi_i < 0 {
        return (0, 0);
    }
    let hi = (hi_i / s + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Dense 2-D convolution. `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]` -> `[B, Co, Ho, Wo]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], ci, "conv2d weight/input channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let mut y = Tensor::zeros(&[b, co, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    let ys = y.data_mut();
    for ib in 0..b {
        for oc in 0..co {
            let y_base = (ib * co + oc) * ho * wo;
            for ic in 0..ci {
                let x_base = (ib * ci + ic) * h * wd;
                let w_base = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    let oy_off = ky as isize - pad as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, oy_off, stride);
                    for kx in 0..kw {
                        let wv = ws[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let ox_off = kx as isize - pad as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, wd, ox_off, stride);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + oy_off;
                            let xrow = x_base + iy as usize * wd;
                            let yrow = y_base + oy * wo;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + ox_off) as usize;
                                let n = ox_hi - ox_lo;
                                let xseg = &xs[xrow + ix0..xrow + ix0 + n];
                                let yseg = &mut ys[yrow + ox_lo..yrow + ox_lo + n];
                                for (yv, xv) in yseg.iter_mut().zip(xseg) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + ox_off;
                                    ys[yrow + ox] += wv * xs[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Backward of `conv2d_fwd`; returns `(dx, dw)`.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let dxs = dx.data_mut();
    let dws = dw.data_mut();
    for ib in 0..b {
        for oc in 0..co {
            let dy_base = (ib * co + oc) * ho * wo;
            for ic in 0..ci {
                let x_base = (ib * ci + ic) * h * wd;
                let w_base = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    let oy_off = ky as isize - pad as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, oy_off, stride);
                    for kx in 0..kw {
                        let wv = ws[w_base + ky * kw + kx];
                        let ox_off = kx as isize - pad as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, wd, ox_off, stride);
                        let mut wsum = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + oy_off;
                            let xrow = x_base + iy as usize * wd;
                            let dyrow = dy_base + oy * wo;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + ox_off) as usize;
                                let n = ox_hi - ox_lo;
                                let xseg = &xs[xrow + ix0..xrow + ix0 + n];
                                let dyseg = &dys[dyrow + ox_lo..dyrow + ox_lo + n];
                                let dxseg = &mut dxs[xrow + ix0..xrow + ix0 + n];
                                for i in 0..n {
                                    wsum += xseg[i] * dyseg[i];
                                    dxseg[i] += wv * dyseg[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + ox_off) as usize;
                                    let g = dys[dyrow + ox];
                                    wsum += xs[xrow + ix] * g;
                                    dxs[xrow + ix] += wv * g;
                                }
                            }
                        }
                        dws[w_base + ky * kw + kx] += wsum;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Depthwise 2-D convolution. `x: [B, C, H, W]`, `w: [C, k, k]` -> `[B, C, Ho, Wo]`.
pub fn dwconv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[1], w.shape()[2]);
    assert_eq!(w.shape()[0], c, "dwconv2d weight/input channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    let ys = y.data_mut();
    for ib in 0..b {
        for ic in 0..c {
            let x_base = (ib * c + ic) * h * wd;
            let y_base = (ib * c + ic) * ho * wo;
            let w_base = ic * kh * kw;
            for ky in 0..kh {
                let oy_off = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = valid_range(ho, h, oy_off, stride);
                for kx in 0..kw {
                    let wv = ws[w_base + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_off = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = valid_range(wo, wd, ox_off, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + oy_off;
                        let xrow = x_base + iy as usize * wd;
                        let yrow = y_base + oy * wo;
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + ox_off) as usize;
                            let n = ox_hi - ox_lo;
                            let xseg = &xs[xrow + ix0..xrow + ix0 + n];
                            let yseg = &mut ys[yrow + ox_lo..yrow + ox_lo + n];
                            for (yv, xv) in yseg.iter_mut().zip(xseg) {
                                *yv += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + ox_off) as usize;
                                ys[yrow + ox] += wv * xs[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Backward of `dwconv2d_fwd`; returns `(dx, dw)`.
pub fn dwconv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[1], w.shape()[2]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let dxs = dx.data_mut();
    let dws = dw.data_mut();
    for ib in 0..b {
        for ic in 0..c {
            let x_base = (ib * c + ic) * h * wd;
            let dy_base = (ib * c + ic) * ho * wo;
            let w_base = ic * kh * kw;
            for ky in 0..kh {
                let oy_off = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = valid_range(ho, h, oy_off, stride);
                for kx in 0..kw {
                    let wv = ws[w_base + ky * kw + kx];
                    let ox_off = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = valid_range(wo, wd, ox_off, stride);
                    let mut wsum = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + oy_off;
                        let xrow = x_base + iy as usize * wd;
                        let dyrow = dy_base + oy * wo;
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + ox_off) as usize;
                            let n = ox_hi - ox_lo;
                            let xseg = &xs[xrow + ix0..xrow + ix0 + n];
                            let dyseg = &dys[dyrow + ox_lo..dyrow + ox_lo + n];
                            let dxseg = &mut dxs[xrow + ix0..xrow + ix0 + n];
                            for i in 0..n {
                                wsum += xseg[i] * dyseg[i];
                                dxseg[i] += wv * dyseg[i];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + ox_off) as usize;
                                let g = dys[dyrow + ox];
                                wsum += xs[xrow + ix] * g;
                                dxs[xrow + ix] += wv * g;
                            }
                        }
                    }
                    dws[w_base + ky * kw + kx] += wsum;
                }
            }
        }
    }
    (dx, dw)
}

pub fn add_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let mut y = a.clone();
    for (yv, bv) in y.data_mut().iter_mut().zip(b.data()) {
        *yv += bv;
    }
    y
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_bwd(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Per-sample normalization over the whole `[C, H, W]` slice with per-channel
/// affine parameters. `x: [B, C, H, W]`, `gamma/beta: [C]`.
///
/// Returns `(y, xhat, inv_std)` where `xhat` and `inv_std` are saved for the
/// backward pass.
pub fn slice_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = c * h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; b];
    if n == 0 {
        return (y, xhat, inv_std);
    }
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();
    for ib in 0..b {
        let base = ib * n;
        let sl = &xs[base..base + n];
        let mean = sl.iter().sum::<f64>() / n as f64;
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ib] = istd;
        for ic in 0..c {
            let g = gs[ic];
            let bt = bs[ic];
            for i in 0..h * w {
                let idx = base + ic * h * w + i;
                let xh = (xs[idx] - mean) * istd;
                xhat.data_mut()[idx] = xh;
                y.data_mut()[idx] = g * xh + bt;
            }
        }
    }
    (y, xhat, inv_std)
}

/// Backward of `slice_norm_fwd`; returns `(dx, dgamma, dbeta)`.
pub fn slice_norm_bwd(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2], xhat.shape()[3]);
    let n = c * h * w;
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    if n == 0 {
        return (dx, dgamma, dbeta);
    }
    let xh = xhat.data();
    let gs = gamma.data();
    let dys = dy.data();
    for ib in 0..b {
        let base = ib * n;
        // dxhat = dy * gamma; also accumulate per-channel param grads.
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for ic in 0..c {
            let g = gs[ic];
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..h * w {
                let idx = base + ic * h * w + i;
                let d = dys[idx];
                dg += d * xh[idx];
                db += d;
                let dxh = d * g;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[idx];
            }
            dgamma.data_mut()[ic] += dg;
            dbeta.data_mut()[ic] += db;
        }
        let m_dxh = sum_dxh / n as f64;
        let m_dxh_xh = sum_dxh_xh / n as f64;
        let istd = inv_std[ib];
        for ic in 0..c {
            let g = gs[ic];
            for i in 0..h * w {
                let idx = base + ic * h * w + i;
                dx.data_mut()[idx] = istd * (dys[idx] * g - m_dxh - xh[idx] * m_dxh_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Ceil-mode average pool with window = stride, edge windows clipped.
pub fn avg_pool_fwd(x: &Tensor, stride: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = pool_out_size(h, stride);
    let wo = pool_out_size(w, stride);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let xs = x.data();
    let ys = y.data_mut();
    for ibc in 0..b * c {
        let x_base = ibc * h * w;
        let y_base = ibc * ho * wo;
        for oy in 0..ho {
            let y0 = oy * stride;
            let y1 = (y0 + stride).min(h);
            for ox in 0..wo {
                let x0 = ox * stride;
                let x1 = (x0 + stride).min(w);
                let mut s = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xs[x_base + iy * w + ix];
                    }
                }
                ys[y_base + oy * wo + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

pub fn avg_pool_bwd(x_shape: &[usize], stride: usize, dy: &Tensor) -> Tensor {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x_shape);
    let dys = dy.data();
    let dxs = dx.data_mut();
    for ibc in 0..b * c {
        let x_base = ibc * h * w;
        let y_base = ibc * ho * wo;
        for oy in 0..ho {
            let y0 = oy * stride;
            let y1 = (y0 + stride).min(h);
            for ox in 0..wo {
                let x0 = ox * stride;
                let x1 = (x0 + stride).min(w);
                let g = dys[y_base + oy * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dxs[x_base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// `[B, C, H, W]` -> `[B, C]` spatial mean.
pub fn global_avg_pool_fwd(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(&[b, c]);
    let n = (h * w) as f64;
    for ib in 0..b {
        for ic in 0..c {
            let base = (ib * c + ic) * h * w;
            y.data_mut()[ib * c + ic] = x.data()[base..base + h * w].iter().sum::<f64>() / n;
        }
    }
    y
}

pub fn global_avg_pool_bwd(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let n = (h * w) as f64;
    for ib in 0..b {
        for ic in 0..c {
            let g = dy.data()[ib * c + ic] / n;
            let base = (ib * c + ic) * h * w;
            for v in &mut dx.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    dx
}

/// `x: [B, F]`, `w: [K, F]`, `b: [K]` -> `[B, K]`.
pub fn linear_fwd(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    assert_eq!(w.shape()[1], f, "linear weight/input mismatch");
    let mut y = Tensor::zeros(&[b, k]);
    for ib in 0..b {
        let xrow = &x.data()[ib * f..(ib + 1) * f];
        for ik in 0..k {
            let wrow = &w.data()[ik * f..(ik + 1) * f];
            let mut s = bias.data()[ik];
            for i in 0..f {
                s += xrow[i] * wrow[i];
            }
            y.data_mut()[ib * k + ik] = s;
        }
    }
    y
}

pub fn linear_bwd(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[k]);
    for ib in 0..b {
        let xrow = &x.data()[ib * f..(ib + 1) * f];
        for ik in 0..k {
            let g = dy.data()[ib * k + ik];
            db.data_mut()[ik] += g;
            let wrow = &w.data()[ik * f..(ik + 1) * f];
            let dxrow = &mut dx.data_mut()[ib * f..(ib + 1) * f];
            for i in 0..f {
                dxrow[i] += g * wrow[i];
            }
            let dwrow = &mut dw.data_mut()[ik * f..(ik + 1) * f];
            for i in 0..f {
                dwrow[i] += g * xrow[i];
            }
        }
    }
    (dx, dw, db)
}

/// Select indices along `axis` (0 or 1) of a tensor with up to 4 dims.
pub fn index_select_fwd(x: &Tensor, axis: usize, idx: &[usize]) -> Tensor {
    let shape = x.shape();
    assert!(axis < 2, "index_select supports axis 0 or 1");
    let mut out_shape = shape.to_vec();
    out_shape[axis] = idx.len();
    let mut y = Tensor::zeros(&out_shape);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let ax_len = shape[axis];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < ax_len, "index_select index out of range");
            let src = (o * ax_len + i) * inner;
            let dst = (o * idx.len() + j) * inner;
            y.data_mut()[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    y
}

/// Backward of `index_select_fwd`: scatter-add into the source shape.
pub fn index_select_bwd(x_shape: &[usize], axis: usize, idx: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let inner: usize = x_shape[axis + 1..].iter().product();
    let outer: usize = x_shape[..axis].iter().product();
    let ax_len = x_shape[axis];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            let dst = (o * ax_len + i) * inner;
            let src = (o * idx.len() + j) * inner;
            for t in 0..inner {
                dx.data_mut()[dst + t] += dy.data()[src + t];
            }
        }
    }
    dx
}

/// Center-crop the trailing two (square, odd) dims from `k` to `target`.
pub fn crop_center_fwd(x: &Tensor, target: usize) -> Tensor {
    let nd = x.shape().len();
    let k = x.shape()[nd - 1];
    assert_eq!(x.shape()[nd - 2], k, "crop expects square trailing dims");
    assert!(target <= k && (k - target) % 2 == 0);
    let off = (k - target) / 2;
    let lead: usize = x.shape()[..nd - 2].iter().product();
    let mut out_shape = x.shape().to_vec();
    out_shape[nd - 2] = target;
    out_shape[nd - 1] = target;
    let mut y = Tensor::zeros(&out_shape);
    for l in 0..lead {
        for r in 0..target {
            let src = l * k * k + (r + off) * k + off;
            let dst = l * target * target + r * target;
            y.data_mut()[dst..dst + target].copy_from_slice(&x.data()[src..src + target]);
        }
    }
    y
}

pub fn crop_center_bwd(x_shape: &[usize], target: usize, dy: &Tensor) -> Tensor {
    let nd = x_shape.len();
    let k = x_shape[nd - 1];
    let off = (k - target) / 2;
    let lead: usize = x_shape[..nd - 2].iter().product();
    let mut dx = Tensor::zeros(x_shape);
    for l in 0..lead {
        for r in 0..target {
            let dst = l * k * k + (r + off) * k + off;
            let src = l * target * target + r * target;
            for t in 0..target {
                dx.data_mut()[dst + t] += dy.data()[src + t];
            }
        }
    }
    dx
}

/// Row-wise linear map: `x: [N, P]`, `m: [P, P]` -> `y = x * m^T`.
pub fn mat_transform_fwd(x: &Tensor, m: &Tensor) -> Tensor {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    assert_eq!(m.shape(), &[p, p], "transform matrix shape mismatch");
    let mut y = Tensor::zeros(&[n, p]);
    for i in 0..n {
        let xrow = &x.data()[i * p..(i + 1) * p];
        for r in 0..p {
            let mrow = &m.data()[r * p..(r + 1) * p];
            let mut s = 0.0;
            for c in 0..p {
                s += mrow[c] * xrow[c];
            }
            y.data_mut()[i * p + r] = s;
        }
    }
    y
}

pub fn mat_transform_bwd(x: &Tensor, m: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let mut dx = Tensor::zeros(&[n, p]);
    let mut dm = Tensor::zeros(&[p, p]);
    for i in 0..n {
        let xrow = &x.data()[i * p..(i + 1) * p];
        let dyrow = &dy.data()[i * p..(i + 1) * p];
        for r in 0..p {
            let g = dyrow[r];
            let mrow = &m.data()[r * p..(r + 1) * p];
            let dxrow = &mut dx.data_mut()[i * p..(i + 1) * p];
            for c in 0..p {
                dxrow[c] += g * mrow[c];
            }
            let dmrow = &mut dm.data_mut()[r * p..(r + 1) * p];
            for c in 0..p {
                dmrow[c] += g * xrow[c];
            }
        }
    }
    (dx, dm)
}

/// Row-wise softmax of `[B, K]` logits, numerically stabilized.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut y = Tensor::zeros(&[b, k]);
    for ib in 0..b {
        let row = &logits.data()[ib * k..(ib + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..k {
            let e = (row[i] - mx).exp();
            y.data_mut()[ib * k + i] = e;
            z += e;
        }
        for i in 0..k {
            y.data_mut()[ib * k + i] /= z;
        }
    }
    y
}

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn softmax_ce_fwd(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), b);
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for ib in 0..b {
        loss -= probs.data()[ib * k + labels[ib]].max(1e-300).ln();
    }
    (loss / b as f64, probs)
}

pub fn softmax_ce_bwd(probs: &Tensor, labels: &[usize], dloss: f64) -> Tensor {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut dl = probs.clone();
    for ib in 0..b {
        dl.data_mut()[ib * k + labels[ib]] -= 1.0;
    }
    let scale = dloss / b as f64;
    for v in dl.data_mut() {
        *v *= scale;
    }
    dl
}

/// Mean KL(softmax(student/tau) || softmax(teacher/tau)) over the batch.
pub fn kd_kl_fwd(student: &Tensor, teacher: &Tensor, tau: f64) -> f64 {
    let (b, k) = (student.shape()[0], student.shape()[1]);
    assert_eq!(teacher.shape(), student.shape());
    let mut total = 0.0;
    for ib in 0..b {
        let (lp, lq) = (
            log_softmax_row(&student.data()[ib * k..(ib + 1) * k], tau),
            log_softmax_row(&teacher.data()[ib * k..(ib + 1) * k], tau),
        );
        for i in 0..k {
            total += lp[i].exp() * (lp[i] - lq[i]);
        }
    }
    total / b as f64
}

pub fn kd_kl_bwd(student: &Tensor, teacher: &Tensor, tau: f64, dloss: f64) -> Tensor {
    let (b, k) = (student.shape()[0], student.shape()[1]);
    let mut ds = Tensor::zeros(student.shape());
    for ib in 0..b {
        let lp = log_softmax_row(&student.data()[ib * k..(ib + 1) * k], tau);
        let lq = log_softmax_row(&teacher.data()[ib * k..(ib + 1) * k], tau);
        let mut kl = 0.0;
        for i in 0..k {
            kl += lp[i].exp() * (lp[i] - lq[i]);
        }
        for i in 0..k {
            let p = lp[i].exp();
            ds.data_mut()[ib * k + i] = dloss * p * ((lp[i] - lq[i]) - kl) / (tau * b as f64);
        }
    }
    ds
}

fn log_softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    scaled.iter().map(|v| v - lse).collect()
}

/// Root-mean-square error between predictions and targets (both `[N]`).
pub fn rmse_fwd(pred: &Tensor, target: &[f64]) -> f64 {
    let n = pred.len();
    assert_eq!(n, target.len());
    let mse = pred
        .data()
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;
    mse.sqrt()
}

pub fn rmse_bwd(pred: &Tensor, target: &[f64], rmse: f64, dloss: f64) -> Tensor {
    let n = pred.len();
    let mut dp = Tensor::zeros(pred.shape());
    if rmse <= 1e-300 {
        return dp;
    }
    let scale = dloss / (n as f64 * rmse);
    for i in 0..n {
        dp.data_mut()[i] = scale * (pred.data()[i] - target[i]);
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Scalar loss used to drive finite-difference checks: weighted sum of
    /// outputs with fixed pseudo-random coefficients.
    fn probe_loss(y: &Tensor, coeffs: &Tensor) -> f64 {
        y.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum()
    }

    fn fd_check(
        mut eval: impl FnMut(&[Tensor]) -> f64,
        inputs: &[Tensor],
        analytic: &[Tensor],
        tol: f64,
    ) {
        let h = 1e-5;
        for (arg, grad) in analytic.iter().enumerate() {
            let mut work: Vec<Tensor> = inputs.to_vec();
            for i in 0..work[arg].len() {
                let orig = work[arg].data()[i];
                work[arg].data_mut()[i] = orig + h;
                let up = eval(&work);
                work[arg].data_mut()[i] = orig - h;
                let dn = eval(&work);
                work[arg].data_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let g = grad.data()[i];
                let denom = g.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((g - fd) / denom).abs() < tol,
                    "arg {} index {}: analytic {} vs fd {}",
                    arg,
                    i,
                    g,
                    fd
                );
            }
        }
    }

    #[test]
    fn conv2d_matches_hand_value() {
        // 1x1 input, 1x1 kernel: plain multiply-accumulate across channels.
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 2.0]).unwrap();
        let y = conv2d_fwd(&x, &w, 1, 0);
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv2d_same_padding_size() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert_eq!(conv2d_fwd(&x, &w, 1, 1).shape(), &[1, 1, 5, 5]);
        assert_eq!(conv2d_fwd(&x, &w, 2, 1).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv2d_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 2, 5), (2, 0, 1)] {
            let x = randn(&mut rng, &[2, 3, 5, 5], 1.0);
            let w = randn(&mut rng, &[2, 3, k, k], 0.5);
            let y = conv2d_fwd(&x, &w, stride, pad);
            let coeffs = randn(&mut rng, y.shape(), 1.0);
            let (dx, dw) = conv2d_bwd(&x, &w, stride, pad, &coeffs);
            fd_check(
                |args| probe_loss(&conv2d_fwd(&args[0], &args[1], stride, pad), &coeffs),
                &[x.clone(), w.clone()],
                &[dx, dw],
                1e-5,
            );
        }
    }

    #[test]
    fn dwconv2d_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, k) in &[(1usize, 3usize), (2, 3), (1, 5)] {
            let pad = k / 2;
            let x = randn(&mut rng, &[2, 3, 5, 5], 1.0);
            let w = randn(&mut rng, &[3, k, k], 0.5);
            let y = dwconv2d_fwd(&x, &w, stride, pad);
            let coeffs = randn(&mut rng, y.shape(), 1.0);
            let (dx, dw) = dwconv2d_bwd(&x, &w, stride, pad, &coeffs);
            fd_check(
                |args| probe_loss(&dwconv2d_fwd(&args[0], &args[1], stride, pad), &coeffs),
                &[x.clone(), w.clone()],
                &[dx, dw],
                1e-5,
            );
        }
    }

    #[test]
    fn dwconv2d_matches_conv2d_with_diagonal_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[1, 3, 6, 6], 1.0);
        let w = randn(&mut rng, &[3, 3, 3], 1.0);
        let mut full = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            for i in 0..9 {
                full.data_mut()[(c * 3 + c) * 9 + i] = w.data()[c * 9 + i];
            }
        }
        let a = dwconv2d_fwd(&x, &w, 1, 1);
        let b = conv2d_fwd(&x, &full, 1, 1);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn slice_norm_normalizes_and_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 3, 4, 4], 2.0);
        let gamma = randn(&mut rng, &[3], 1.0);
        let beta = randn(&mut rng, &[3], 1.0);
        let eps = 1e-5;
        let (y, xhat, istd) = slice_norm_fwd(&x, &gamma, &beta, eps);
        // xhat has zero mean and unit variance per sample.
        let n = 3 * 4 * 4;
        for ib in 0..2 {
            let sl = &xhat.data()[ib * n..(ib + 1) * n];
            let m: f64 = sl.iter().sum::<f64>() / n as f64;
            let v: f64 = sl.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let coeffs = randn(&mut rng, y.shape(), 1.0);
        let (dx, dg, db) = slice_norm_bwd(&xhat, &istd, &gamma, &coeffs);
        fd_check(
            |args| {
                let (y, _, _) = slice_norm_fwd(&args[0], &args[1], &args[2], eps);
                probe_loss(&y, &coeffs)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            &[dx, dg, db],
            1e-4,
        );
    }

    #[test]
    fn slice_norm_empty_channels() {
        let x = Tensor::zeros(&[2, 0, 4, 4]);
        let gamma = Tensor::zeros(&[0]);
        let beta = Tensor::zeros(&[0]);
        let (y, _, _) = slice_norm_fwd(&x, &gamma, &beta, 1e-5);
        assert_eq!(y.len(), 0);
    }

    #[test]
    fn pools_and_linear_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 5, 5], 1.0);
        let yp = avg_pool_fwd(&x, 2);
        assert_eq!(yp.shape(), &[2, 3, 3, 3]); // ceil(5/2)
        let coeffs = randn(&mut rng, yp.shape(), 1.0);
        let dx = avg_pool_bwd(x.shape(), 2, &coeffs);
        fd_check(
            |args| probe_loss(&avg_pool_fwd(&args[0], 2), &coeffs),
            &[x.clone()],
            &[dx],
            1e-5,
        );

        let g = global_avg_pool_fwd(&x);
        let gc = randn(&mut rng, g.shape(), 1.0);
        let dxg = global_avg_pool_bwd(x.shape(), &gc);
        fd_check(
            |args| probe_loss(&global_avg_pool_fwd(&args[0]), &gc),
            &[x.clone()],
            &[dxg],
            1e-5,
        );

        let xf = randn(&mut rng, &[3, 4], 1.0);
        let w = randn(&mut rng, &[2, 4], 1.0);
        let b = randn(&mut rng, &[2], 1.0);
        let y = linear_fwd(&xf, &w, &b);
        let lc = randn(&mut rng, y.shape(), 1.0);
        let (dx, dw, db) = linear_bwd(&xf, &w, &lc);
        fd_check(
            |args| probe_loss(&linear_fwd(&args[0], &args[1], &args[2]), &lc),
            &[xf.clone(), w.clone(), b.clone()],
            &[dx, dw, db],
            1e-5,
        );
    }

    #[test]
    fn index_select_and_crop_roundtrip_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[4, 3, 2, 2], 1.0);
        let idx = vec![2usize, 0];
        let y = index_select_fwd(&x, 0, &idx);
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        let coeffs = randn(&mut rng, y.shape(), 1.0);
        let dx = index_select_bwd(x.shape(), 0, &idx, &coeffs);
        fd_check(
            |args| probe_loss(&index_select_fwd(&args[0], 0, &idx), &coeffs),
            &[x.clone()],
            &[dx],
            1e-5,
        );

        let y1 = index_select_fwd(&x, 1, &[1usize, 1]);
        assert_eq!(y1.shape(), &[4, 2, 2, 2]);

        let w = randn(&mut rng, &[2, 7, 7], 1.0);
        let c = crop_center_fwd(&w, 3);
        assert_eq!(c.shape(), &[2, 3, 3]);
        let cc = randn(&mut rng, c.shape(), 1.0);
        let dwt = crop_center_bwd(w.shape(), 3, &cc);
        fd_check(
            |args| probe_loss(&crop_center_fwd(&args[0], 3), &cc),
            &[w.clone()],
            &[dwt],
            1e-5,
        );
    }

    #[test]
    fn mat_transform_identity_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 4], 1.0);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        assert!(mat_transform_fwd(&x, &eye).max_abs_diff(&x) < 1e-15);

        let m = randn(&mut rng, &[4, 4], 1.0);
        let y = mat_transform_fwd(&x, &m);
        let coeffs = randn(&mut rng, y.shape(), 1.0);
        let (dx, dm) = mat_transform_bwd(&x, &m, &coeffs);
        fd_check(
            |args| probe_loss(&mat_transform_fwd(&args[0], &args[1]), &coeffs),
            &[x.clone(), m.clone()],
            &[dx, dm],
            1e-5,
        );
    }

    #[test]
    fn softmax_ce_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = randn(&mut rng, &[3, 5], 2.0);
        let labels = vec![0usize, 3, 4];
        let (_, probs) = softmax_ce_fwd(&logits, &labels);
        let dl = softmax_ce_bwd(&probs, &labels, 1.0);
        fd_check(
            |args| softmax_ce_fwd(&args[0], &labels).0,
            &[logits.clone()],
            &[dl],
            1e-5,
        );
    }

    #[test]
    fn kd_kl_zero_when_equal_and_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = randn(&mut rng, &[2, 4], 1.0);
        assert_eq!(kd_kl_fwd(&s, &s, 2.0), 0.0);

        let t = randn(&mut rng, &[2, 4], 1.0);
        for &tau in &[1.0, 3.0] {
            let ds = kd_kl_bwd(&s, &t, tau, 1.0);
            fd_check(
                |args| kd_kl_fwd(&args[0], &t, tau),
                &[s.clone()],
                &[ds],
                1e-5,
            );
        }
    }

    #[test]
    fn rmse_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pred = randn(&mut rng, &[6], 1.0);
        let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let r = rmse_fwd(&pred, &target);
        let dp = rmse_bwd(&pred, &target, r, 1.0);
        fd_check(
            |args| rmse_fwd(&args[0], &target),
            &[pred.clone()],
            &[dp],
            1e-5,
        );
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = Tensor::zeros(&[1, 10]);
        let p = softmax_rows(&logits);
        for v in p.data() {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }
}
