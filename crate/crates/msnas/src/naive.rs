//! Naive reference kernels: explicit zero-padded buffers and plain nested
//! loops, with an optional multiply counter. These exist to cross-check the
//! production kernels and the closed-form cost accounting; they share no
//! loop structure with either.

use crate::tensor::Tensor;

fn pad_input(x: &Tensor, pad: usize) -> (Vec<f64>, usize, usize) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; b * c * hp * wp];
    for bc in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[bc * hp * wp + (y + pad) * wp + (xx + pad)] = x.data()[bc * h * w + y * w + xx];
            }
        }
    }
    (out, hp, wp)
}

/// Dense convolution over an explicitly padded buffer: every output position
/// performs exactly `in * k * k` multiplies, each counted when a counter is
/// supplied.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, macs: Option<&mut u64>) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], ci);
    let (xp, hp, wp) = pad_input(x, pad);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(&[b, co, ho, wo]);
    let mut count = 0u64;
    for ib in 0..b {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iv = xp[((ib * ci + ic) * hp + oy * stride + ky) * wp
                                    + ox * stride
                                    + kx];
                                let wv = w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                acc += iv * wv;
                                count += 1;
                            }
                        }
                    }
                    y.data_mut()[((ib * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    if let Some(m) = macs {
        *m += count;
    }
    y
}

/// Depthwise convolution over a padded buffer; `k * k` multiplies per output
/// position per channel.
pub fn dwconv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    macs: Option<&mut u64>,
) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[1], w.shape()[2]);
    assert_eq!(w.shape()[0], c);
    let (xp, hp, wp) = pad_input(x, pad);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut count = 0u64;
    for ib in 0..b {
        for ic in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iv = xp[((ib * c + ic) * hp + oy * stride + ky) * wp
                                + ox * stride
                                + kx];
                            acc += iv * w.data()[(ic * kh + ky) * kw + kx];
                            count += 1;
                        }
                    }
                    y.data_mut()[((ib * c + ic) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    if let Some(m) = macs {
        *m += count;
    }
    y
}

/// Plain matrix-vector classifier head; `in * out` multiplies per sample.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor, macs: Option<&mut u64>) -> Tensor {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut y = Tensor::zeros(&[b, k]);
    let mut count = 0u64;
    for ib in 0..b {
        for ik in 0..k {
            let mut acc = bias.data()[ik];
            for i in 0..f {
                acc += x.data()[ib * f + i] * w.data()[ik * f + i];
                count += 1;
            }
            y.data_mut()[ib * k + ik] = acc;
        }
    }
    if let Some(m) = macs {
        *m += count;
    }
    y
}

/// Per-sample normalization over the whole channel slice, fresh math.
pub fn slice_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = c * h * w;
    let mut y = Tensor::zeros(x.shape());
    if n == 0 {
        return y;
    }
    for ib in 0..b {
        let sl = &x.data()[ib * n..(ib + 1) * n];
        let mean: f64 = sl.iter().sum::<f64>() / n as f64;
        let var: f64 = sl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        for ic in 0..c {
            for i in 0..h * w {
                let idx = ib * n + ic * h * w + i;
                y.data_mut()[idx] = gamma[ic] * (x.data()[idx] - mean) * istd + beta[ic];
            }
        }
    }
    y
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let mut y = a.clone();
    for (v, u) in y.data_mut().iter_mut().zip(b.data()) {
        *v += u;
    }
    y
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(&[b, c]);
    for ib in 0..b {
        for ic in 0..c {
            let base = (ib * c + ic) * h * w;
            y.data_mut()[ib * c + ic] =
                x.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
        }
    }
    y
}

pub fn avg_pool_ceil(x: &Tensor, stride: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    for bc in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for iy in oy * stride..((oy + 1) * stride).min(h) {
                    for ix in ox * stride..((ox + 1) * stride).min(w) {
                        acc += x.data()[bc * h * w + iy * w + ix];
                        cnt += 1.0;
                    }
                }
                y.data_mut()[bc * ho * wo + oy * wo + ox] = acc / cnt;
            }
        }
    }
    y
}

/// Channel-wise concatenation of NCHW tensors.
pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    let (b, h, w) = (xs[0].shape()[0], xs[0].shape()[2], xs[0].shape()[3]);
    let total: usize = xs.iter().map(|x| x.shape()[1]).sum();
    let mut y = Tensor::zeros(&[b, total, h, w]);
    for ib in 0..b {
        let mut off = 0;
        for x in xs {
            let c = x.shape()[1];
            let src = ib * c * h * w;
            let dst = (ib * total + off) * h * w;
            y.data_mut()[dst..dst + c * h * w].copy_from_slice(&x.data()[src..src + c * h * w]);
            off += c;
        }
    }
    y
}
