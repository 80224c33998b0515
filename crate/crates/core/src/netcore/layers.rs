//! Convolution (3x3, zero padding 1) via im2col and instance normalization.
//!
//! Activations use a channel-major batch layout: channel `c`, sample `b`,
//! pixel `p` lives at `c * (batch * pixels) + b * pixels + p`.

use super::{matmul, matmul_nt, matmul_tn, Real};

pub const KERNEL: usize = 3;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub(crate) fn conv_out_size(size: usize, stride: usize) -> usize {
    (size + 2 - KERNEL) / stride + 1
}

/// Unfolds `input` (`cin` channels of `size x size`) into
/// `(cin * 9) x (batch * out * out)` columns.
pub(crate) fn im2col<T: Real>(
    input: &[T],
    cin: usize,
    batch: usize,
    size: usize,
    stride: usize,
    cols: &mut Vec<T>,
) {
    let out = conv_out_size(size, stride);
    let (pin, pout) = (size * size, out * out);
    let width = batch * pout;
    cols.clear();
    cols.resize(cin * KERNEL * KERNEL * width, T::zero());
    for c in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..batch {
                    let src = &input[c * batch * pin + b * pin..][..pin];
                    for oy in 0..out {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let base = b * pout + oy * out;
                        for ox in 0..out {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < size as isize {
                                dst[base + ox] = src[iy as usize * size + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    batch: usize,
    size: usize,
    stride: usize,
    out_grad: &mut [T],
) {
    let out = conv_out_size(size, stride);
    let (pin, pout) = (size * size, out * out);
    let width = batch * pout;
    out_grad.iter_mut().for_each(|g| *g = T::zero());
    for c in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..batch {
                    let dst = &mut out_grad[c * batch * pin + b * pin..][..pin];
                    for oy in 0..out {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let base = b * pout + oy * out;
                        for ox in 0..out {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < size as isize {
                                dst[iy as usize * size + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = W * cols + bias`, with `W` stored `cout x (cin * 9)`.
pub(crate) fn conv_forward<T: Real>(
    kernel: &[T],
    bias: &[T],
    cols: &[T],
    cout: usize,
    rows: usize,
    width: usize,
    y: &mut Vec<T>,
) {
    y.clear();
    y.resize(cout * width, T::zero());
    for (c, chunk) in y.chunks_exact_mut(width).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[c]);
    }
    matmul(kernel, cols, y, cout, rows, width, true);
}

/// Gradients of [`conv_forward`]; `dcols` is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    kernel: &[T],
    cols: &[T],
    dy: &[T],
    cout: usize,
    rows: usize,
    width: usize,
    dkernel: &mut [T],
    dbias: &mut [T],
    dcols: Option<&mut Vec<T>>,
) {
    for (c, chunk) in dy.chunks_exact(width).enumerate() {
        dbias[c] += chunk.iter().copied().sum::<T>();
    }
    matmul_nt(dy, cols, dkernel, cout, width, rows, true);
    if let Some(dcols) = dcols {
        dcols.clear();
        dcols.resize(rows * width, T::zero());
        matmul_tn(kernel, dy, dcols, rows, cout, width, false);
    }
}

/// Normalizes each `(channel, sample)` slab of `pixels` values to zero mean
/// and unit variance (epsilon floored), writing `xhat` and `1/std`.
pub fn instance_norm_forward<T: Real>(
    y: &[T],
    channels: usize,
    batch: usize,
    pixels: usize,
    xhat: &mut Vec<T>,
    inv_std: &mut Vec<T>,
) {
    let eps = T::of(INSTANCE_NORM_EPS);
    let n = T::of(pixels as f64);
    xhat.clear();
    xhat.resize(y.len(), T::zero());
    inv_std.clear();
    inv_std.resize(channels * batch, T::zero());
    for (slab, (src, dst)) in y
        .chunks_exact(pixels)
        .zip(xhat.chunks_exact_mut(pixels))
        .enumerate()
    {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[slab] = inv;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
}

/// Backward through normalization given `dxhat`; overwrites it with `dy`.
pub(crate) fn instance_norm_backward<T: Real>(
    xhat: &[T],
    inv_std: &[T],
    pixels: usize,
    dxhat: &mut [T],
) {
    let n = T::of(pixels as f64);
    for (slab, (g, xh)) in dxhat
        .chunks_exact_mut(pixels)
        .zip(xhat.chunks_exact(pixels))
        .enumerate()
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let inv = inv_std[slab];
        for (gi, &xi) in g.iter_mut().zip(xh) {
            *gi = inv * (*gi - mean_g - xi * mean_gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_sizes() {
        assert_eq!(conv_out_size(16, 2), 8);
        assert_eq!(conv_out_size(2, 1), 2);
        assert_eq!(conv_out_size(64, 2), 32);
        assert_eq!(conv_out_size(3, 2), 2);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (cin, batch, size, stride) = (2, 3, 5, 2);
        let n_in = cin * batch * size * size;
        let x: Vec<f64> = (0..n_in).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let mut cols = Vec::new();
        im2col(&x, cin, batch, size, stride, &mut cols);
        let r: Vec<f64> = (0..cols.len())
            .map(|i| ((i * 3 % 13) as f64) * 0.5)
            .collect();
        let mut back = vec![0.0; n_in];
        col2im(&r, cin, batch, size, stride, &mut back);
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (cin, cout, batch, size, stride) = (2, 3, 2, 4, 2);
        let out = conv_out_size(size, stride);
        let x: Vec<f64> = (0..cin * batch * size * size)
            .map(|i| (i as f64 * 0.3).sin())
            .collect();
        let w: Vec<f64> = (0..cout * cin * 9)
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut cols = Vec::new();
        im2col(&x, cin, batch, size, stride, &mut cols);
        let mut y = Vec::new();
        conv_forward(&w, &bias, &cols, cout, cin * 9, batch * out * out, &mut y);
        for co in 0..cout {
            for b in 0..batch {
                for oy in 0..out {
                    for ox in 0..out {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= size as isize
                                        || ix >= size as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[ci * batch * size * size
                                        + b * size * size
                                        + iy as usize * size
                                        + ix as usize];
                                    acc += w[((co * cin + ci) * 3 + ky) * 3 + kx] * xv;
                                }
                            }
                        }
                        let got = y[co * batch * out * out + b * out * out + oy * out + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn instance_norm_moments() {
        let (channels, batch, pixels) = (3, 2, 16);
        let y: Vec<f64> = (0..channels * batch * pixels)
            .map(|i| ((i * 37 % 17) as f64) * 0.4 - 2.0 + (i / pixels) as f64)
            .collect();
        let (mut xhat, mut inv) = (Vec::new(), Vec::new());
        instance_norm_forward(&y, channels, batch, pixels, &mut xhat, &mut inv);
        for slab in xhat.chunks_exact(pixels) {
            let mean: f64 = slab.iter().sum::<f64>() / pixels as f64;
            let var: f64 = slab.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pixels as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }

        // constant channel: floored, output zero
        let flat = vec![2.5f64; pixels];
        instance_norm_forward(&flat, 1, 1, pixels, &mut xhat, &mut inv);
        assert!(xhat.iter().all(|&v| v == 0.0));
        assert!((inv[0] - 1.0 / INSTANCE_NORM_EPS.sqrt()).abs() < 1e-6);
    }
}
