//! Dense tensor kernels with hand-written backward passes.
//!
//! Activations are `(channels, rows, cols)`. Every kernel is parallel over one
//! output axis and sequential inside it, so results do not depend on the
//! worker count.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Zero-padded 2-D convolution. `w` is `(out, in, k, k)`.
pub fn conv2d(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (c_in, h, wd) = x.dim();
    let (c_out, c_w, k, _) = w.dim();
    assert_eq!(c_in, c_w, "conv2d channel mismatch");
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Array3::zeros((c_out, oh, ow));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(o, mut plane)| {
        plane.fill(b[o]);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[o, c, ky, kx]];
                    for i in 0..oh {
                        let Some(y) = tap(i, ky, stride, pad, h) else { continue };
                        for j in 0..ow {
                            if let Some(xx) = tap(j, kx, stride, pad, wd) {
                                plane[[i, j]] += wv * x[[c, y, xx]];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let p = (o * stride + k).checked_sub(pad)?;
    (p < n).then_some(p)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    g: ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c_in, h, wd) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, oh, ow) = g.dim();

    let mut gw = Array4::zeros(w.dim());
    gw.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(o, mut gwo)| {
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let Some(y) = tap(i, ky, stride, pad, h) else { continue };
                        for j in 0..ow {
                            if let Some(xx) = tap(j, kx, stride, pad, wd) {
                                acc += g[[o, i, j]] * x[[c, y, xx]];
                            }
                        }
                    }
                    gwo[[c, ky, kx]] = acc;
                }
            }
        }
    });
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(1));

    let mut gx = Array3::zeros(x.dim());
    gx.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(c, mut gxc)| {
        for o in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[o, c, ky, kx]];
                    for i in 0..oh {
                        let Some(y) = tap(i, ky, stride, pad, h) else { continue };
                        for j in 0..ow {
                            if let Some(xx) = tap(j, kx, stride, pad, wd) {
                                gxc[[y, xx]] += wv * g[[o, i, j]];
                            }
                        }
                    }
                }
            }
        }
    });
    (gx, gw, gb)
}

/// Transposed convolution with kernel size equal to the stride (no overlap).
/// `w` is `(in, out, k, k)`; output is `k` times larger in both directions.
pub fn conv_transpose(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    let (c_in, h, wd) = x.dim();
    let (c_w, c_out, k, _) = w.dim();
    assert_eq!(c_in, c_w, "conv_transpose channel mismatch");
    let mut out = Array3::zeros((c_out, h * k, wd * k));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(o, mut plane)| {
        plane.fill(b[o]);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[c, o, ky, kx]];
                    for i in 0..h {
                        for j in 0..wd {
                            plane[[i * k + ky, j * k + kx]] += wv * x[[c, i, j]];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_transpose_backward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    g: ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (_, h, wd) = x.dim();
    let (_, c_out, k, _) = w.dim();

    let mut gw = Array4::zeros(w.dim());
    gw.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(c, mut gwc)| {
        for o in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for i in 0..h {
                        for j in 0..wd {
                            acc += x[[c, i, j]] * g[[o, i * k + ky, j * k + kx]];
                        }
                    }
                    gwc[[o, ky, kx]] = acc;
                }
            }
        }
    });
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(1));

    let mut gx = Array3::zeros(x.dim());
    gx.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(c, mut gxc)| {
        for o in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[c, o, ky, kx]];
                    for i in 0..h {
                        for j in 0..wd {
                            gxc[[i, j]] += wv * g[[o, i * k + ky, j * k + kx]];
                        }
                    }
                }
            }
        }
    });
    (gx, gw, gb)
}

/// Non-overlapping `d × d` average pooling.
pub fn avg_pool(x: ArrayView3<f64>, d: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let inv = 1.0 / (d * d) as f64;
    Array3::from_shape_fn((c, h / d, w / d), |(ch, i, j)| {
        x.slice(s![ch, i * d..(i + 1) * d, j * d..(j + 1) * d]).sum() * inv
    })
}

pub fn avg_pool_backward(g: ArrayView3<f64>, d: usize) -> Array3<f64> {
    let (c, h, w) = g.dim();
    let inv = 1.0 / (d * d) as f64;
    Array3::from_shape_fn((c, h * d, w * d), |(ch, y, x)| g[[ch, y / d, x / d]] * inv)
}

/// `g ⊙ (1 − y²)` for `y = tanh(a)`.
pub fn tanh_backward(y: ArrayView3<f64>, g: ArrayView3<f64>) -> Array3<f64> {
    let mut out = g.to_owned();
    out.zip_mut_with(&y, |gv, &yv| *gv *= 1.0 - yv * yv);
    out
}

/// Latent columns `cols` as tokens: row `j` holds column `j`, entry `c·H + h`.
pub fn columns_to_tokens(latent: ArrayView3<f64>, cols: std::ops::Range<usize>) -> Array2<f64> {
    let (c, h, _) = latent.dim();
    let n = cols.len();
    Array2::from_shape_fn((n, c * h), |(j, t)| latent[[t / h, t % h, cols.start + j]])
}

/// Writes tokens back into latent columns starting at `col0`.
pub fn tokens_to_columns(tokens: ArrayView2<f64>, latent: &mut Array3<f64>, col0: usize) {
    let h = latent.dim().1;
    for ((j, t), &v) in tokens.indexed_iter() {
        latent[[t / h, t % h, col0 + j]] = v;
    }
}
