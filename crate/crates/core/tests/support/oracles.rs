//! Naive-loop reference implementations shared by the kernel tests and the
//! acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symwd_core::tensor::{conv2d, conv2d_transpose_sized, dense, ConvParams, DenseParams, Tensor};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_conv(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize, stride: usize, pad: usize) -> ConvParams<f64> {
    ConvParams::new(
        random_tensor(rng, &[o, c, k, k]),
        random_tensor(rng, &[o]),
        stride,
        pad,
    )
    .unwrap()
}

/// Seven nested loops, no lowering.
pub fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [
        p.weights.shape()[0],
        p.weights.shape()[1],
        p.weights.shape()[2],
        p.weights.shape()[3],
    ];
    let (s, pad) = (p.stride as isize, p.padding as isize);
    let oh = ((h as isize + 2 * pad - kh as isize) / s + 1) as usize;
    let ow = ((w as isize + 2 * pad - kw as isize) / s + 1) as usize;
    let xd = x.data();
    let wd = p.weights.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * s + ky as isize - pad;
                                let ix = ox as isize * s + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wd[((oc * c + ic) * kh + ky) * kw + kx]
                                    * xd[((b * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as: interleave `stride − 1` zeros between input
/// pixels, pad by `k − 1 − pad` (plus any extra output rows on the high side),
/// then run the naive convolution with the kernel flipped and its channel axes
/// swapped.
pub fn scatter_then_convolve(x: &Tensor<f64>, p: &ConvParams<f64>, out_h: usize, out_w: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [
        p.weights.shape()[0],
        p.weights.shape()[1],
        p.weights.shape()[2],
        p.weights.shape()[3],
    ];
    let s = p.stride;
    let (lo_h, lo_w) = (kh - 1 - p.padding, kw - 1 - p.padding);
    let base_h = (h - 1) * s + kh - 2 * p.padding;
    let base_w = (w - 1) * s + kw - 2 * p.padding;
    let gh = (h - 1) * s + 1 + 2 * lo_h + (out_h - base_h);
    let gw = (w - 1) * s + 1 + 2 * lo_w + (out_w - base_w);
    let mut grid = vec![0.0; n * c * gh * gw];
    for b in 0..n {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    grid[((b * c + ic) * gh + lo_h + iy * s) * gw + lo_w + ix * s] =
                        x.data()[((b * c + ic) * h + iy) * w + ix];
                }
            }
        }
    }
    let grid = Tensor::new(&[n, c, gh, gw], grid).unwrap();
    let mut flipped = vec![0.0; o * c * kh * kw];
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped[((oc * c + ic) * kh + ky) * kw + kx] =
                        p.weights.data()[((oc * c + ic) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)];
                }
            }
        }
    }
    let conv = ConvParams::new(
        Tensor::new(&[o, c, kh, kw], flipped).unwrap(),
        p.bias.clone(),
        1,
        0,
    )
    .unwrap();
    naive_conv(&grid, &conv)
}

pub fn naive_dense(x: &Tensor<f64>, p: &DenseParams<f64>) -> Vec<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = p.weights.shape()[0];
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            let mut acc = p.bias.data()[j];
            for k in 0..f {
                acc += x.data()[i * f + k] * p.weights.data()[j * f + k];
            }
            out[i * g + j] = acc;
        }
    }
    out
}

fn max_abs_diff(actual: &Tensor<f32>, expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual.data().iter().zip(expected).map(|(&a, e)| (f64::from(a) - e).abs()).fold(0.0, f64::max)
}

/// Largest absolute deviation from the oracle over `cases` random shapes.
#[derive(Debug, Clone, Copy)]
pub struct SweepResult {
    pub cases: usize,
    pub max_error: f64,
}

pub fn conv2d_sweep(seed: u64, cases: usize) -> SweepResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let o = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..k);
        let h = rng.gen_range(k..=10);
        let w = rng.gen_range(k..=10);
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let p = random_conv(&mut rng, o, c, k, stride, pad);
        let y = conv2d(&x.cast::<f32>(), &p.cast::<f32>()).unwrap();
        max_error = max_error.max(max_abs_diff(&y, &naive_conv(&x, &p)));
    }
    SweepResult { cases, max_error }
}

pub fn conv_transpose_sweep(seed: u64, cases: usize) -> SweepResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error = 0.0f64;
    let mut done = 0;
    while done < cases {
        let n = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let o = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..k);
        let h = rng.gen_range(2..=7);
        let w = rng.gen_range(2..=7);
        let base_h = ((h - 1) * stride + k) as isize - 2 * pad as isize;
        let base_w = ((w - 1) * stride + k) as isize - 2 * pad as isize;
        if base_h < 1 || base_w < 1 {
            continue;
        }
        let out_h = base_h as usize + rng.gen_range(0..stride);
        let out_w = base_w as usize + rng.gen_range(0..stride);
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let p = random_conv(&mut rng, o, c, k, stride, pad);
        let y = conv2d_transpose_sized(&x.cast::<f32>(), &p.cast::<f32>(), out_h, out_w).unwrap();
        max_error = max_error.max(max_abs_diff(&y, &scatter_then_convolve(&x, &p, out_h, out_w)));
        done += 1;
    }
    SweepResult { cases, max_error }
}

pub fn dense_sweep(seed: u64, cases: usize) -> SweepResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..=6);
        let f = rng.gen_range(1..=40);
        let g = rng.gen_range(1..=20);
        let x = random_tensor(&mut rng, &[n, f]);
        let p = DenseParams::new(random_tensor(&mut rng, &[g, f]), random_tensor(&mut rng, &[g])).unwrap();
        let y = dense(&x.cast::<f32>(), &p.cast::<f32>()).unwrap();
        max_error = max_error.max(max_abs_diff(&y, &naive_dense(&x, &p)));
    }
    SweepResult { cases, max_error }
}
