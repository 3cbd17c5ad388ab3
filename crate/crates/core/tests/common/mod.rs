//! Straight-line reference implementations on plain `Vec<f64>` buffers,
//! written without touching the crate's graph ops.

#![allow(dead_code)]

use std::f64::consts::PI;

use fsat_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `a[m,k] * b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn softmax_rows(a: &mut [f64], cols: usize) {
    for row in a.chunks_mut(cols) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

pub fn layer_norm(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j]);
        }
    }
    out
}

/// Mirror index without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Same-size cross-correlation over `[n, c, h, w]` with an odd `k x k` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    out_c: usize,
    k: usize,
    bias: &[f64],
    reflect_pad: bool,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; n * out_c * h * w];
    for b in 0..n {
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                let v = if reflect_pad {
                                    x[((b * c + ci) * h + reflect(sy, h)) * w + reflect(sx, w)]
                                } else if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    0.0
                                } else {
                                    x[((b * c + ci) * h + sy as usize) * w + sx as usize]
                                };
                                s += v * weight[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * out_c + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

/// Orthonormal DCT-II basis value at `(y, x)`.
pub fn dct_weight(a: usize, b: usize, h: usize, w: usize, y: usize, x: usize) -> f64 {
    let la = if a == 0 {
        (1.0 / h as f64).sqrt()
    } else {
        (2.0 / h as f64).sqrt()
    };
    let lb = if b == 0 {
        (1.0 / w as f64).sqrt()
    } else {
        (2.0 / w as f64).sqrt()
    };
    la * lb
        * (PI * a as f64 * (y as f64 + 0.5) / h as f64).cos()
        * (PI * b as f64 * (x as f64 + 0.5) / w as f64).cos()
}

/// Zigzag frequency list: by `a + b`, then `a`, skipping out-of-range pairs.
pub fn zigzag(count: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..h).flat_map(|a| (0..w).map(move |b| (a, b))).collect();
    all.sort_by_key(|&(a, b)| (a + b, a));
    all.truncate(count);
    all
}

/// Token-mixing step `x/2 + mean/2` over rows of a `tokens x d` block.
pub fn context_broadcast(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
        }
    }
    x.chunks(d)
        .flat_map(|row| {
            (0..d)
                .map(|j| 0.5 * row[j] + 0.5 * mean[j])
                .collect::<Vec<_>>()
        })
        .collect()
}
