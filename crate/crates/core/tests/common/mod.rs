//! Scalar-loop reference implementations shared by the integration tests.
//! Written directly from the math, independent of the library's kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use dlcaps::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(r, n, lo, hi)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// TF-style padding: output `ceil(n / s)`, the odd pixel goes after the input.
pub fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

/// Direct convolution of NHWC `x` with a `[K, K, Cin/groups, Cout]` kernel.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [n, h, w, cin]: [usize; 4],
    kernel: &[f64],
    k: usize,
    cout: usize,
    bias: Option<&[f64]>,
    stride: usize,
    same: bool,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (oh, pt) = if same { same_pad(h, k, stride) } else { ((h - k) / stride + 1, 0) };
    let (ow, pl) = if same { same_pad(w, k, stride) } else { ((w - k) / stride + 1, 0) };
    let cg = cin / groups;
    let og = cout / groups;
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let grp = co / og;
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cg {
                                let xv = x[((b * h + iy as usize) * w + ix as usize) * cin + grp * cg + ci];
                                let kv = kernel[((ky * k + kx) * cg + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (out, [n, oh, ow, cout])
}

pub fn naive_squash(v: &[f64]) -> Vec<f64> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    v.iter().map(|x| n2 / (1.0 + n2) * x / (n + 1e-8)).collect()
}

/// Routing over votes `[n_in][n_out][d]` (flat); returns outputs `[n_out][d]`
/// and every iteration's couplings `[n_in][n_out]`.
pub fn naive_dynamic_routing(votes: &[f64], n_in: usize, n_out: usize, d: usize, iters: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let u = |i: usize, j: usize, k: usize| votes[(i * n_out + j) * d + k];
    let mut b = vec![0.0; n_in * n_out];
    let mut v = vec![0.0; n_out * d];
    let mut history = Vec::new();
    for it in 0..iters {
        let mut c = vec![0.0; n_in * n_out];
        for i in 0..n_in {
            let m = (0..n_out).map(|j| b[i * n_out + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n_out).map(|j| (b[i * n_out + j] - m).exp()).sum();
            for j in 0..n_out {
                c[i * n_out + j] = (b[i * n_out + j] - m).exp() / z;
            }
        }
        for j in 0..n_out {
            let mut s = vec![0.0; d];
            for i in 0..n_in {
                for k in 0..d {
                    s[k] += c[i * n_out + j] * u(i, j, k);
                }
            }
            v[j * d..(j + 1) * d].copy_from_slice(&naive_squash(&s));
        }
        history.push(c);
        if it + 1 < iters {
            for i in 0..n_in {
                for j in 0..n_out {
                    b[i * n_out + j] += (0..d).map(|k| u(i, j, k) * v[j * d + k]).sum::<f64>();
                }
            }
        }
    }
    (v, history)
}

/// 3-D routing for one image `[h, w, c_in, d_in]` with a vote kernel
/// `[K, K, d_in, c_in·c_out·d_out]` (input type `i` owns output channels
/// `i·c_out·d_out ..`). Returns `[oh, ow, c_out, d_out]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_routing3d(
    x: &[f64],
    (h, w, c_in, d_in): (usize, usize, usize, usize),
    kernel: &[f64],
    k: usize,
    stride: usize,
    c_out: usize,
    d_out: usize,
    iters: usize,
) -> (Vec<f64>, (usize, usize)) {
    let (oh, pt) = same_pad(h, k, stride);
    let (ow, pl) = same_pad(w, k, stride);
    let width = c_in * c_out * d_out;
    let mut out = Vec::with_capacity(oh * ow * c_out * d_out);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut votes = vec![0.0; c_in * c_out * d_out];
            for i in 0..c_in {
                for j in 0..c_out {
                    for e in 0..d_out {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..d_in {
                                    let xv = x[((iy as usize * w + ix as usize) * c_in + i) * d_in + c];
                                    let kv = kernel[((ky * k + kx) * d_in + c) * width + (i * c_out + j) * d_out + e];
                                    acc += xv * kv;
                                }
                            }
                        }
                        votes[(i * c_out + j) * d_out + e] = acc;
                    }
                }
            }
            out.extend(naive_dynamic_routing(&votes, c_in, c_out, d_out, iters).0);
        }
    }
    (out, (oh, ow))
}

/// Per-capsule margin loss for one row.
pub fn naive_margin(lengths: &[f64], label: usize, m_plus: f64, m_minus: f64, lambda: f64) -> f64 {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            if k == label {
                (m_plus - l).max(0.0).powi(2)
            } else {
                lambda * (l - m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}
