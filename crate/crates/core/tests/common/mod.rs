//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use capsnet::model::BoundParams;
use capsnet::tensor::TensorError;
use capsnet::{CapsNetConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod fd;
pub mod props;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Multiples of 1/8 in [-2, 2]; sums of products stay exactly representable.
pub fn dyadic(r: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-16i32..=16) as f32 / 8.0).collect()
}

/// Shrunken architecture: 8 conv kernels, 2 primary types on a 4×4 grid,
/// ten 4D digit capsules.
pub fn shrunken() -> CapsNetConfig {
    CapsNetConfig {
        input_size: 24,
        conv1_channels: 8,
        conv1_kernel: 9,
        primary_types: 2,
        primary_dim: 4,
        primary_kernel: 9,
        primary_stride: 2,
        num_classes: 10,
        digit_dim: 4,
        decoder_hidden: [16, 24],
        ..CapsNetConfig::default()
    }
}

/// Very small model for fast training-loop tests (12×12 input).
pub fn tiny() -> CapsNetConfig {
    CapsNetConfig {
        input_size: 12,
        conv1_channels: 4,
        conv1_kernel: 3,
        primary_types: 2,
        primary_dim: 4,
        primary_kernel: 3,
        primary_stride: 2,
        num_classes: 10,
        digit_dim: 4,
        decoder_hidden: [8, 16],
        ..CapsNetConfig::default()
    }
}

/// Rebuilds [`BoundParams`] from handles listed in parameter order.
pub fn bound_from(vars: &[Var], has_priors: bool) -> BoundParams {
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("enough handles");
    BoundParams {
        conv1_weight: next(),
        conv1_bias: next(),
        primary_weight: next(),
        primary_bias: next(),
        digit_weight: next(),
        priors: if has_priors { Some(next()) } else { None },
        decoder: [(next(), next()), (next(), next()), (next(), next())],
    }
}

pub fn tensor_err(e: capsnet::CapsError) -> TensorError {
    TensorError::Invalid { op: "model", msg: e.to_string() }
}

pub struct OracleRouting {
    pub v: Vec<Vec<f32>>,
    pub b: Vec<Vec<f32>>,
    pub c: Vec<Vec<f32>>,
    /// Couplings used in each iteration.
    pub c_history: Vec<Vec<Vec<f32>>>,
    pub mean_abs_delta: Vec<f64>,
}

/// Routing written out loop by loop from the algorithm, with no shared code.
/// `u_hat[i][j][d]`.
pub fn oracle_route(u_hat: &[Vec<Vec<f32>>], r: usize) -> OracleRouting {
    let n = u_hat.len();
    let j_count = u_hat[0].len();
    let dim = u_hat[0][0].len();
    let mut b = vec![vec![0.0f32; j_count]; n];
    let mut c = vec![vec![0.0f32; j_count]; n];
    let mut v = vec![vec![0.0f32; dim]; j_count];
    let mut c_history = Vec::new();
    let mut mean_abs_delta = Vec::new();
    for _ in 0..r {
        // c_i = softmax(b_i) over parents
        for i in 0..n {
            let mut m = f32::NEG_INFINITY;
            for j in 0..j_count {
                m = m.max(b[i][j]);
            }
            let mut e = vec![0.0f32; j_count];
            let mut total = 0.0f32;
            for j in 0..j_count {
                e[j] = (b[i][j] - m).exp();
                total += e[j];
            }
            for j in 0..j_count {
                c[i][j] = e[j] / total;
            }
        }
        c_history.push(c.clone());
        // s_j = sum_i c_ij u_hat_j|i ; v_j = squash(s_j)
        for j in 0..j_count {
            let mut s = vec![0.0f32; dim];
            for i in 0..n {
                for d in 0..dim {
                    s[d] += c[i][j] * u_hat[i][j][d];
                }
            }
            let mut n2 = 0.0f32;
            for d in 0..dim {
                n2 += s[d] * s[d];
            }
            let f = n2 / ((1.0 + n2) * (n2 + 1e-8f32).sqrt());
            for d in 0..dim {
                v[j][d] = s[d] * f;
            }
        }
        // b_ij += u_hat_j|i . v_j
        let mut delta = 0.0f64;
        for i in 0..n {
            for j in 0..j_count {
                let mut a = 0.0f32;
                for d in 0..dim {
                    a += u_hat[i][j][d] * v[j][d];
                }
                let nb = b[i][j] + a;
                delta += f64::from((nb - b[i][j]).abs());
                b[i][j] = nb;
            }
        }
        mean_abs_delta.push(delta / (n * j_count) as f64);
    }
    OracleRouting { v, b, c, c_history, mean_abs_delta }
}

/// Textbook Adam with bias correction, in f64.
pub struct AdamOracle {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamOracle {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        for k in 0..p.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = self.m[k] / (1.0 - b1.powi(self.t));
            let vh = self.v[k] / (1.0 - b2.powi(self.t));
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Direct 4-deep loop cross-correlation, no padding.
pub fn conv_oracle(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    k: &[f32],
    (kn, kh, kw): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
) -> Vec<f32> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0f32; kn * oh * ow];
    for o in 0..kn {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            acc += x[ci * h * w + (y * stride + dy) * w + xx * stride + dx]
                                * k[((o * c + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Mean absolute value of the first-iteration agreement for a fixed
/// prediction tensor, computed from uniform couplings.
pub fn first_iteration_mean_abs_agreement(u_hat: &[Vec<Vec<f32>>]) -> f64 {
    oracle_route(u_hat, 1).mean_abs_delta[0]
}
