//! Naive loop references, written independently of the tape.

#![allow(dead_code)]

use otsnet::attention::{DmhaParams, DualQkParams, HeadConfig, LayerNormParams, MlpParams, LN_EPS, RMS_EPS};
use otsnet::param::{ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Row-major `[rows, cols]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn param(store: &ParamStore, id: ParamId) -> Mat {
        let v = store.value(id);
        let s = v.shape();
        Mat::new(s[0], s[1], v.data().to_vec())
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Columns `start..start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            for c in 0..len {
                out.set(r, c, self.at(r, start + c));
            }
        }
        out
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds `N(0, std²)` to every parameter element.
pub fn jitter(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        let data = std::sync::Arc::make_mut(&mut p.value).data_mut();
        for v in data {
            *v += std * r.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for c in 0..x.cols {
            out.set(r, c, (row[c] - mean) / (var + LN_EPS).sqrt() * gain[c] + bias[c]);
        }
    }
    out
}

pub fn rms_norm(row: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    row.iter().zip(gain).map(|(v, g)| v / (ms + RMS_EPS).sqrt() * g).collect()
}

fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

fn apply_ln(store: &ParamStore, p: &LayerNormParams, x: &Mat) -> Mat {
    layer_norm(x, &vector(store, p.gain), &vector(store, p.bias))
}

fn apply_mlp(store: &ParamStore, p: &MlpParams, x: &Mat) -> Mat {
    let (w1, b1) = (Mat::param(store, p.w1), vector(store, p.b1));
    let (w2, b2) = (Mat::param(store, p.w2), vector(store, p.b2));
    let mut h = x.matmul(&w1);
    for r in 0..h.rows {
        for c in 0..h.cols {
            h.set(r, c, gelu(h.at(r, c) + b1[c]));
        }
    }
    let mut y = h.matmul(&w2);
    for r in 0..y.rows {
        for c in 0..y.cols {
            y.set(r, c, y.at(r, c) + b2[c]);
        }
    }
    y
}

/// Per-head λ: `exp(λq1·λk1) − exp(λq2·λk2) + λ_init`.
pub fn lambdas(store: &ParamStore, p: &DualQkParams, lambda_init: f64) -> Vec<f64> {
    let [q1, k1, q2, k2] = [p.lambda_q1, p.lambda_k1, p.lambda_q2, p.lambda_k2].map(|id| Mat::param(store, id));
    (0..q1.rows)
        .map(|h| {
            let row = |m: &Mat| m.data[h * m.cols..(h + 1) * m.cols].to_vec();
            dot(&row(&q1), &row(&k1)).exp() - dot(&row(&q2), &row(&k2)).exp() + lambda_init
        })
        .collect()
}

/// Dual-QK attention for one sample `x` (`[N, D]`): per head
/// `(softmax(Q1K1ᵀ/√d) − λ softmax(Q2K2ᵀ/√d)) V`, returned as `h` matrices
/// of shape `[N, 2d]` together with the differential maps.
pub fn dual_qk(store: &ParamStore, p: &DualQkParams, cfg: &HeadConfig, x: &Mat) -> (Vec<Mat>, Vec<Mat>) {
    let d = cfg.head_dim;
    let heads = cfg.model_dim / (2 * d);
    let lam = lambdas(store, p, cfg.lambda_init);
    let proj = |id| x.matmul(&Mat::param(store, id));
    let (q1, q2, k1, k2, v) = (proj(p.wq1), proj(p.wq2), proj(p.wk1), proj(p.wk2), proj(p.wv));
    let n = x.rows;
    let mut outs = Vec::new();
    let mut maps = Vec::new();
    for h in 0..heads {
        let (q1h, q2h, k1h, k2h) = (q1.columns(h * d, d), q2.columns(h * d, d), k1.columns(h * d, d), k2.columns(h * d, d));
        let vh = v.columns(h * 2 * d, 2 * d);
        let mut diff = Mat::zeros(n, n);
        for i in 0..n {
            let s1: Vec<f64> = (0..n)
                .map(|j| dot(&q1h.data[i * d..(i + 1) * d], &k1h.data[j * d..(j + 1) * d]) / (d as f64).sqrt())
                .collect();
            let s2: Vec<f64> = (0..n)
                .map(|j| dot(&q2h.data[i * d..(i + 1) * d], &k2h.data[j * d..(j + 1) * d]) / (d as f64).sqrt())
                .collect();
            let (a1, a2) = (softmax(&s1), softmax(&s2));
            for j in 0..n {
                diff.set(i, j, a1[j] - lam[h] * a2[j]);
            }
        }
        outs.push(diff.matmul(&vh));
        maps.push(diff);
    }
    (outs, maps)
}

/// Full differential block on one sample (no split feed-forward):
/// `X' = X + W_proj·concat_h((1 − λ_init)·RMSNorm(head_h))`,
/// `X'' = X' + MLP(LN(X'))`.
pub fn dmha_block(store: &ParamStore, p: &DmhaParams, cfg: &HeadConfig, x: &Mat) -> Mat {
    assert!(p.ffn.pre.is_none());
    let xn = apply_ln(store, &p.ln1, x);
    let (heads, _) = dual_qk(store, &p.dual, cfg, &xn);
    let gain = vector(store, p.head_norm);
    let w = 2 * cfg.head_dim;
    let mut merged = Mat::zeros(x.rows, heads.len() * w);
    for (h, m) in heads.iter().enumerate() {
        for r in 0..x.rows {
            let normed = rms_norm(&m.data[r * w..(r + 1) * w], &gain);
            for c in 0..w {
                merged.set(r, h * w + c, (1.0 - cfg.lambda_init) * normed[c]);
            }
        }
    }
    let out = merged.matmul(&Mat::param(store, p.w_proj));
    let mut x1 = x.clone();
    for (a, b) in x1.data.iter_mut().zip(&out.data) {
        *a += b;
    }
    let h = apply_mlp(store, &p.ffn.mlp, &apply_ln(store, &p.ffn.ln, &x1));
    for (a, b) in x1.data.iter_mut().zip(&h.data) {
        *a += b;
    }
    x1
}

/// `p · E` row by row.
pub fn codebook_embed(p: &Mat, codebook: &Mat) -> Mat {
    p.matmul(codebook)
}

/// Decoder step `i` may look at every visual token and at slots `0..=i`.
pub fn fusion_mask(visual: usize, slots: usize) -> Vec<Vec<bool>> {
    (0..slots)
        .map(|i| (0..visual + slots).map(|j| j < visual || j - visual <= i).collect())
        .collect()
}

/// `softmax((q + g) / τ)` for one row.
pub fn gumbel_softmax(q: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = q.iter().zip(g).map(|(a, b)| (a + b) / tau).collect();
    softmax(&z)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
