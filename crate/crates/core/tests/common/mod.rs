//! Slow, loop-by-loop reference implementations used as test oracles.
#![allow(dead_code)]

use njm::captioner::{ModelDims, ModelParams};
use njm::corpus::{BOS, EOS, PAD, UNK};
use njm::nn::Matrix;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `v · M` with explicit loops.
fn vm(v: &[f64], m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    assert_eq!(v.len(), rows);
    (0..cols).map(|j| (0..rows).map(|i| v[i] * m.get(i, j)).sum()).collect()
}

pub fn cell(x: &[f64], h: &[f64], c: &[f64], p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let n = p.dims.hidden_dim;
    let zx = vm(x, &p.w_x);
    let zh = vm(h, &p.w_h);
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let pre = |gate: usize| zx[gate * n + j] + zh[gate * n + j] + p.b.get(0, gate * n + j);
        let i = sig(pre(0));
        let f = sig(pre(1));
        let o = sig(pre(2));
        let g = pre(3).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

pub fn log_probs(h: &[f64], p: &ModelParams) -> Vec<f64> {
    let z: Vec<f64> = vm(h, &p.w_out).iter().enumerate().map(|(k, v)| v + p.b_out.get(0, k)).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn embed(p: &ModelParams, id: u32) -> Vec<f64> {
    (0..p.dims.embed_dim).map(|k| p.embed.get(id as usize, k)).collect()
}

pub fn start(features: &[f64], p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let zero = vec![0.0; p.dims.hidden_dim];
    cell(&vm(features, &p.w_img), &zero, &zero, p)
}

/// Mean next-token cross-entropy of an unpadded `BOS .. EOS` caption.
pub fn caption_loss(features: &[f64], caption: &[u32], p: &ModelParams) -> f64 {
    let (mut h, mut c) = start(features, p);
    let mut total = 0.0;
    for t in 0..caption.len() - 1 {
        (h, c) = cell(&embed(p, caption[t]), &h, &c, p);
        total -= log_probs(&h, p)[caption[t + 1] as usize];
    }
    total / (caption.len() - 1) as f64
}

/// Sum of log-probabilities of `tokens` emitted after BOS.
pub fn sequence_log_prob(features: &[f64], tokens: &[u32], p: &ModelParams) -> f64 {
    let (mut h, mut c) = start(features, p);
    let mut prev = BOS;
    let mut total = 0.0;
    for &t in tokens {
        (h, c) = cell(&embed(p, prev), &h, &c, p);
        total += log_probs(&h, p)[t as usize];
        prev = t;
    }
    total
}

fn emittable(id: u32, pos: usize) -> bool {
    !(id == PAD || id == BOS || id == UNK || (id == EOS && pos == 0))
}

/// Every sequence decoding may produce: EOS-terminated within `max_len`, or
/// exactly `max_len` tokens without EOS.
pub fn all_outputs(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for pos in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for id in 0..vocab {
                if !emittable(id, pos) {
                    continue;
                }
                let mut s = prefix.clone();
                s.push(id);
                if id == EOS || pos + 1 == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

/// All outputs scored and sorted best first, ties by token sequence.
pub fn brute_force(features: &[f64], p: &ModelParams, max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let mut scored: Vec<(Vec<u32>, f64)> = all_outputs(p.dims.vocab_size as u32, max_len)
        .into_iter()
        .map(|s| {
            let lp = sequence_log_prob(features, &s, p);
            (s, lp)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

pub fn random_params(dims: ModelDims, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init_with_scale(dims, seed, scale);
    p.b = Matrix::seeded(1, 4 * dims.hidden_dim, scale, seed ^ 0xb);
    p.b_out = Matrix::seeded(1, dims.vocab_size, scale, seed ^ 0xbb);
    p
}

pub fn features(dim: usize, seed: u64) -> Vec<f64> {
    Matrix::seeded(1, dim, 1.0, seed).as_slice().to_vec()
}
