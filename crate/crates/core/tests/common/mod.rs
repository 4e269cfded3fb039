//! Reference implementations for the integration tests, written directly
//! from the defining formulas in `f64` and sharing no code with the crate.

#![allow(dead_code)]

use pcp_core::encoder::Mlp;
use pcp_core::EmbeddingBank;

/// `-log P(i | v)` over `bank`, by explicit log-sum-exp.
pub fn query_loss(bank: &EmbeddingBank, i: usize, v: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = bank
        .rows()
        .map(|r| r.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum::<f64>() / tau)
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    lse - logits[i]
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / |b|` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Flattened parameters of `model`, layer by layer, weights then biases.
pub fn flat_params(model: &Mlp) -> Vec<f64> {
    model
        .layers()
        .iter()
        .flat_map(|l| l.weight.iter().chain(&l.bias).map(|&w| w as f64))
        .collect()
}

/// Unit output of an MLP with the same layer shapes as `model`, evaluated
/// in `f64` with parameters taken from `params`.
pub fn mlp_output(model: &Mlp, params: &[f64], x: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let mut h = x.to_vec();
    let mut at = 0;
    for (li, l) in layers.iter().enumerate() {
        let w = &params[at..at + l.fan_out * l.fan_in];
        let b = &params[at + l.fan_out * l.fan_in..at + l.fan_out * (l.fan_in + 1)];
        at += l.fan_out * (l.fan_in + 1);
        let mut next: Vec<f64> = (0..l.fan_out)
            .map(|o| b[o] + (0..l.fan_in).map(|i| w[o * l.fan_in + i] * h[i]).sum::<f64>())
            .collect();
        if li + 1 < layers.len() {
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
        }
        h = next;
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter().map(|v| v / n).collect()
}

/// Voting score from its defining sum over a newest-first history.
pub fn vote_direct(history: &[Vec<usize>], i: usize, medoid: usize, alpha: f64, window: usize) -> f64 {
    history
        .iter()
        .take(window + 1)
        .enumerate()
        .map(|(k, a)| {
            let delta = if a[i] == a[medoid] { 1.0 } else { -1.0 };
            alpha.powi(k as i32) * delta
        })
        .sum()
}

/// Full sort by (similarity desc, id asc), then `exp(s / tau)` votes,
/// lowest class on ties.
pub fn brute_knn(bank: &EmbeddingBank, labels: &[usize], classes: usize, q: &[f32], k: usize, tau: f64) -> usize {
    let mut scored: Vec<(f64, usize)> = (0..bank.count())
        .map(|i| {
            let s: f64 = bank.row(i).iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let mut votes = vec![0.0; classes];
    for &(s, i) in scored.iter().take(k) {
        votes[labels[i]] += (s / tau).exp();
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}
