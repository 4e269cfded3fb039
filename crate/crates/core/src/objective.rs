//! Non-parametric softmax over the memory bank and the losses built on it.
//!
//! `P(i | v) = exp(v_i . v / tau) / sum_j exp(v_j . v / tau)` with the bank
//! rows `v_j` as class weights. Bank rows are constants under
//! differentiation; gradients flow only through the query `v`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBank, Real};
use crate::error::{PcpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub tau: f64,
    /// Upper bound on sampled ordered pairs per cluster; `None` uses all.
    pub cluster_pair_cap: Option<usize>,
    pub warm_start_weight: f64,
    pub warm_end_weight: f64,
    pub warm_end_epoch: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            cluster_pair_cap: None,
            warm_start_weight: 0.8,
            warm_end_weight: 0.5,
            warm_end_epoch: 180,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        let ok = 0.0 <= self.warm_end_weight
            && self.warm_end_weight <= self.warm_start_weight
            && self.warm_start_weight <= 1.0;
        if !ok {
            return Err(PcpError::ConfigError(format!(
                "warm-up weights must satisfy 0 <= {} <= {} <= 1",
                self.warm_end_weight, self.warm_start_weight
            )));
        }
        if self.cluster_pair_cap == Some(0) {
            return Err(PcpError::ConfigError("cluster_pair_cap must be positive".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(PcpError::InvalidTemperature(tau))
    }
}

/// Softmax statistics of one query against the whole bank.
#[derive(Debug, Clone)]
pub struct QueryStats {
    /// `v_j . v` for every row.
    pub sims: Vec<f64>,
    /// `log sum_j exp(v_j . v / tau)`.
    pub log_partition: f64,
    pub tau: f64,
}

impl QueryStats {
    pub fn new<T: Real>(bank: &EmbeddingBank, v: &[T], tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let sims = bank.all_sims(v)?;
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = sims.iter().map(|&s| ((s - max) / tau).exp()).sum();
        Ok(Self {
            log_partition: max / tau + sum.ln(),
            sims,
            tau,
        })
    }

    pub fn prob(&self, i: usize) -> f64 {
        (self.sims[i] / self.tau - self.log_partition).exp()
    }

    pub fn neg_log_prob(&self, i: usize) -> f64 {
        self.log_partition - self.sims[i] / self.tau
    }

    /// Softmax-weighted mean of the bank rows, `sum_j P(j|v) v_j`.
    pub fn expected_row(&self, bank: &EmbeddingBank) -> Vec<f64> {
        let mut out = vec![0.0; bank.dim()];
        for (j, row) in bank.rows().enumerate() {
            let p = self.prob(j);
            for (o, &x) in out.iter_mut().zip(row) {
                *o += p * x as f64;
            }
        }
        out
    }

    /// Sum over `targets` of `-log P(i|v)` and its gradient in `v`.
    pub fn target_loss_and_grad(
        &self,
        bank: &EmbeddingBank,
        expected: &[f64],
        targets: &[usize],
    ) -> (f64, Vec<f64>) {
        let m = targets.len() as f64;
        let mut loss = 0.0;
        let mut grad: Vec<f64> = expected.iter().map(|&e| m * e).collect();
        for &i in targets {
            loss += self.neg_log_prob(i);
            for (g, &x) in grad.iter_mut().zip(bank.row(i)) {
                *g -= x as f64;
            }
        }
        for g in grad.iter_mut() {
            *g /= self.tau;
        }
        (loss, grad)
    }
}

/// Probability that `v` is recognized as sample `i`.
pub fn prob_instance<T: Real>(bank: &EmbeddingBank, i: usize, v: &[T], tau: f64) -> Result<f64> {
    bank.try_row(i)?;
    Ok(QueryStats::new(bank, v, tau)?.prob(i))
}

/// `-log P(i | v)`.
pub fn neg_log_prob<T: Real>(bank: &EmbeddingBank, i: usize, v: &[T], tau: f64) -> Result<f64> {
    bank.try_row(i)?;
    Ok(QueryStats::new(bank, v, tau)?.neg_log_prob(i))
}

/// Mean over `ids` of `-log P(id | fresh)`; `fresh[k]` belongs to `ids[k]`.
pub fn loss_instance<T: Real>(
    bank: &EmbeddingBank,
    ids: &[usize],
    fresh: &[Vec<T>],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if ids.len() != fresh.len() {
        return Err(PcpError::DimensionMismatch {
            expected: ids.len(),
            got: fresh.len(),
        });
    }
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&i, v) in ids.iter().zip(fresh) {
        total += neg_log_prob(bank, i, v, tau)?;
    }
    Ok(total / ids.len() as f64)
}

/// Mean over every ordered within-cluster pair `(i, j)`, diagonal included,
/// of `-log P(i | fresh_j)`. `fresh[c][k]` belongs to `clusters[c][k]`.
pub fn loss_cluster<T: Real>(
    bank: &EmbeddingBank,
    clusters: &[Vec<usize>],
    fresh: &[Vec<Vec<T>>],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_cluster_shapes(clusters, fresh)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (members, outputs) in clusters.iter().zip(fresh) {
        for v in outputs {
            let stats = QueryStats::new(bank, v, tau)?;
            for &i in members {
                bank.try_row(i)?;
                total += stats.neg_log_prob(i);
            }
            pairs += members.len();
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// [`loss_cluster`] over at most `cap` ordered pairs per cluster, drawn
/// uniformly without replacement.
pub fn loss_cluster_sampled<T: Real, R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    clusters: &[Vec<usize>],
    fresh: &[Vec<Vec<T>>],
    tau: f64,
    cap: usize,
    rng: &mut R,
) -> Result<f64> {
    check_tau(tau)?;
    check_cluster_shapes(clusters, fresh)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (members, outputs) in clusters.iter().zip(fresh) {
        let m = members.len();
        if m == 0 {
            continue;
        }
        let mut picks = index::sample(rng, m * m, cap.min(m * m)).into_vec();
        picks.sort_unstable();
        for p in picks {
            let (i, j) = (members[p / m], &outputs[p % m]);
            bank.try_row(i)?;
            total += QueryStats::new(bank, j, tau)?.neg_log_prob(i);
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

fn check_cluster_shapes<T>(clusters: &[Vec<usize>], fresh: &[Vec<Vec<T>>]) -> Result<()> {
    if clusters.len() != fresh.len() {
        return Err(PcpError::DimensionMismatch {
            expected: clusters.len(),
            got: fresh.len(),
        });
    }
    for (c, f) in clusters.iter().zip(fresh) {
        if c.len() != f.len() {
            return Err(PcpError::DimensionMismatch {
                expected: c.len(),
                got: f.len(),
            });
        }
    }
    Ok(())
}

/// Instance part plus cluster part.
pub fn loss_total(instance_part: f64, cluster_part: f64) -> Result<f64> {
    if !instance_part.is_finite() || !cluster_part.is_finite() {
        return Err(PcpError::NumericError(format!(
            "non-finite loss parts ({instance_part}, {cluster_part})"
        )));
    }
    Ok(instance_part + cluster_part)
}

/// Weight of the auxiliary instance loss: linear from the start weight at
/// epoch 0 to the end weight at `warm_end_epoch`, constant afterwards.
pub fn warmup_weight(epoch: usize, params: &LossParams) -> f64 {
    if epoch >= params.warm_end_epoch {
        return params.warm_end_weight;
    }
    let frac = epoch as f64 / params.warm_end_epoch as f64;
    params.warm_start_weight + (params.warm_end_weight - params.warm_start_weight) * frac
}

/// Gradient of `-log P(i | v)` in `v`: `(sum_j P(j|v) v_j - v_i) / tau`.
pub fn grad_wrt_query<T: Real>(bank: &EmbeddingBank, i: usize, v: &[T], tau: f64) -> Result<Vec<f64>> {
    bank.try_row(i)?;
    let stats = QueryStats::new(bank, v, tau)?;
    let expected = stats.expected_row(bank);
    Ok(stats.target_loss_and_grad(bank, &expected, &[i]).1)
}
