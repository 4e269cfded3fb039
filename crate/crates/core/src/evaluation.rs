//! Label-aware quality measures. Labels are only ever read here, never by
//! the training loop's supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::embedding::{dot, EmbeddingBank, Real};
use crate::error::{PcpError, Result};
use crate::par;
use crate::purification::PseudoLabelSet;

/// Train/test ids into one embedding matrix, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub train_ids: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids.len() != self.train_labels.len() {
            return Err(PcpError::DimensionMismatch {
                expected: self.train_ids.len(),
                got: self.train_labels.len(),
            });
        }
        if self.test_ids.len() != self.test_labels.len() {
            return Err(PcpError::DimensionMismatch {
                expected: self.test_ids.len(),
                got: self.test_labels.len(),
            });
        }
        let labels = self.train_labels.iter().chain(&self.test_labels);
        if let Some(&bad) = labels.clone().find(|&&y| y >= self.num_classes) {
            return Err(PcpError::IndexError {
                index: bad,
                len: self.num_classes,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.train_ids {
            seen.insert(*id);
        }
        if self.test_ids.iter().any(|id| seen.contains(id)) {
            return Err(PcpError::ConfigError("train and test ids overlap".into()));
        }
        Ok(())
    }
}

/// Weighted kNN vote: the `k` most similar training rows each add
/// `exp(s / tau)` to their class; the heaviest class wins. `k` is clamped
/// to the training size. Neighbor ties go to the lowest row, class ties to
/// the lowest class id.
pub fn knn_predict<T: Real>(
    train: &EmbeddingBank,
    labels: &[usize],
    num_classes: usize,
    query: &[T],
    k: usize,
    tau: f64,
) -> Result<usize> {
    if labels.len() != train.count() {
        return Err(PcpError::DimensionMismatch {
            expected: train.count(),
            got: labels.len(),
        });
    }
    if k == 0 {
        return Err(PcpError::ConfigError("k must be at least 1".into()));
    }
    if !(tau > 0.0) {
        return Err(PcpError::InvalidTemperature(tau));
    }
    let sims = train.all_sims(query)?;
    let k = k.min(sims.len());
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let by_rank = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);
    let top = sims[order[0]];
    let mut votes = vec![0.0f64; num_classes];
    for &i in &order {
        let c = labels[i];
        if c >= num_classes {
            return Err(PcpError::IndexError {
                index: c,
                len: num_classes,
            });
        }
        votes[c] += ((sims[i] - top) / tau).exp();
    }
    Ok(argmax(&votes))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `queries` whose kNN prediction matches `query_labels`.
pub fn knn_accuracy(
    train: &EmbeddingBank,
    labels: &[usize],
    num_classes: usize,
    queries: &EmbeddingBank,
    query_labels: &[usize],
    k: usize,
    tau: f64,
) -> Result<f64> {
    if query_labels.len() != queries.count() {
        return Err(PcpError::DimensionMismatch {
            expected: queries.count(),
            got: query_labels.len(),
        });
    }
    let predictions = par::try_map_range(queries.count(), |q| {
        knn_predict(train, labels, num_classes, queries.row(q), k, tau)
    })?;
    let hits = predictions
        .iter()
        .zip(query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / queries.count() as f64)
}

/// Affine softmax classifier on frozen embeddings, trained by full-batch
/// gradient descent; returns test accuracy.
pub fn linear_probe(
    embeddings: &EmbeddingBank,
    split: &LabeledSplit,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    split.validate()?;
    let first = split.train_labels.first().copied();
    if first.is_none() || split.train_labels.iter().all(|&y| Some(y) == first) {
        return Err(PcpError::DegenerateLabels);
    }
    if split.test_ids.is_empty() {
        return Err(PcpError::ConfigError("linear probe needs test samples".into()));
    }
    for &id in split.train_ids.iter().chain(&split.test_ids) {
        embeddings.try_row(id)?;
    }
    let dim = embeddings.dim();
    let classes = split.num_classes;
    let stride = dim + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Vec<f64> = (0..classes * stride)
        .map(|_| rng.random_range(-0.01..0.01))
        .collect();

    let logits = |w: &[f64], x: &[f32]| -> Vec<f64> {
        w.chunks_exact(stride)
            .map(|row| dot(&row[..dim], x) + row[dim])
            .collect()
    };
    let n = split.train_ids.len() as f64;
    for _ in 0..epochs {
        let per_sample = par::map_slice(&split.train_ids, |&id| {
            let x = embeddings.row(id);
            let z = logits(&weights, x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect::<Vec<f64>>()
        });
        let mut grad = vec![0.0f64; weights.len()];
        for ((&id, &y), mut p) in split.train_ids.iter().zip(&split.train_labels).zip(per_sample) {
            p[y] -= 1.0;
            let x = embeddings.row(id);
            for (c, &pc) in p.iter().enumerate() {
                let row = &mut grad[c * stride..(c + 1) * stride];
                for (g, &xv) in row[..dim].iter_mut().zip(x) {
                    *g += pc * xv as f64;
                }
                row[dim] += pc;
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= lr * g / n;
        }
    }
    let hits = split
        .test_ids
        .iter()
        .zip(&split.test_labels)
        .filter(|(&id, &y)| argmax(&logits(&weights, embeddings.row(id))) == y)
        .count();
    Ok(hits as f64 / split.test_ids.len() as f64)
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PcpError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Joint counts with dense relabeled ids.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let relabel = |xs: &[usize]| -> (Vec<usize>, usize) {
        let mut map = std::collections::BTreeMap::new();
        for &x in xs {
            let next = map.len();
            map.entry(x).or_insert(next);
        }
        (xs.iter().map(|x| map[x]).collect(), map.len())
    };
    let (ra, na) = relabel(a);
    let (rb, nb) = relabel(b);
    let mut table = vec![vec![0usize; nb]; na];
    for (&x, &y) in ra.iter().zip(&rb) {
        table[x][y] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..nb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

/// `sum_c max_y |cluster c & class y| / N`.
pub fn cluster_purity(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(assignment, labels)?;
    if assignment.is_empty() {
        return Ok(1.0);
    }
    let (table, _, _) = contingency(assignment, labels);
    let hits: usize = table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / assignment.len() as f64)
}

/// Mutual information over the arithmetic mean of the two entropies; 0 when
/// either partition is constant.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&rows), entropy(&cols));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Precision and recall of instance-set membership as a noise detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    /// Share of flagged samples that are truly noise; `None` if none flagged.
    pub precision: Option<f64>,
    /// Share of truly-noisy samples that were flagged (1 when there are none).
    pub recall: f64,
}

/// A sample counts as noise when its label differs from the majority label
/// (lowest on ties) of its k-means cluster; it counts as flagged when the
/// pseudo labels supervise it as an instance.
pub fn filter_pr(pseudo: &PseudoLabelSet, state: &ClusterState, labels: &[usize]) -> Result<FilterAudit> {
    check_lengths(&state.assignment, labels)?;
    let num_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; num_labels]; state.num_clusters];
    for (&c, &y) in state.assignment.iter().zip(labels) {
        counts[c][y] += 1;
    }
    let majority: Vec<usize> = counts.iter().map(|r| argmax_count(r)).collect();
    let noise: Vec<bool> = state
        .assignment
        .iter()
        .zip(labels)
        .map(|(&c, &y)| y != majority[c])
        .collect();
    let mut flagged_total = 0usize;
    let mut flagged_noise = 0usize;
    for &i in &pseudo.instance_ids {
        if i >= noise.len() {
            return Err(PcpError::IndexError {
                index: i,
                len: noise.len(),
            });
        }
        flagged_total += 1;
        if noise[i] {
            flagged_noise += 1;
        }
    }
    let noise_total = noise.iter().filter(|&&x| x).count();
    Ok(FilterAudit {
        precision: (flagged_total > 0).then(|| flagged_noise as f64 / flagged_total as f64),
        recall: if noise_total == 0 {
            1.0
        } else {
            flagged_noise as f64 / noise_total as f64
        },
    })
}

fn argmax_count(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::purification::filter_unreliable;
    use approx::assert_abs_diff_eq;

    fn bank(rows: &[[f32; 2]]) -> EmbeddingBank {
        EmbeddingBank::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn knn_examples() {
        let train = bank(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let labels = [0, 1, 2];
        assert_eq!(knn_predict(&train, &labels, 3, &[0.0f32, 1.0], 1, 0.1).unwrap(), 1);

        let two = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(knn_predict(&two, &[0, 1], 2, &[1.0f32, 0.0], 2, 0.1).unwrap(), 0);

        let same = [3, 3, 3];
        for q in [[1.0f32, 0.0], [0.0, 1.0], [-0.6, -0.8]] {
            assert_eq!(knn_predict(&train, &same, 4, &q, 200, 0.1).unwrap(), 3);
        }
    }

    #[test]
    fn knn_neighbor_tie_prefers_lower_id() {
        let train = bank(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        // Rows 1 and 2 tie; k = 2 keeps row 0 and row 1.
        let p = knn_predict(&train, &[0, 1, 2], 3, &[0.6f32, 0.8], 2, 0.1).unwrap();
        assert_eq!(p, 1);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(cluster_purity(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(cluster_purity(&[0], &[0, 1]), Err(PcpError::DimensionMismatch { .. })));
    }

    #[test]
    fn nmi_examples() {
        assert_abs_diff_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0, epsilon = 1e-12);
        // Independent uniform partitions: every joint cell has count 1, MI = 0.
        assert_abs_diff_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_closed_form() {
        // a = {0,0,1,1}, b = {0,0,0,1}: H(a) = ln 2, H(b) = -(3/4 ln 3/4 + 1/4 ln 1/4),
        // I = 1/2 ln(2*2/3 * ... ) evaluated cell by cell.
        let a = [0, 0, 1, 1];
        let b = [0, 0, 0, 1];
        let ha = 2f64.ln();
        let hb = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let mi = 0.5 * (0.5f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.25)).ln();
        assert_abs_diff_eq!(nmi(&a, &b).unwrap(), mi / (0.5 * (ha + hb)), epsilon = 1e-12);
    }

    fn split(train: Vec<usize>, ytrain: Vec<usize>, test: Vec<usize>, ytest: Vec<usize>, k: usize) -> LabeledSplit {
        LabeledSplit {
            train_ids: train,
            train_labels: ytrain,
            test_ids: test,
            test_labels: ytest,
            num_classes: k,
        }
    }

    #[test]
    fn probe_errors_and_contract() {
        let emb = bank(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]);
        let s = split(vec![0, 1], vec![0, 0], vec![2], vec![1], 2);
        assert!(matches!(linear_probe(&emb, &s, 10, 1.0, 0), Err(PcpError::DegenerateLabels)));
        let s = split(vec![0, 2], vec![0, 1], vec![1, 3], vec![0, 1], 2);
        let acc = linear_probe(&emb, &s, 0, 1.0, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(linear_probe(&emb, &s, 200, 2.0, 0).unwrap(), 1.0);
    }

    #[test]
    fn filter_pr_examples() {
        let state = ClusterState::from_assignment(2, vec![0, 0, 1, 1], vec![0.0, 0.1, 0.0, 0.1]).unwrap();
        let pure = [0, 0, 1, 1];
        let none = PseudoLabelSet::from_state(&state);
        let audit = filter_pr(&none, &state, &pure).unwrap();
        assert_eq!(audit, FilterAudit { precision: None, recall: 1.0 });

        let state3 = ClusterState::from_assignment(1, vec![0, 0, 0], vec![0.0, 0.1, 0.5]).unwrap();
        let labels = [4, 4, 2];
        let flagged = filter_unreliable(&state3, 0.34).into_labels(0);
        assert_eq!(flagged.instance_ids, vec![2]);
        let audit = filter_pr(&flagged, &state3, &labels).unwrap();
        assert_eq!(audit, FilterAudit { precision: Some(1.0), recall: 1.0 });

        let half = filter_unreliable(&state, 0.5).into_labels(0);
        let audit = filter_pr(&half, &state, &pure).unwrap();
        assert_eq!(audit.precision, Some(0.0));
    }
}
