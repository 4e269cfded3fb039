//! Progressive cluster-count schedule and k-means partitioning of the bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBank;
use crate::error::{PcpError, Result};
use crate::par;

/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Relative objective improvement below which Lloyd iterations stop.
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

/// Inputs of the log-linear cluster-count decline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub total_samples: usize,
    pub total_epochs: usize,
    pub floor_clusters: usize,
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(PcpError::ConfigError("total_epochs must be >= 1".into()));
        }
        if self.floor_clusters == 0 || self.floor_clusters > self.total_samples {
            return Err(PcpError::ConfigError(format!(
                "floor_clusters {} must lie in 1..={}",
                self.floor_clusters, self.total_samples
            )));
        }
        Ok(())
    }
}

/// `round(N^(1 - t/T))` with halves rounded up, before the floor clamp.
pub fn unclamped_cluster_count(params: &ScheduleParams, epoch: usize) -> Result<usize> {
    if epoch > params.total_epochs {
        return Err(PcpError::ScheduleRange {
            epoch,
            total: params.total_epochs,
        });
    }
    let n = params.total_samples as f64;
    let exponent = 1.0 - epoch as f64 / params.total_epochs as f64;
    let value = n.powf(exponent);
    Ok(((value + 0.5).floor() as usize).clamp(1, params.total_samples))
}

/// Cluster count for `epoch`: the log-linear decline from N, held at the floor.
pub fn schedule_cluster_count(params: &ScheduleParams, epoch: usize) -> Result<usize> {
    params.validate()?;
    Ok(unclamped_cluster_count(params, epoch)?.max(params.floor_clusters))
}

/// One epoch's partition of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub epoch: usize,
    pub num_clusters: usize,
    pub dim: usize,
    /// Cluster id of each sample.
    pub assignment: Vec<usize>,
    /// `num_clusters` rows of `dim` reals, row-major.
    pub centroids: Vec<f64>,
    /// Euclidean distance from each sample to its centroid.
    pub distance: Vec<f64>,
    /// Sample closest to each centroid; `None` for an empty cluster.
    pub medoid: Vec<Option<usize>>,
    /// k-means objective after each assignment step.
    pub objective_history: Vec<f64>,
}

impl ClusterState {
    /// Assemble a state from an assignment and distances, deriving medoids.
    pub fn from_assignment(
        num_clusters: usize,
        assignment: Vec<usize>,
        distance: Vec<f64>,
    ) -> Result<Self> {
        if assignment.len() != distance.len() {
            return Err(PcpError::DimensionMismatch {
                expected: assignment.len(),
                got: distance.len(),
            });
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= num_clusters) {
            return Err(PcpError::IndexError {
                index: bad,
                len: num_clusters,
            });
        }
        let mut state = ClusterState {
            epoch: 0,
            num_clusters,
            dim: 0,
            assignment,
            centroids: Vec::new(),
            distance,
            medoid: Vec::new(),
            objective_history: Vec::new(),
        };
        state.medoid = compute_medoids(&state);
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Sample ids of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Sum of squared distances to assigned centroids.
    pub fn objective(&self) -> f64 {
        self.distance.iter().map(|d| d * d).sum()
    }
}

/// Member of cluster `c` closest to its centroid; ties go to the lowest id.
pub fn medoid_of(state: &ClusterState, c: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&a, &d)) in state.assignment.iter().zip(&state.distance).enumerate() {
        if a == c && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(PcpError::EmptyCluster(c))
}

fn compute_medoids(state: &ClusterState) -> Vec<Option<usize>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; state.num_clusters];
    for (i, (&c, &d)) in state.assignment.iter().zip(&state.distance).enumerate() {
        let slot = &mut best[c];
        if slot.is_none_or(|(_, bd)| d < bd) {
            *slot = Some((i, d));
        }
    }
    best.into_iter().map(|b| b.map(|(i, _)| i)).collect()
}

#[inline]
fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// k-means over the bank rows.
pub fn kmeans_fit(bank: &EmbeddingBank, k: usize, seed: u64) -> Result<ClusterState> {
    kmeans_fit_rows(bank.as_slice(), bank.dim(), k, seed)
}

/// k-means over arbitrary row-major data: k-means++ seeding, then Lloyd
/// iterations until assignments stop changing, the objective stalls, or
/// [`MAX_ITERATIONS`] is reached.
pub fn kmeans_fit_rows(data: &[f32], dim: usize, k: usize, seed: u64) -> Result<ClusterState> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(PcpError::DimensionMismatch {
            expected: dim,
            got: data.len(),
        });
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(PcpError::InvalidK);
    }
    if k > n {
        return Err(PcpError::TooManyClusters { k, n });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    if k == n {
        let mut state =
            ClusterState::from_assignment(n, (0..n).collect(), vec![0.0; n]).expect("valid");
        state.dim = dim;
        state.centroids = data.iter().map(|&x| x as f64).collect();
        state.objective_history.push(0.0);
        return Ok(state);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(data, dim, k, &mut rng);

    let mut assignment = vec![usize::MAX; n];
    let mut distance = vec![0.0f64; n];
    let mut history = Vec::new();
    for iteration in 0..MAX_ITERATIONS {
        let nearest = par::map_range(n, |i| {
            let x = row(i);
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(x, &centroids[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        });
        let mut changed = 0usize;
        let mut objective = 0.0;
        for (i, (c, d)) in nearest.into_iter().enumerate() {
            if assignment[i] != c {
                changed += 1;
                assignment[i] = c;
            }
            distance[i] = d.sqrt();
            objective += d;
        }
        let stalled = history
            .last()
            .is_some_and(|&prev: &f64| prev - objective <= RELATIVE_TOLERANCE * prev.abs());
        history.push(objective);
        if changed == 0 || stalled || iteration + 1 == MAX_ITERATIONS {
            break;
        }
        centroids = update_centroids(data, dim, k, &assignment, &distance);
    }

    let mut state = ClusterState::from_assignment(k, assignment, distance)?;
    state.dim = dim;
    state.centroids = centroids;
    state.objective_history = history;
    Ok(state)
}

fn plus_plus_seeds(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend(row(first).iter().map(|&x| x as f64));
    let mut min_d = par::map_range(n, |i| sq_dist(row(i), &centroids[..dim]));
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&x| x as f64));
        let new_c = &centroids[start..];
        let fresh = par::map_range(n, |i| sq_dist(row(i), new_c));
        for (m, f) in min_d.iter_mut().zip(fresh) {
            if f < *m {
                *m = f;
            }
        }
    }
    centroids
}

/// Means of the current assignment, accumulated in sample order. Empty
/// clusters are re-seeded at the samples farthest from their centroids.
fn update_centroids(
    data: &[f32],
    dim: usize,
    k: usize,
    assignment: &[usize],
    distance: &[f64],
) -> Vec<f64> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        let x = &data[i * dim..(i + 1) * dim];
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..assignment.len()).collect();
        order.sort_by(|&a, &b| distance[b].total_cmp(&distance[a]).then(a.cmp(&b)));
        for (&c, &i) in empty.iter().zip(&order) {
            let x = &data[i * dim..(i + 1) * dim];
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s = v as f64;
            }
            counts[c] = 1;
        }
    }
    for c in 0..k {
        let inv = 1.0 / counts[c] as f64;
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s *= inv;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(n: usize, floor: usize) -> ScheduleParams {
        ScheduleParams {
            total_samples: n,
            total_epochs: 200,
            floor_clusters: floor,
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_cluster_count(&params(50000, 1000), 0).unwrap(), 50000);
        assert_eq!(schedule_cluster_count(&params(50000, 100), 100).unwrap(), 224);
        assert_eq!(schedule_cluster_count(&params(50000, 1000), 190).unwrap(), 1000);
        assert!(matches!(
            schedule_cluster_count(&params(50000, 1000), 201),
            Err(PcpError::ScheduleRange { .. })
        ));
    }

    #[test]
    fn schedule_end_reaches_one_before_clamp() {
        assert_eq!(unclamped_cluster_count(&params(50000, 1), 200).unwrap(), 1);
    }

    #[test]
    fn schedule_rejects_bad_floor() {
        assert!(schedule_cluster_count(&params(10, 11), 0).is_err());
        assert!(schedule_cluster_count(&params(10, 0), 0).is_err());
    }

    fn pairs() -> Vec<f32> {
        vec![0.0, 0.0, 0.0, 0.2, 5.0, 5.0, 5.2, 5.0]
    }

    #[test]
    fn kmeans_two_pairs() {
        let state = kmeans_fit_rows(&pairs(), 2, 2, 7).unwrap();
        assert_eq!(state.assignment[0], state.assignment[1]);
        assert_eq!(state.assignment[2], state.assignment[3]);
        assert_ne!(state.assignment[0], state.assignment[2]);
        let a = state.assignment[0];
        assert_abs_diff_eq!(state.centroid(a)[1], 0.1, epsilon = 1e-6);
        let b = state.assignment[2];
        assert_abs_diff_eq!(state.centroid(b)[0], 5.1, epsilon = 1e-6);
    }

    #[test]
    fn kmeans_singletons_and_single() {
        let state = kmeans_fit_rows(&pairs(), 2, 4, 1).unwrap();
        assert_eq!(state.assignment, vec![0, 1, 2, 3]);
        assert_eq!(state.objective(), 0.0);

        let state = kmeans_fit_rows(&pairs(), 2, 1, 1).unwrap();
        assert!(state.assignment.iter().all(|&c| c == 0));
        assert_abs_diff_eq!(state.centroid(0)[0], 2.55, epsilon = 1e-6);
        assert_abs_diff_eq!(state.centroid(0)[1], 2.55, epsilon = 1e-6);
    }

    #[test]
    fn kmeans_errors() {
        assert!(matches!(kmeans_fit_rows(&pairs(), 2, 0, 1), Err(PcpError::InvalidK)));
        assert!(matches!(
            kmeans_fit_rows(&pairs(), 2, 5, 1),
            Err(PcpError::TooManyClusters { k: 5, n: 4 })
        ));
    }

    #[test]
    fn kmeans_duplicate_points() {
        let data = vec![1.0f32; 12];
        let state = kmeans_fit_rows(&data, 2, 3, 5).unwrap();
        assert_eq!(state.objective(), 0.0);
        assert!(state.assignment.iter().all(|&c| c < 3));
    }

    #[test]
    fn medoid_examples() {
        let state = ClusterState::from_assignment(2, vec![0, 1], vec![0.3, 0.1]).unwrap();
        assert_eq!(medoid_of(&state, 1).unwrap(), 1);

        let tie = ClusterState::from_assignment(1, vec![0, 0, 0], vec![0.5, 0.2, 0.2]).unwrap();
        assert_eq!(medoid_of(&tie, 0).unwrap(), 1);

        let gap = ClusterState::from_assignment(3, vec![0, 0], vec![0.1, 0.2]).unwrap();
        assert!(matches!(medoid_of(&gap, 2), Err(PcpError::EmptyCluster(2))));
        assert_eq!(gap.medoid, vec![Some(0), None, None]);
    }

    #[test]
    fn medoid_exhaustive_distance() {
        // Cluster {(1,0), (0.99,0.141)}; fitting a single cluster puts the
        // centroid at their mean, and the oracle ranks members by distance.
        let data = [1.0f32, 0.0, 0.99, 0.141];
        let state = kmeans_fit_rows(&data, 2, 1, 0).unwrap();
        let c = state.centroid(0).to_vec();
        let d: Vec<f64> = data
            .chunks(2)
            .map(|p| ((p[0] as f64 - c[0]).powi(2) + (p[1] as f64 - c[1]).powi(2)).sqrt())
            .collect();
        let expected = if d[1] < d[0] { 1 } else { 0 };
        assert_eq!(medoid_of(&state, 0).unwrap(), expected);
    }
}
