//! Two-stage cleanup of k-means assignments into pseudo labels.
//!
//! The distance filter keeps the members nearest each centroid and sends the
//! rest to instance-level supervision. The voting stage then consults the
//! recent assignment history: retained members that rarely shared a cluster
//! with the medoid are demoted, discarded members that consistently did are
//! pulled back.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::error::{PcpError, Result};

/// Guards `floor(gamma * m)` against products such as `0.29 * 100`
/// landing a hair below an integer.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurifyParams {
    /// Fraction of each cluster discarded by distance.
    pub gamma: f64,
    /// Voting decay.
    pub alpha: f64,
    /// Retained members scoring below this are demoted.
    pub theta_low: f64,
    /// Discarded members scoring above this are pulled back.
    pub theta_high: f64,
    /// First epoch at which voting runs.
    pub activation_epoch: usize,
    /// Number of past epochs consulted besides the current one.
    pub window: usize,
    pub enable_voting: bool,
}

impl Default for PurifyParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 0.9,
            theta_low: 0.0,
            theta_high: 3.0,
            activation_epoch: 100,
            window: 15,
            enable_voting: true,
        }
    }
}

impl PurifyParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PcpError::ConfigError(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PcpError::ConfigError(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if self.theta_low > self.theta_high {
            return Err(PcpError::ConfigError(format!(
                "theta_low {} exceeds theta_high {}",
                self.theta_low, self.theta_high
            )));
        }
        Ok(())
    }

    /// Whether voting applies at `epoch`.
    pub fn voting_active(&self, epoch: usize) -> bool {
        self.enable_voting && epoch >= self.activation_epoch
    }
}

/// Recent per-sample assignments, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentHistory {
    window: usize,
    samples: usize,
    entries: VecDeque<Vec<usize>>,
}

impl AssignmentHistory {
    pub fn new(window: usize, samples: usize) -> Self {
        Self {
            window,
            samples,
            entries: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Assignment recorded `k` pushes ago.
    pub fn entry(&self, k: usize) -> Option<&[usize]> {
        self.entries.get(k).map(Vec::as_slice)
    }

    /// Record the newest assignment, evicting beyond `window + 1` entries.
    pub fn push(&mut self, assignment: Vec<usize>) -> Result<()> {
        if assignment.len() != self.samples {
            return Err(PcpError::DimensionMismatch {
                expected: self.samples,
                got: assignment.len(),
            });
        }
        self.entries.push_front(assignment);
        self.entries.truncate(self.window + 1);
        Ok(())
    }
}

/// `sum_k alpha^k * (+1 if i and medoid shared a cluster k epochs ago, else -1)`.
pub fn voting_score(history: &AssignmentHistory, i: usize, medoid: usize, alpha: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(PcpError::NoHistory);
    }
    let terms = history.len().min(history.window + 1);
    let mut score = 0.0;
    let mut weight = 1.0;
    for entry in history.entries.iter().take(terms) {
        let (Some(a), Some(b)) = (entry.get(i), entry.get(medoid)) else {
            return Err(PcpError::IndexError {
                index: i.max(medoid),
                len: entry.len(),
            });
        };
        score += if a == b { weight } else { -weight };
        weight *= alpha;
    }
    Ok(score)
}

/// Largest attainable magnitude of [`voting_score`] with `terms` entries.
pub fn voting_bound(alpha: f64, terms: usize) -> f64 {
    (1.0 - alpha.powi(terms as i32)) / (1.0 - alpha)
}

/// Per-cluster result of the distance filter, indexed by k-means cluster id.
#[derive(Debug, Clone, PartialEq)]
pub struct CpSplit {
    pub retained: Vec<Vec<usize>>,
    pub discarded: Vec<Vec<usize>>,
}

impl CpSplit {
    pub fn retained_count(&self) -> usize {
        self.retained.iter().map(Vec::len).sum()
    }

    pub fn discarded_count(&self) -> usize {
        self.discarded.iter().map(Vec::len).sum()
    }

    /// The split taken as final pseudo labels.
    pub fn into_labels(self, epoch: usize) -> PseudoLabelSet {
        let mut instance_ids: Vec<usize> = self.discarded.into_iter().flatten().collect();
        instance_ids.sort_unstable();
        PseudoLabelSet::assemble(epoch, self.retained, instance_ids, Vec::new(), Vec::new())
    }
}

/// Move the `floor(gamma * m)` members farthest from their centroid out of
/// each cluster, never removing the last (closest) member.
pub fn filter_unreliable(state: &ClusterState, gamma: f64) -> CpSplit {
    let mut retained = Vec::with_capacity(state.num_clusters);
    let mut discarded = Vec::with_capacity(state.num_clusters);
    for mut members in state.members() {
        members.sort_by(|&a, &b| {
            state.distance[a]
                .total_cmp(&state.distance[b])
                .then(a.cmp(&b))
        });
        let m = members.len();
        let drop = ((gamma * m as f64 + FLOOR_SLACK).floor() as usize).min(m.saturating_sub(1));
        let tail = members.split_off(m - drop);
        retained.push(members);
        discarded.push(tail);
    }
    CpSplit { retained, discarded }
}

/// Final supervision for one epoch: retained clusters plus instance-level ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    pub epoch: usize,
    /// Nonempty clusters with compacted ids, members ascending.
    pub cluster_members: Vec<Vec<usize>>,
    /// k-means id each compacted cluster came from.
    pub source_cluster: Vec<usize>,
    /// Samples supervised as their own class, ascending.
    pub instance_ids: Vec<usize>,
    /// Retained members moved to the instance set by voting.
    pub demoted: Vec<usize>,
    /// Discarded members returned to their cluster by voting.
    pub pulled_back: Vec<usize>,
}

impl PseudoLabelSet {
    fn assemble(
        epoch: usize,
        clusters: Vec<Vec<usize>>,
        instance_ids: Vec<usize>,
        demoted: Vec<usize>,
        pulled_back: Vec<usize>,
    ) -> Self {
        let mut cluster_members = Vec::new();
        let mut source_cluster = Vec::new();
        for (c, mut members) in clusters.into_iter().enumerate() {
            if !members.is_empty() {
                members.sort_unstable();
                cluster_members.push(members);
                source_cluster.push(c);
            }
        }
        Self {
            epoch,
            cluster_members,
            source_cluster,
            instance_ids,
            demoted,
            pulled_back,
        }
    }

    /// Every sample as its own instance, as in pure instance discrimination.
    pub fn all_instances(epoch: usize, n: usize) -> Self {
        Self {
            epoch,
            instance_ids: (0..n).collect(),
            ..Default::default()
        }
    }

    /// Every nonempty k-means cluster kept whole.
    pub fn from_state(state: &ClusterState) -> Self {
        Self::assemble(state.epoch, state.members(), Vec::new(), Vec::new(), Vec::new())
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_members.iter().map(Vec::len).sum()
    }

    /// Total number of samples covered.
    pub fn len(&self) -> usize {
        self.cluster_count() + self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ordered within-cluster pairs, diagonal included.
    pub fn pair_count(&self) -> usize {
        self.cluster_members.iter().map(|m| m.len() * m.len()).sum()
    }

    /// Compacted cluster id per sample, `None` for instance-supervised ones.
    pub fn sample_clusters(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (c, members) in self.cluster_members.iter().enumerate() {
            for &i in members {
                out[i] = Some(c);
            }
        }
        out
    }

    /// Whether clusters and instances partition `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let all = self
            .cluster_members
            .iter()
            .flatten()
            .chain(self.instance_ids.iter());
        for &i in all {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s) && self.cluster_members.iter().all(|m| !m.is_empty())
    }
}

/// Apply voting to a distance split: demote retained members below
/// `theta_low`, pull back discarded members above `theta_high`.
pub fn refine_with_votes(
    split: &CpSplit,
    state: &ClusterState,
    history: &AssignmentHistory,
    params: &PurifyParams,
) -> Result<PseudoLabelSet> {
    if history.is_empty() {
        return Err(PcpError::NoHistory);
    }
    let mut clusters = Vec::with_capacity(split.retained.len());
    let mut instances = Vec::new();
    let mut demoted = Vec::new();
    let mut pulled_back = Vec::new();
    for (c, (retained, discarded)) in split.retained.iter().zip(&split.discarded).enumerate() {
        let Some(medoid) = state.medoid.get(c).copied().flatten() else {
            instances.extend_from_slice(retained);
            instances.extend_from_slice(discarded);
            clusters.push(Vec::new());
            continue;
        };
        let mut kept = Vec::with_capacity(retained.len());
        for &i in retained {
            if voting_score(history, i, medoid, params.alpha)? < params.theta_low {
                demoted.push(i);
                instances.push(i);
            } else {
                kept.push(i);
            }
        }
        for &i in discarded {
            if voting_score(history, i, medoid, params.alpha)? > params.theta_high {
                pulled_back.push(i);
                kept.push(i);
            } else {
                instances.push(i);
            }
        }
        clusters.push(kept);
    }
    instances.sort_unstable();
    demoted.sort_unstable();
    pulled_back.sort_unstable();
    Ok(PseudoLabelSet::assemble(
        state.epoch,
        clusters,
        instances,
        demoted,
        pulled_back,
    ))
}

/// Full purification for one epoch: distance filter, then voting when active.
pub fn purify(
    state: &ClusterState,
    history: &AssignmentHistory,
    params: &PurifyParams,
) -> Result<PseudoLabelSet> {
    let split = filter_unreliable(state, params.gamma);
    if params.voting_active(state.epoch) {
        refine_with_votes(&split, state, history, params)
    } else {
        Ok(split.into_labels(state.epoch))
    }
}
