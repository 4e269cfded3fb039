//! The alternating loop: cluster the bank, purify, learn, repeat.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, schedule_cluster_count, ClusterState, ScheduleParams};
use crate::embedding::EmbeddingBank;
use crate::encoder::{sgd_step, Grads, Mlp, OptimState};
use crate::error::{PcpError, Result};
use crate::evaluation::{cluster_purity, filter_pr, knn_accuracy, nmi};
use crate::harness::config::{Mode, RunConfig};
use crate::harness::dataset::Dataset;
use crate::objective::{loss_total, warmup_weight, QueryStats};
use crate::par;
use crate::purification::{
    filter_unreliable, refine_with_votes, AssignmentHistory, PseudoLabelSet,
};

/// Metrics for one epoch. `wall_time` stays out of the serialized form so
/// metric logs are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub num_clusters: usize,
    pub loss_instance: f64,
    pub loss_cluster: f64,
    pub loss_total: f64,
    pub warmup_weight: f64,
    pub kept_fraction: f64,
    pub demoted_count: usize,
    pub pulled_back_count: usize,
    pub knn_accuracy: Option<f64>,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub filter_precision: Option<f64>,
    pub filter_recall: Option<f64>,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Steps of one epoch, reported to observers in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Schedule,
    Snapshot,
    Cluster,
    FilterUnreliable,
    PushHistory,
    Vote,
    Learn,
    Evaluate,
}

/// Everything known about an epoch once it finishes.
pub struct EpochView<'a> {
    pub round: usize,
    pub state: &'a ClusterState,
    pub labels: &'a PseudoLabelSet,
    pub record: &'a EpochRecord,
}

/// Hooks into the loop, for tracing and tests.
pub trait TrainObserver {
    fn stage(&mut self, _epoch: usize, _stage: Stage) {}
    fn epoch_end(&mut self, _view: &EpochView<'_>) {}
}

impl TrainObserver for () {}

/// Records every stage in order.
#[derive(Debug, Default, Clone)]
pub struct StageTrace {
    pub events: Vec<(usize, Stage)>,
}

impl TrainObserver for StageTrace {
    fn stage(&mut self, epoch: usize, stage: Stage) {
        self.events.push((epoch, stage));
    }
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub records: Vec<EpochRecord>,
    pub encoder: Mlp,
    pub bank: EmbeddingBank,
}

/// SplitMix64 finalizer, for deriving independent seeds.
fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_KMEANS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_PAIRS: u64 = 4;

/// Per-sample results of one mini-batch pass.
struct SampleStep {
    grads: Grads,
    output: Vec<f32>,
    instance_loss: Option<f64>,
    cluster_loss: Option<(f64, usize)>,
}

#[derive(Default)]
struct EpochLosses {
    instance_sum: f64,
    instance_count: usize,
    cluster_sum: f64,
    cluster_pairs: usize,
}

impl EpochLosses {
    fn instance(&self) -> f64 {
        if self.instance_count == 0 {
            0.0
        } else {
            self.instance_sum / self.instance_count as f64
        }
    }

    fn cluster(&self) -> f64 {
        if self.cluster_pairs == 0 {
            0.0
        } else {
            self.cluster_sum / self.cluster_pairs as f64
        }
    }
}

/// Training state carried across epochs and rounds.
pub struct Trainer<'a> {
    config: &'a RunConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    encoder: Mlp,
    optim: OptimState,
    bank: EmbeddingBank,
    history: AssignmentHistory,
    num_classes: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a RunConfig, train: &'a Dataset, test: Option<&'a Dataset>) -> Result<Self> {
        config.validate()?;
        let n = train.len();
        if n < 2 {
            return Err(PcpError::ingest("dataset", format!("need at least 2 samples, found {n}")));
        }
        if config.schedule.floor_clusters > n {
            return Err(PcpError::ConfigError(format!(
                "floor_clusters {} exceeds the {n} training samples",
                config.schedule.floor_clusters
            )));
        }
        if let Some(t) = test {
            if t.dim != train.dim {
                return Err(PcpError::DimensionMismatch {
                    expected: train.dim,
                    got: t.dim,
                });
            }
        }
        let num_classes = train
            .num_classes()
            .into_iter()
            .chain(test.and_then(Dataset::num_classes))
            .max()
            .unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_INIT, 0));
        let encoder = Mlp::new(config.encoder.spec(train.dim), &mut rng)?;
        let bank = EmbeddingBank::random(n, config.encoder.output_dim, &mut rng)?;
        let optim = OptimState::new(
            &encoder,
            config.optim.lr.lr0,
            config.optim.momentum,
            config.optim.weight_decay,
        );
        Ok(Self {
            config,
            train,
            test,
            encoder,
            optim,
            bank,
            history: AssignmentHistory::new(config.purify.window, n),
            num_classes,
        })
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            total_samples: self.train.len(),
            total_epochs: self.config.schedule.total_epochs,
            floor_clusters: self.config.schedule.floor_clusters,
        }
    }

    /// Run every round and epoch, returning one record per epoch.
    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<TrainingOutcome> {
        let epochs = self.config.schedule.total_epochs;
        let mut records = Vec::with_capacity(epochs * self.config.rounds);
        for round in 0..self.config.rounds {
            for local in 0..epochs {
                let global = round * epochs + local;
                let record = self
                    .epoch(round, local, global, observer)
                    .map_err(|e| e.at_epoch(global))?;
                records.push(record);
            }
        }
        Ok(TrainingOutcome {
            records,
            encoder: self.encoder,
            bank: self.bank,
        })
    }

    fn epoch(
        &mut self,
        round: usize,
        local: usize,
        global: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<EpochRecord> {
        let started = Instant::now();
        let cfg = self.config;
        let n = self.train.len();

        observer.stage(global, Stage::Schedule);
        let num_clusters = match (cfg.mode, round) {
            (Mode::DcBaseline, _) => cfg.schedule.floor_clusters,
            (_, 0) => schedule_cluster_count(&self.schedule(), local)?,
            _ => cfg.schedule.floor_clusters,
        };

        observer.stage(global, Stage::Snapshot);
        let snapshot = self.bank.clone();

        observer.stage(global, Stage::Cluster);
        let mut state = kmeans_fit(&snapshot, num_clusters, mix(cfg.seed, STREAM_KMEANS, global as u64))?;
        state.epoch = global;

        observer.stage(global, Stage::FilterUnreliable);
        let split = filter_unreliable(&state, cfg.purify.gamma);

        observer.stage(global, Stage::PushHistory);
        self.history.push(state.assignment.clone())?;

        let labels = match cfg.mode {
            Mode::Pcp if cfg.purify.voting_active(global) => {
                observer.stage(global, Stage::Vote);
                refine_with_votes(&split, &state, &self.history, &cfg.purify)?
            }
            Mode::Pcp => split.into_labels(global),
            Mode::DcBaseline => PseudoLabelSet::from_state(&state),
            Mode::IrBaseline => PseudoLabelSet::all_instances(global, n),
        };
        debug_assert!(labels.is_partition_of(n));

        observer.stage(global, Stage::Learn);
        let weight = if cfg.warmup && round == 0 && cfg.mode != Mode::IrBaseline {
            warmup_weight(local, &cfg.loss)
        } else {
            0.0
        };
        let lr = cfg.optim.lr.at(local);
        let losses = self.learn(&labels, weight, lr, global)?;
        let loss_instance = losses.instance();
        let loss_cluster = losses.cluster();
        let total = loss_total(loss_instance, loss_cluster)?;

        observer.stage(global, Stage::Evaluate);
        let (purity, nmi_value, audit) = match &self.train.labels {
            Some(y) => (
                Some(cluster_purity(&state.assignment, y)?),
                Some(nmi(&state.assignment, y)?),
                Some(filter_pr(&labels, &state, y)?),
            ),
            None => (None, None, None),
        };
        let knn = self.knn_accuracy()?;

        let record = EpochRecord {
            epoch: global,
            num_clusters,
            loss_instance,
            loss_cluster,
            loss_total: total,
            warmup_weight: weight,
            kept_fraction: labels.cluster_count() as f64 / n as f64,
            demoted_count: labels.demoted.len(),
            pulled_back_count: labels.pulled_back.len(),
            knn_accuracy: knn,
            purity,
            nmi: nmi_value,
            filter_precision: audit.and_then(|a| a.precision),
            filter_recall: audit.map(|a| a.recall),
            wall_time: started.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&EpochView {
            round,
            state: &state,
            labels: &labels,
            record: &record,
        });
        Ok(record)
    }

    /// One pass over the data in shuffled mini-batches. Per-sample objective
    /// for query `j` with unit embedding `v`:
    ///
    /// `w * aux + (1 - w) * (inst + cluster)`, where `aux` is `-log P(j|v)`
    /// averaged over the batch, `inst` the same over instance-supervised
    /// samples only, and `cluster` is `-log P(i|v)` averaged over all
    /// (member `i`, query `j`) pairs of clustered samples in the batch.
    fn learn(&mut self, labels: &PseudoLabelSet, weight: f64, lr: f64, epoch: usize) -> Result<EpochLosses> {
        let cfg = self.config;
        let n = self.train.len();
        let tau = cfg.loss.tau;
        let sample_cluster = labels.sample_clusters(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let pair_cap = cfg.loss.cluster_pair_cap;
        let pair_seed = mix(cfg.seed, STREAM_PAIRS, epoch as u64);

        let mut losses = EpochLosses::default();
        for batch in order.chunks(cfg.optim.batch_size) {
            let targets_of = |j: usize| -> Option<Vec<usize>> {
                let members = &labels.cluster_members[sample_cluster[j]?];
                Some(match pair_cap {
                    Some(cap) if cap < members.len() => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(pair_seed, j as u64, 0));
                        let mut picks = index::sample(&mut rng, members.len(), cap).into_vec();
                        picks.sort_unstable();
                        picks.into_iter().map(|p| members[p]).collect()
                    }
                    _ => members.clone(),
                })
            };
            let instance_count = batch.iter().filter(|&&j| sample_cluster[j].is_none()).count();
            let pair_count: usize = batch
                .iter()
                .filter_map(|&j| sample_cluster[j].map(|c| labels.cluster_members[c].len()))
                .map(|m| pair_cap.map_or(m, |cap| m.min(cap)))
                .sum();
            let aux_scale = weight / batch.len() as f64;
            let inst_scale = if instance_count == 0 {
                0.0
            } else {
                (1.0 - weight) / instance_count as f64
            };
            let pair_scale = if pair_count == 0 {
                0.0
            } else {
                (1.0 - weight) / pair_count as f64
            };

            let encoder = &self.encoder;
            let bank = &self.bank;
            let train = self.train;
            let steps = par::try_map_range(batch.len(), |b| -> Result<SampleStep> {
                let j = batch[b];
                let cache = encoder.forward(train.row(j))?;
                let stats = QueryStats::new(bank, &cache.output, tau)?;
                let expected = stats.expected_row(bank);
                let mut grad = vec![0.0f64; expected.len()];
                let mut add = |g: &[f64], scale: f64| {
                    for (a, &x) in grad.iter_mut().zip(g) {
                        *a += scale * x;
                    }
                };
                let mut instance_loss = None;
                let mut cluster_loss = None;
                let (self_loss, self_grad) = stats.target_loss_and_grad(bank, &expected, &[j]);
                if aux_scale > 0.0 {
                    add(&self_grad, aux_scale);
                }
                match targets_of(j) {
                    None => {
                        add(&self_grad, inst_scale);
                        instance_loss = Some(self_loss);
                    }
                    Some(targets) => {
                        let (l, g) = stats.target_loss_and_grad(bank, &expected, &targets);
                        add(&g, pair_scale);
                        cluster_loss = Some((l, targets.len()));
                    }
                }
                let (grads, _) = encoder.backward(&cache, &grad)?;
                Ok(SampleStep {
                    grads,
                    output: cache.output,
                    instance_loss,
                    cluster_loss,
                })
            })?;

            let mut total = Grads::zeros_like(&self.encoder);
            for step in &steps {
                total.add_scaled(&step.grads, 1.0)?;
                if let Some(l) = step.instance_loss {
                    losses.instance_sum += l;
                    losses.instance_count += 1;
                }
                if let Some((l, pairs)) = step.cluster_loss {
                    losses.cluster_sum += l;
                    losses.cluster_pairs += pairs;
                }
            }
            if !total.is_finite() {
                return Err(PcpError::NumericError("non-finite gradient".into()));
            }
            sgd_step(&mut self.encoder, &total, &mut self.optim, lr)?;
            for (&j, step) in batch.iter().zip(&steps) {
                self.bank.update(j, &step.output, cfg.optim.bank_momentum)?;
            }
        }
        if !losses.instance_sum.is_finite() || !losses.cluster_sum.is_finite() {
            return Err(PcpError::NumericError("non-finite loss".into()));
        }
        Ok(losses)
    }

    fn knn_accuracy(&self) -> Result<Option<f64>> {
        let (Some(test), Some(train_labels)) = (self.test, &self.train.labels) else {
            return Ok(None);
        };
        let Some(test_labels) = &test.labels else {
            return Ok(None);
        };
        if test.is_empty() {
            return Ok(None);
        }
        let train_emb = embed_dataset(&self.encoder, self.train)?;
        let test_emb = embed_dataset(&self.encoder, test)?;
        knn_accuracy(
            &train_emb,
            train_labels,
            self.num_classes,
            &test_emb,
            test_labels,
            self.config.eval.knn_k,
            self.config.eval.knn_tau,
        )
        .map(Some)
    }
}

/// Encoder output for every row of `data`.
pub fn embed_dataset(encoder: &Mlp, data: &Dataset) -> Result<EmbeddingBank> {
    let rows = par::try_map_range(data.len(), |i| encoder.embed(data.row(i)))?;
    let dim = encoder.spec().output_dim;
    EmbeddingBank::from_unit_data(dim, rows.into_iter().flatten().collect())
}

/// Train on in-memory data.
pub fn train_on(
    config: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainingOutcome> {
    Trainer::new(config, train, test)?.run(observer)
}
