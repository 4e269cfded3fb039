//! Progressive cluster purification: unsupervised feature learning that
//! alternates k-means over a memory bank of embeddings, with a cluster count
//! shrinking from one-per-sample toward a floor, with purification of the
//! resulting pseudo labels and momentum-SGD training of a small encoder
//! against a non-parametric softmax.
//!
//! Data-parallel kernels go through [`par`]; build without the default
//! `parallel` feature for a single-threaded library with identical output.

pub mod clustering;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod objective;
pub mod par;
pub mod purification;

pub use clustering::{kmeans_fit, medoid_of, schedule_cluster_count, ClusterState, ScheduleParams};
pub use embedding::{cosine_sim, normalize, EmbeddingBank};
pub use encoder::{lr_at_epoch, sgd_step, EncoderSpec, Mlp, OptimState};
pub use error::{PcpError, Result};
pub use evaluation::{cluster_purity, filter_pr, knn_predict, linear_probe, nmi, LabeledSplit};
pub use harness::{run_training, sweep, EpochRecord, Mode, RunConfig};
pub use objective::{grad_wrt_query, loss_cluster, loss_instance, loss_total, prob_instance, warmup_weight, LossParams};
pub use purification::{
    filter_unreliable, refine_with_votes, voting_score, AssignmentHistory, PseudoLabelSet, PurifyParams,
};
