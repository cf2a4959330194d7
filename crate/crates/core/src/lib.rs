//! Informative path planning on a probabilistic roadmap with a Gaussian
//! process belief, plus heuristic data-collection planners and a
//! batch-constrained offline Q-learning trainer.
//!
//! The crate is organized bottom-up:
//!
//! - [`field`]: ground-truth intensity as a normalized Gaussian mixture
//! - [`prm`]: roadmap construction, geodesics, budget feasibility masks
//! - [`gp`]: exact GP regression with an incremental posterior tracker
//! - [`episode`]: the sequential decision process (state, reward, features)
//! - [`planners`]: heuristic baselines used to collect datasets
//! - [`nn`]: the per-candidate scoring network and its optimizer
//! - [`offline_rl`]: behavior cloning and batch-constrained Q-learning
//! - [`dataset`]: portable on-disk dataset format with integrity checks
//! - [`rollout`]: seeded episode execution, dataset generation, evaluation

pub mod checksum;
pub mod dataset;
pub mod episode;
pub mod field;
pub mod gp;
pub mod nn;
pub mod offline_rl;
pub mod planners;
pub mod prm;
pub mod rollout;
pub mod seed;

pub use planners::PlannerKind;

pub use dataset::{
    dataset_stats, read_dataset, write_dataset, DatasetManifest, DatasetStats, EpisodeMeta,
    EpisodeRecord, EpisodeSummary,
};
pub use episode::{BeliefState, EnvConfig, Environment, Transition};
pub use field::{sample_field, IntensityField};
pub use gp::{GpHyper, GpModel, TrackedGp};
pub use nn::{Checkpoint, CheckpointKind, NetConfig, ParamSet};
pub use offline_rl::{
    bc_select_action, bcq_select_action, pretrain_behavior, train_offline, MetricsRow,
    TrainConfig, TrainOutput,
};
pub use prm::{build_prm, budget_mask, shortest_dists, GeodesicTable, PrmGraph};
pub use rollout::{evaluate, generate_dataset, run_episode, EvalRow, GenConfig, Policy};
