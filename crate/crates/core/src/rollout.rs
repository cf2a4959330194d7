//! Seeded episode execution: rolls policies through environments, records
//! transition datasets, and runs paired evaluations. Every episode's seeds
//! derive from a master seed plus the episode index, so results are
//! identical regardless of worker count.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{EpisodeMeta, EpisodeRecord, EpisodeSummary, SCHEMA_VERSION};
use crate::episode::{EnvConfig, EnvError, Environment, Transition};
use crate::nn::ParamSet;
use crate::offline_rl::{bc_select_action, bcq_select_action};
use crate::planners::{
    self, greedy_entropy_step, lookahead_step, mixture_step, random_walk_step, PlannerKind,
};
use crate::seed;

/// Seed streams for per-episode derivation.
const FIELD_STREAM: u64 = 0x666c_64; // "fld"
const GRAPH_STREAM: u64 = 0x6772_66; // "grf"
const BUDGET_STREAM: u64 = 0x6264_67; // "bdg"
const POLICY_STREAM: u64 = 0x706f_6c; // "pol"

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("episode {index}: {source}")]
    Episode {
        index: usize,
        #[source]
        source: EnvError,
    },
    #[error("invalid planner: {0}")]
    BadPlanner(String),
}

/// An action-selection strategy an episode can be rolled out with.
#[derive(Debug, Clone)]
pub enum Policy<'a> {
    Planner(PlannerKind),
    /// Batch-constrained Q policy from a trained checkpoint.
    Bcq { params: &'a ParamSet, tau: f64 },
    /// Behavior-clone baseline: behavior-head argmax.
    BehaviorClone { params: &'a ParamSet },
}

impl Policy<'_> {
    /// Stable string used in dataset metadata and result tables.
    pub fn label(&self) -> String {
        match self {
            Policy::Planner(kind) => kind.to_string(),
            Policy::Bcq { tau, .. } => format!("bcq:{tau}"),
            Policy::BehaviorClone { .. } => "bc".to_string(),
        }
    }
}

/// A finished episode: its dataset record plus how much wall-clock time the
/// policy spent deciding (environment stepping and GP updates excluded, so
/// timing comparisons isolate planning cost).
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub record: EpisodeRecord,
    pub decision_time: Duration,
}

/// Rolls one episode to completion. Start/destination are resampled inside
/// the environment when not given; stochastic policies draw from
/// `policy_seed`.
pub fn run_episode(
    cfg: &EnvConfig,
    policy: &Policy<'_>,
    field_seed: u64,
    graph_seed: u64,
    budget: f64,
    start: Option<usize>,
    dest: Option<usize>,
    policy_seed: u64,
) -> Result<EpisodeOutcome, EnvError> {
    let mut env = Environment::reset(cfg, field_seed, graph_seed, budget, start, dest)?;
    let mut rng = seed::rng_from(policy_seed);
    let mut decision_time = Duration::ZERO;

    // Full-path planners commit to a node sequence up front; the plan itself
    // is the decision cost.
    let planned: Option<Vec<usize>> = match policy {
        Policy::Planner(kind) if kind.plans_full_path() => {
            let (samples, cap) = match kind {
                PlannerKind::RandOrienteering {
                    samples,
                    time_cap_secs,
                } => (*samples, time_cap_secs.map(Duration::from_secs_f64)),
                _ => unreachable!("only the orienteering planner plans full paths"),
            };
            let t0 = Instant::now();
            let plan = planners::rand_orienteering_search(env.state(), cfg, samples, cap, &mut rng);
            decision_time += t0.elapsed();
            Some(plan.nodes)
        }
        _ => None,
    };
    let mut plan_cursor = 0usize;

    let start_node = env.state().history[0];
    let dest_node = env.state().dest;
    let mut steps: Vec<Transition> = Vec::new();
    while !env.is_done() {
        let (state_features, state_mask) = env.state().candidate_features();
        let t0 = Instant::now();
        let action = match (&planned, policy) {
            (Some(nodes), _) => {
                let next = nodes[plan_cursor];
                plan_cursor += 1;
                env.state()
                    .candidates()
                    .iter()
                    .position(|&j| j == next)
                    .expect("planned hop follows a roadmap edge")
            }
            (None, Policy::Planner(kind)) => match kind {
                PlannerKind::GreedyEntropy => greedy_entropy_step(env.state()),
                PlannerKind::Lookahead { depth } => lookahead_step(env.state(), cfg, *depth),
                PlannerKind::Mixture { eps } => mixture_step(env.state(), *eps, &mut rng),
                PlannerKind::RandomWalk => random_walk_step(env.state(), &mut rng),
                PlannerKind::RandOrienteering { .. } => unreachable!("handled as full path"),
            },
            (None, Policy::Bcq { params, tau }) => {
                bcq_select_action(params, &state_features, &state_mask, *tau)
            }
            (None, Policy::BehaviorClone { params }) => {
                bc_select_action(params, &state_features, &state_mask)
            }
        };
        decision_time += t0.elapsed();
        let (reward, done) = env.step(action)?;
        let (next_features, next_mask) = env.state().candidate_features();
        steps.push(Transition {
            state_features,
            state_mask,
            action,
            reward,
            next_features,
            next_mask,
            done,
        });
    }

    let record = EpisodeRecord {
        meta: EpisodeMeta {
            field_seed,
            graph_seed,
            budget,
            start: start_node,
            dest: dest_node,
            planner: policy.label(),
            format_version: SCHEMA_VERSION.to_string(),
        },
        summary: EpisodeSummary {
            final_trace: env.state().trace_now(),
            path_length: env.path_len(),
            step_count: steps.len(),
        },
        steps,
    };
    Ok(EpisodeOutcome {
        record,
        decision_time,
    })
}

/// Worker count: an explicit request wins, then the OFFRIPP_THREADS
/// environment variable; 0 lets the thread pool pick its default.
pub fn worker_count(explicit: Option<usize>) -> usize {
    explicit.or_else(|| {
        std::env::var("OFFRIPP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn pool(workers: Option<usize>) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(workers))
        .build()
        .expect("thread pool construction")
}

/// Dataset-generation request.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub planner: PlannerKind,
    pub episodes: usize,
    pub seed: u64,
    /// Budgets drawn uniformly from this range (defaults to the environment's
    /// training range).
    pub budget_range: Option<(f64, f64)>,
    pub workers: Option<usize>,
}

/// Generates independent episodes in parallel. Episode i's field, graph,
/// budget, and policy seeds derive from (seed, i) alone, and results are
/// collected in index order — output is a pure function of the request.
pub fn generate_dataset(
    cfg: &EnvConfig,
    gen: &GenConfig,
) -> Result<Vec<EpisodeRecord>, RolloutError> {
    gen.planner
        .validate()
        .map_err(RolloutError::BadPlanner)?;
    let (lo, hi) = gen.budget_range.unwrap_or(cfg.budget_range);
    let policy = Policy::Planner(gen.planner);
    pool(gen.workers).install(|| {
        (0..gen.episodes)
            .into_par_iter()
            .map(|i| {
                use rand::Rng;
                let idx = i as u64;
                let budget = seed::rng(gen.seed, BUDGET_STREAM, idx).gen_range(lo..=hi);
                run_episode(
                    cfg,
                    &policy,
                    seed::derive(gen.seed, FIELD_STREAM, idx),
                    seed::derive(gen.seed, GRAPH_STREAM, idx),
                    budget,
                    None,
                    None,
                    seed::derive(gen.seed, POLICY_STREAM, idx),
                )
                .map(|o| o.record)
                .map_err(|source| RolloutError::Episode { index: i, source })
            })
            .collect()
    })
}

/// One evaluated episode (summaries only; eval does not keep transitions).
#[derive(Debug, Clone)]
pub struct EvalEpisode {
    pub policy: String,
    pub budget: f64,
    pub instance: usize,
    pub final_trace: f64,
    pub path_length: f64,
    pub steps: usize,
    pub decision_seconds: f64,
}

/// Aggregated evaluation row for one (policy, budget) cell.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub policy: String,
    pub budget: f64,
    pub episodes: usize,
    pub mean_final_trace: f64,
    pub std_final_trace: f64,
    pub mean_decision_seconds: f64,
}

/// Paired evaluation: every policy sees the identical environment instance
/// (same field, graph, start/destination) for each (budget, instance) cell.
/// Returns aggregate rows plus per-episode summaries.
pub fn evaluate(
    cfg: &EnvConfig,
    policies: &[Policy<'_>],
    budgets: &[f64],
    n_envs: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<(Vec<EvalRow>, Vec<EvalEpisode>), RolloutError> {
    let mut episodes = Vec::new();
    let mut rows = Vec::new();
    let worker_pool = pool(workers);
    for (p_idx, policy) in policies.iter().enumerate() {
        for (b_idx, &budget) in budgets.iter().enumerate() {
            let cell: Result<Vec<EvalEpisode>, RolloutError> = worker_pool.install(|| {
                (0..n_envs)
                    .into_par_iter()
                    .map(|i| {
                        let idx = i as u64;
                        // Instance seeds ignore the policy and budget, so all
                        // comparisons are on matched instances.
                        let outcome = run_episode(
                            cfg,
                            policy,
                            seed::derive(seed, FIELD_STREAM, idx),
                            seed::derive(seed, GRAPH_STREAM, idx),
                            budget,
                            None,
                            None,
                            seed::derive(seed, POLICY_STREAM + p_idx as u64, idx * 64 + b_idx as u64),
                        )
                        .map_err(|source| RolloutError::Episode { index: i, source })?;
                        Ok(EvalEpisode {
                            policy: policy.label(),
                            budget,
                            instance: i,
                            final_trace: outcome.record.summary.final_trace,
                            path_length: outcome.record.summary.path_length,
                            steps: outcome.record.summary.step_count,
                            decision_seconds: outcome.decision_time.as_secs_f64(),
                        })
                    })
                    .collect()
            });
            let cell = cell?;
            // Aggregate this cell by position, not by label: distinct policies
            // may share a display label (e.g. two checkpoints trained with the
            // same tau) and must still get separate rows.
            let n = cell.len() as f64;
            let mean = cell.iter().map(|e| e.final_trace).sum::<f64>() / n;
            let var = (cell
                .iter()
                .map(|e| (e.final_trace - mean) * (e.final_trace - mean))
                .sum::<f64>()
                / n)
                .max(0.0);
            rows.push(EvalRow {
                policy: policy.label(),
                budget,
                episodes: cell.len(),
                mean_final_trace: mean,
                std_final_trace: var.sqrt(),
                mean_decision_seconds: cell.iter().map(|e| e.decision_seconds).sum::<f64>() / n,
            });
            episodes.extend(cell);
        }
    }
    Ok((rows, episodes))
}

/// Per-trajectory planning-time comparison on matched instances. Runs
/// serially so wall-clock measurements do not contend for cores.
pub fn bench_timing(
    cfg: &EnvConfig,
    policies: &[Policy<'_>],
    budget: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<EvalEpisode>, RolloutError> {
    let mut out = Vec::new();
    for (p_idx, policy) in policies.iter().enumerate() {
        for i in 0..n {
            let idx = i as u64;
            let outcome = run_episode(
                cfg,
                policy,
                seed::derive(seed, FIELD_STREAM, idx),
                seed::derive(seed, GRAPH_STREAM, idx),
                budget,
                None,
                None,
                seed::derive(seed, POLICY_STREAM + p_idx as u64, idx),
            )
            .map_err(|source| RolloutError::Episode { index: i, source })?;
            out.push(EvalEpisode {
                policy: policy.label(),
                budget,
                instance: i,
                final_trace: outcome.record.summary.final_trace,
                path_length: outcome.record.summary.path_length,
                steps: outcome.record.summary.step_count,
                decision_seconds: outcome.decision_time.as_secs_f64(),
            });
        }
    }
    Ok(out)
}
