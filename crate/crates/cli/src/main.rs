//! `offripp` — orchestrates the full benchmark workflow: generate heuristic
//! datasets, train the offline policy, evaluate policies on paired
//! environments, sweep dataset sizes and constraint thresholds, and time
//! planners against learned policies.
//!
//! Exit codes: 0 success, 2 invalid input (flags, files, schemas), 1 runtime
//! failure. All CSV outputs have a header row and end with a `#` metadata
//! comment recording seeds and versions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use offripp_core::dataset::{self, flatten_transitions, DatasetError};
use offripp_core::nn::{Checkpoint, CheckpointKind, NetConfig, NnError};
use offripp_core::offline_rl::{train_offline, TrainConfig, TrainError};
use offripp_core::rollout::{
    bench_timing, evaluate, generate_dataset, GenConfig, Policy, RolloutError,
};
use offripp_core::{seed, EnvConfig, EpisodeRecord, PlannerKind};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "offripp",
    version,
    about = "Informative-path-planning benchmark: dataset generation, offline Q-learning, evaluation"
)]
struct CliArgs {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of planner episodes.
    GenDataset(GenArgs),
    /// Train the offline policy on a dataset; writes model, imitation
    /// baseline, and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate planners and/or checkpoints on paired environments.
    Eval(EvalArgs),
    /// Train/evaluate across dataset sizes and threshold values.
    Sweep(SweepArgs),
    /// Compare per-trajectory planning time of a checkpoint and a baseline.
    BenchTime(BenchArgs),
    /// Summarize a dataset (per-budget outcome statistics).
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Planner: greedy_entropy | lookahead:D | mixture:EPS | random_walk |
    /// rand_orienteering:N
    #[arg(long)]
    planner: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Budgets drawn uniformly from LO,HI (default 6,8).
    #[arg(long, value_parser = parse_pair)]
    budget_range: Option<(f64, f64)>,
    /// Output dataset path (`.ds`; manifest written alongside).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset (`.ds`).
    #[arg(long)]
    data: PathBuf,
    /// Behavior-constraint threshold in [0,1]: 1 imitates, 0 is unconstrained.
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path; `<stem>.bc.ckpt` and `<stem>.metrics.csv` are
    /// written alongside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    target_update: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    bc_epochs: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Planner name or checkpoint path; repeatable.
    #[arg(long = "policy", required = true)]
    policies: Vec<String>,
    /// Evaluation budgets; repeatable or comma-separated.
    #[arg(long = "budget", value_delimiter = ',', default_values_t = [6.0, 8.0, 10.0])]
    budgets: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    envs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Master dataset; sweep cells train on shuffled prefixes of it.
    #[arg(long)]
    data: PathBuf,
    /// Dataset sizes, comma-separated (e.g. 500,2000).
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Threshold grid, comma-separated (default 0.3).
    #[arg(long = "taus", value_delimiter = ',', default_values_t = [0.3])]
    taus: Vec<f64>,
    /// Evaluation budget for every cell.
    #[arg(long, default_value_t = 8.0)]
    budget: f64,
    #[arg(long, default_value_t = 50)]
    envs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint to time.
    #[arg(long)]
    model: PathBuf,
    /// Baseline planner (default: sampling search with 64 candidates).
    #[arg(long, default_value = "rand_orienteering:64")]
    baseline: String,
    #[arg(long, default_value_t = 8.0)]
    budget: f64,
    /// Trajectories per policy.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// User-facing failure, split by exit code.
enum CliError {
    /// Bad input: flags, file contents, schemas. Exit 2.
    Validation(String),
    /// Failure while doing otherwise-valid work. Exit 1.
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Errors from loading user-supplied inputs are validation failures; the
/// file was named by the user and is missing, corrupt, or mis-shaped.
fn load_records(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let (records, _) = dataset::read_dataset(path).map_err(CliError::validation)?;
    Ok(records)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected LO,HI — got {s:?}"));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    Ok((lo, hi))
}

fn parse_planner(s: &str) -> Result<PlannerKind, CliError> {
    let kind: PlannerKind = s
        .parse()
        .map_err(|e| CliError::Validation(format!("--planner {s:?}: {e}")))?;
    kind.validate()
        .map_err(|e| CliError::Validation(format!("--planner {s:?}: {e}")))?;
    Ok(kind)
}

/// A policy argument: either a planner name or a checkpoint file.
enum OwnedPolicy {
    Planner(PlannerKind),
    Ckpt(Checkpoint),
}

impl OwnedPolicy {
    fn resolve(arg: &str) -> Result<Self, CliError> {
        if let Ok(kind) = arg.parse::<PlannerKind>() {
            kind.validate()
                .map_err(|e| CliError::Validation(format!("--policy {arg:?}: {e}")))?;
            return Ok(OwnedPolicy::Planner(kind));
        }
        let path = Path::new(arg);
        if path.exists() {
            let ckpt = Checkpoint::load(path).map_err(CliError::validation)?;
            return Ok(OwnedPolicy::Ckpt(ckpt));
        }
        Err(CliError::Validation(format!(
            "--policy {arg:?} is neither a planner name nor a checkpoint file"
        )))
    }

    fn as_policy(&self) -> Policy<'_> {
        match self {
            OwnedPolicy::Planner(kind) => Policy::Planner(*kind),
            OwnedPolicy::Ckpt(ckpt) => match ckpt.kind {
                CheckpointKind::Bcq => Policy::Bcq {
                    params: &ckpt.params,
                    tau: ckpt.tau,
                },
                CheckpointKind::Bc => Policy::BehaviorClone {
                    params: &ckpt.params,
                },
            },
        }
    }
}

/// If OFFRIPP_THREADS is set it must be a number; a typo silently changing
/// parallelism would be worse than failing fast.
fn check_threads_var() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("OFFRIPP_THREADS") {
        v.parse::<usize>().map_err(|_| {
            CliError::Validation(format!("OFFRIPP_THREADS={v:?} is not a number"))
        })?;
    }
    Ok(())
}

/// Writes a CSV (or prints it) with the mandatory trailing metadata comment.
fn emit_csv(out: Option<&Path>, body: &str, meta: &str) -> Result<(), CliError> {
    let full = format!("{body}# {meta}\n");
    match out {
        Some(path) => std::fs::write(path, full)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{full}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn classify_train(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyDataset | TrainError::BadConfig(_) => CliError::validation(e),
        TrainError::NonFiniteLoss { .. } => CliError::runtime(e),
        TrainError::Nn(inner) => match inner {
            NnError::BadCheckpoint(_) => CliError::validation(inner),
            other => CliError::runtime(other),
        },
    }
}

fn classify_rollout(e: RolloutError) -> CliError {
    match e {
        RolloutError::BadPlanner(_) => CliError::validation(e),
        RolloutError::Episode { .. } => CliError::runtime(e),
    }
}

fn classify_write(e: DatasetError) -> CliError {
    // Writing our own freshly generated records should never trip
    // validation; any failure here is a runtime fault.
    CliError::runtime(e)
}

fn cmd_gen_dataset(args: &GenArgs) -> Result<(), CliError> {
    let planner = parse_planner(&args.planner)?;
    let cfg = EnvConfig::default();
    let gen = GenConfig {
        planner,
        episodes: args.episodes,
        seed: args.seed,
        budget_range: args.budget_range,
        workers: args.workers,
    };
    let records = generate_dataset(&cfg, &gen).map_err(classify_rollout)?;
    let manifest = dataset::write_dataset(&records, &args.out).map_err(classify_write)?;
    println!(
        "wrote {} episodes ({} transitions) to {} [checksum {:#018x}]",
        manifest.episodes,
        manifest.total_transitions,
        args.out.display(),
        manifest.checksum
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let records = load_records(&args.data)?;
    let transitions = flatten_transitions(&records);
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        target_update_every: args.target_update,
        tau: args.tau,
        gamma: args.gamma,
        lr: args.lr,
        epochs: args.epochs,
        bc_pretrain_epochs: args.bc_epochs,
        seed: args.seed,
        net: NetConfig {
            hidden_dim: args.hidden,
            ..NetConfig::default()
        },
    };
    cfg.validate().map_err(classify_train)?;
    let out = train_offline(&transitions, &cfg).map_err(classify_train)?;

    let model = Checkpoint {
        params: out.params,
        kind: CheckpointKind::Bcq,
        tau: args.tau,
        gamma: args.gamma,
        lr: args.lr,
    };
    model.save(&args.out).map_err(CliError::runtime)?;
    let bc_path = sibling(&args.out, ".bc.ckpt");
    let bc = Checkpoint {
        params: out.behavior,
        kind: CheckpointKind::Bc,
        tau: 1.0,
        gamma: args.gamma,
        lr: args.lr,
    };
    bc.save(&bc_path).map_err(CliError::runtime)?;

    let metrics_path = sibling(&args.out, ".metrics.csv");
    let mut body = String::from("step,td_loss,mean_q,sync_flag\n");
    for r in &out.metrics {
        let _ = writeln!(
            body,
            "{},{},{},{}",
            r.step,
            r.td_loss,
            r.mean_q,
            u8::from(r.sync_flag)
        );
    }
    emit_csv(
        Some(&metrics_path),
        &body,
        &format!(
            "seed={} tau={} gamma={} version={VERSION} schema={}",
            args.seed,
            args.tau,
            args.gamma,
            dataset::SCHEMA_VERSION
        ),
    )?;
    println!(
        "trained on {} transitions in {} steps; model {}, baseline {}, metrics {}",
        transitions.len(),
        out.metrics.len(),
        args.out.display(),
        bc_path.display(),
        metrics_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let owned: Vec<OwnedPolicy> = args
        .policies
        .iter()
        .map(|s| OwnedPolicy::resolve(s))
        .collect::<Result<_, _>>()?;
    let policies: Vec<Policy<'_>> = owned.iter().map(|p| p.as_policy()).collect();
    if args.envs == 0 {
        return Err(CliError::Validation("--envs must be at least 1".into()));
    }
    let cfg = EnvConfig::default();
    let (rows, _) = evaluate(
        &cfg,
        &policies,
        &args.budgets,
        args.envs,
        args.seed,
        args.workers,
    )
    .map_err(classify_rollout)?;
    let mut body =
        String::from("policy,budget,episodes,mean_final_trace,std_final_trace,mean_decision_seconds\n");
    for r in &rows {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            r.policy, r.budget, r.episodes, r.mean_final_trace, r.std_final_trace,
            r.mean_decision_seconds
        );
    }
    emit_csv(
        args.out.as_deref(),
        &body,
        &format!("seed={} envs={} version={VERSION}", args.seed, args.envs),
    )
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let records = load_records(&args.data)?;
    let max_size = *args.sizes.iter().max().unwrap_or(&0);
    if max_size > records.len() {
        return Err(CliError::Validation(format!(
            "sweep size {max_size} exceeds the master dataset ({} episodes)",
            records.len()
        )));
    }
    let mut shuffled = records;
    {
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut seed::rng(args.seed, 0x7377_6565_70, 0)); // "sweep"
    }
    let cfg = EnvConfig::default();
    let mut body = String::from(
        "size,tau,budget,episodes,mean_final_trace,std_final_trace,max_mean_q\n",
    );
    for &size in &args.sizes {
        let transitions = flatten_transitions(&shuffled[..size]);
        for &tau in &args.taus {
            let tc = TrainConfig {
                tau,
                seed: seed::derive(args.seed, size as u64, tau.to_bits()),
                ..TrainConfig::default()
            };
            let out = train_offline(&transitions, &tc).map_err(classify_train)?;
            let max_mean_q = out
                .metrics
                .iter()
                .map(|r| r.mean_q)
                .fold(f64::NEG_INFINITY, f64::max);
            let policy = [Policy::Bcq {
                params: &out.params,
                tau,
            }];
            let (rows, _) = evaluate(
                &cfg,
                &policy,
                &[args.budget],
                args.envs,
                args.seed,
                args.workers,
            )
            .map_err(classify_rollout)?;
            let r = &rows[0];
            let _ = writeln!(
                body,
                "{size},{tau},{},{},{},{},{max_mean_q}",
                r.budget, r.episodes, r.mean_final_trace, r.std_final_trace
            );
        }
    }
    emit_csv(
        args.out.as_deref(),
        &body,
        &format!("seed={} envs={} version={VERSION}", args.seed, args.envs),
    )
}

fn cmd_bench_time(args: &BenchArgs) -> Result<(), CliError> {
    let model = OwnedPolicy::resolve(&args.model.to_string_lossy())?;
    if matches!(model, OwnedPolicy::Planner(_)) {
        return Err(CliError::Validation(
            "--model must be a checkpoint file".into(),
        ));
    }
    let baseline = parse_planner(&args.baseline)?;
    let cfg = EnvConfig::default();
    let policies = [model.as_policy(), Policy::Planner(baseline)];
    let episodes =
        bench_timing(&cfg, &policies, args.budget, args.n, args.seed).map_err(classify_rollout)?;
    let mut body = String::from("policy,instance,steps,decision_seconds,final_trace\n");
    for e in &episodes {
        let _ = writeln!(
            body,
            "{},{},{},{},{}",
            e.policy, e.instance, e.steps, e.decision_seconds, e.final_trace
        );
    }
    let mean = |label: &str| {
        let xs: Vec<f64> = episodes
            .iter()
            .filter(|e| e.policy == label)
            .map(|e| e.decision_seconds)
            .collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    let m0 = mean(&policies[0].label());
    let m1 = mean(&policies[1].label());
    emit_csv(
        args.out.as_deref(),
        &body,
        &format!(
            "seed={} budget={} mean_model={m0} mean_baseline={m1} ratio={} version={VERSION}",
            args.seed,
            args.budget,
            m1 / m0
        ),
    )
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    let stats = dataset::dataset_stats(&args.data).map_err(CliError::validation)?;
    let manifest = dataset::read_manifest(&args.data).map_err(CliError::validation)?;
    let mut body = String::from(
        "budget,episodes,mean_final_trace,std_final_trace,mean_path_length,mean_steps\n",
    );
    for r in &stats.rows {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            r.budget_bucket,
            r.episodes,
            r.mean_final_trace,
            r.std_final_trace,
            r.mean_path_length,
            r.mean_steps
        );
    }
    emit_csv(
        args.out.as_deref(),
        &body,
        &format!(
            "episodes={} transitions={} action_entropy={} checksum={:#018x} version={VERSION} schema={}",
            stats.episodes,
            stats.transitions,
            stats.action_entropy,
            manifest.checksum,
            manifest.version
        ),
    )
}

fn run() -> Result<(), CliError> {
    check_threads_var()?;
    let cli = CliArgs::parse();
    match &cli.cmd {
        Cmd::GenDataset(args) => cmd_gen_dataset(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::BenchTime(args) => cmd_bench_time(args),
        Cmd::Stats(args) => cmd_stats(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
