//! The informative-path-planning episode: a belief state over a roadmap, a
//! hidden ground-truth field sampled along traversed edges, rewards from
//! normalized posterior-trace reduction, and budget-safe action masking.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{self, FieldError, IntensityField};
use crate::gp::{uniform_grid, GpError, GpHyper, TrackedGp};
use crate::prm::{budget_mask, build_prm, shortest_dists, GeodesicTable, PrmError, PrmGraph};
use crate::seed;

/// Number of per-candidate features emitted by [`BeliefState::candidate_features`].
pub const N_FEATURES: usize = 10;

const RESET_STREAM: u64 = 0x7265_7365_74; // "reset"
const RESAMPLE_LIMIT: usize = 1000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Prm(#[from] PrmError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("invalid environment config: {0}")]
    BadConfig(&'static str),
    #[error("start {start} / dest {dest} infeasible for budget {budget}")]
    InfeasiblePair { start: usize, dest: usize, budget: f64 },
    #[error("no feasible start/destination pair after {attempts} resamples")]
    Infeasible { attempts: usize },
    #[error("action {action} out of range ({n_candidates} candidates)")]
    BadAction { action: usize, n_candidates: usize },
    #[error("action {action} fails the budget mask")]
    MaskedAction { action: usize },
    #[error("episode already finished")]
    EpisodeOver,
}

/// Environment parameters. Defaults match the benchmark configuration:
/// 400-node roadmap with 20-NN edges, measurements every 0.2 units, training
/// budgets drawn from [6, 8], evaluation budgets {6, 8, 10}, a 256-step cap,
/// and a 30×30 uncertainty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_nodes: usize,
    pub k: usize,
    pub measure_spacing: f64,
    pub budget_range: (f64, f64),
    pub eval_budgets: Vec<f64>,
    pub max_steps: usize,
    /// Terminal penalty coefficient: r_d = −alpha · Tr(P) at episode end.
    pub alpha: f64,
    /// Side length of the uncertainty grid (grid has trace_grid² points).
    pub trace_grid: usize,
    pub gp: GpHyper,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_nodes: 400,
            k: 20,
            measure_spacing: 0.2,
            budget_range: (6.0, 8.0),
            eval_budgets: vec![6.0, 8.0, 10.0],
            max_steps: 256,
            alpha: 0.1,
            trace_grid: 30,
            gp: GpHyper::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_nodes < self.k + 1 {
            return Err(EnvError::BadConfig("n_nodes must exceed k"));
        }
        if !(self.measure_spacing > 0.0) {
            return Err(EnvError::BadConfig("measure_spacing must be positive"));
        }
        if !(self.budget_range.0 > 0.0) || self.budget_range.1 < self.budget_range.0 {
            return Err(EnvError::BadConfig("budget_range must be positive and ordered"));
        }
        if self.max_steps == 0 {
            return Err(EnvError::BadConfig("max_steps must be at least 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(EnvError::BadConfig("alpha must be non-negative"));
        }
        if self.trace_grid == 0 {
            return Err(EnvError::BadConfig("trace_grid must be at least 1"));
        }
        self.gp.validate()?;
        Ok(())
    }
}

/// Everything the agent (and any planner) is allowed to see: the roadmap,
/// geodesics to the destination, the GP belief, and the planning counters.
/// The ground-truth field lives in [`Environment`], not here.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub graph: PrmGraph,
    pub geo: GeodesicTable,
    gp: TrackedGp,
    grid_len: usize,
    pub prior_trace: f64,
    pub current: usize,
    pub dest: usize,
    pub remaining_budget: f64,
    pub step_count: usize,
    pub history: Vec<usize>,
}

impl BeliefState {
    pub fn gp(&self) -> &TrackedGp {
        &self.gp
    }

    /// Probe indices of the uncertainty grid within the tracked GP.
    pub fn grid_range(&self) -> Range<usize> {
        0..self.grid_len
    }

    /// Probe index of roadmap node `j` within the tracked GP.
    pub fn node_probe(&self, j: usize) -> usize {
        self.grid_len + j
    }

    pub fn node_mean(&self, j: usize) -> f64 {
        self.gp.mean_at(self.node_probe(j))
    }

    pub fn node_var(&self, j: usize) -> f64 {
        self.gp.var_at(self.node_probe(j))
    }

    /// Tr(P) over the uncertainty grid under the current belief.
    pub fn trace_now(&self) -> f64 {
        self.gp.trace_over(self.grid_range())
    }

    /// Candidate nodes: the neighbors of the current node, in index order.
    pub fn candidates(&self) -> &[usize] {
        &self.graph.neighbors[self.current]
    }

    /// Budget-feasibility mask over [`Self::candidates`].
    pub fn mask(&self) -> Vec<bool> {
        budget_mask(&self.graph, &self.geo, self.current, self.remaining_budget)
            .expect("mask invariant: remaining budget covers the geodesic")
    }

    /// Per-candidate feature rows and the feasibility mask. Row layout:
    /// `[x_j, y_j, mean_j, var_j, edge_len, geodesic_j, remaining_budget,
    ///   mean_cur, var_cur, trace_now/prior_trace]`.
    pub fn candidate_features(&self) -> (Vec<[f64; N_FEATURES]>, Vec<bool>) {
        let cur = self.current;
        let mean_cur = self.node_mean(cur);
        let var_cur = self.node_var(cur);
        let trace_ratio = self.trace_now() / self.prior_trace;
        let rows = self
            .graph
            .neighbors[cur]
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                let pos = self.graph.positions[j];
                [
                    pos[0],
                    pos[1],
                    self.node_mean(j),
                    self.node_var(j),
                    self.graph.lengths[cur][slot],
                    self.geo.dist[j],
                    self.remaining_budget,
                    mean_cur,
                    var_cur,
                    trace_ratio,
                ]
            })
            .collect();
        (rows, self.mask())
    }
}

/// One logged step: candidate features and mask for the state, the chosen
/// candidate slot, the reward, and the successor's features and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state_features: Vec<[f64; N_FEATURES]>,
    pub state_mask: Vec<bool>,
    pub action: usize,
    pub reward: f64,
    pub next_features: Vec<[f64; N_FEATURES]>,
    pub next_mask: Vec<bool>,
    pub done: bool,
}

/// The full environment: belief state plus the hidden ground-truth field.
/// Only [`Environment::step`] reads the field.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    field: IntensityField,
    state: BeliefState,
    pub initial_budget: f64,
    path_len: f64,
    done: bool,
}

/// Measurement locations along the segment a→b: one every `spacing` units of
/// arc length measured from a (the start itself is not re-measured), plus the
/// endpoint b. A length-L edge yields ⌈L/spacing⌉ measurements.
pub fn edge_measurements(a: [f64; 2], b: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len = (dx * dx + dy * dy).sqrt();
    let n_meas = (len / spacing).ceil().max(1.0) as usize;
    let mut pts = Vec::with_capacity(n_meas);
    for i in 1..n_meas {
        let t = (i as f64 * spacing) / len;
        pts.push([a[0] + t * dx, a[1] + t * dy]);
    }
    pts.push(b);
    pts
}

impl Environment {
    /// Builds a fresh episode: field and roadmap from their seeds, start and
    /// destination either as given or resampled (up to 1000 attempts) until
    /// `geo.dist[start] <= budget` and `start != dest`, then one initial
    /// observation at the start node.
    pub fn reset(
        cfg: &EnvConfig,
        field_seed: u64,
        graph_seed: u64,
        budget: f64,
        start: Option<usize>,
        dest: Option<usize>,
    ) -> Result<Environment, EnvError> {
        cfg.validate()?;
        let field = field::make_field(field_seed);
        let graph = build_prm(graph_seed, cfg.n_nodes, cfg.k)?;
        let mut rng = seed::rng(graph_seed, field_seed, RESET_STREAM);
        let fixed_geo = match dest {
            Some(d) => Some(shortest_dists(&graph, d)?),
            None => None,
        };
        use rand::Rng;
        for _ in 0..RESAMPLE_LIMIT {
            let s = match start {
                Some(s) => s,
                None => rng.gen_range(0..cfg.n_nodes),
            };
            let d = match dest {
                Some(d) => d,
                None => rng.gen_range(0..cfg.n_nodes),
            };
            if s == d || s >= cfg.n_nodes || d >= cfg.n_nodes {
                if start.is_some() && dest.is_some() {
                    return Err(EnvError::InfeasiblePair { start: s, dest: d, budget });
                }
                continue;
            }
            let geo = match &fixed_geo {
                Some(g) => g.clone(),
                None => shortest_dists(&graph, d)?,
            };
            if geo.dist[s] <= budget {
                return Environment::assemble(cfg.clone(), field, graph, geo, s, budget);
            }
            if start.is_some() && dest.is_some() {
                return Err(EnvError::InfeasiblePair { start: s, dest: d, budget });
            }
        }
        Err(EnvError::Infeasible {
            attempts: RESAMPLE_LIMIT,
        })
    }

    /// Builds an episode from explicit parts (e.g. a hand-built graph in
    /// tests). Start/destination must be feasible; no resampling happens.
    pub fn from_parts(
        cfg: EnvConfig,
        field: IntensityField,
        graph: PrmGraph,
        start: usize,
        dest: usize,
        budget: f64,
    ) -> Result<Environment, EnvError> {
        cfg.validate()?;
        let geo = shortest_dists(&graph, dest)?;
        if start == dest || start >= graph.n_nodes() || geo.dist[start] > budget {
            return Err(EnvError::InfeasiblePair { start, dest, budget });
        }
        Environment::assemble(cfg, field, graph, geo, start, budget)
    }

    fn assemble(
        cfg: EnvConfig,
        field: IntensityField,
        graph: PrmGraph,
        geo: GeodesicTable,
        start: usize,
        budget: f64,
    ) -> Result<Environment, EnvError> {
        let mut probes = uniform_grid(cfg.trace_grid);
        let grid_len = probes.len();
        probes.extend(graph.positions.iter().copied());
        let mut gp = TrackedGp::new(cfg.gp, probes)?;
        let p0 = graph.positions[start];
        gp.observe(p0, field::sample_field(&field, p0)?)?;
        let prior_trace = grid_len as f64 * cfg.gp.signal_var;
        let dest = geo.dest;
        Ok(Environment {
            cfg,
            field,
            state: BeliefState {
                graph,
                geo,
                gp,
                grid_len,
                prior_trace,
                current: start,
                dest,
                remaining_budget: budget,
                step_count: 0,
                history: vec![start],
            },
            initial_budget: budget,
            path_len: 0.0,
            done: false,
        })
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &BeliefState {
        &self.state
    }

    /// Total edge length traversed so far (never exceeds the initial budget).
    pub fn path_len(&self) -> f64 {
        self.path_len
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Traverses the chosen candidate edge, measuring the field along it and
    /// updating the belief. Returns (reward, done): the reward is the
    /// normalized trace reduction, plus −alpha·Tr(P) when the episode ends
    /// (destination reached or step cap hit).
    pub fn step(&mut self, action: usize) -> Result<(f64, bool), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let n_candidates = self.state.candidates().len();
        if action >= n_candidates {
            return Err(EnvError::BadAction { action, n_candidates });
        }
        let mask = budget_mask(
            &self.state.graph,
            &self.state.geo,
            self.state.current,
            self.state.remaining_budget,
        )?;
        if !mask[action] {
            return Err(EnvError::MaskedAction { action });
        }
        let j = self.state.graph.neighbors[self.state.current][action];
        let len = self.state.graph.lengths[self.state.current][action];
        let a = self.state.graph.positions[self.state.current];
        let b = self.state.graph.positions[j];

        let trace_before = self.state.trace_now();
        for p in edge_measurements(a, b, self.cfg.measure_spacing) {
            let y = field::sample_field(&self.field, p)?;
            self.state.gp.observe(p, y)?;
        }
        self.state.remaining_budget -= len;
        self.path_len += len;
        self.state.current = j;
        self.state.history.push(j);
        self.state.step_count += 1;

        let trace_after = self.state.trace_now();
        let mut reward = if trace_before > 0.0 {
            (trace_before - trace_after) / trace_before
        } else {
            0.0
        };
        let done = self.state.current == self.state.dest
            || self.state.step_count >= self.cfg.max_steps;
        if done {
            reward -= self.cfg.alpha * trace_after;
            self.done = true;
        }
        Ok((reward, done))
    }
}
