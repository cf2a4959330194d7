//! Durable episode storage: line-delimited JSON records (one episode per
//! line, floats printed with 17 significant digits so they round-trip
//! bit-exactly) plus a manifest carrying counts, the schema version, and a
//! content checksum. Writes are atomic; reads stream and validate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::Checksum;
use crate::episode::Transition;
use crate::planners::PlannerKind;

/// Schema version written into every manifest and record.
pub const SCHEMA_VERSION: &str = "offripp-ds/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("record {index} invalid: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("{path}: line {line}: {reason}")]
    BadLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: content checksum {actual:#018x} does not match manifest {expected:#018x} (file truncated or corrupted)")]
    ChecksumMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("unsupported schema version {found:?} (this build reads {SCHEMA_VERSION:?})")]
    BadVersion { found: String },
    #[error("manifest inconsistent: {0}")]
    BadManifest(String),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Provenance of one episode: everything needed to regenerate its
/// environment plus the planner that produced the actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub field_seed: u64,
    pub graph_seed: u64,
    pub budget: f64,
    pub start: usize,
    pub dest: usize,
    /// Planner kind and parameters in display form (e.g. "mixture:0.4").
    pub planner: String,
    pub format_version: String,
}

impl EpisodeMeta {
    pub fn planner_kind(&self) -> Result<PlannerKind, String> {
        self.planner.parse()
    }
}

/// Episode-level outcomes, denormalized for cheap stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub final_trace: f64,
    pub path_length: f64,
    pub step_count: usize,
}

/// One dataset entry: provenance, the transition sequence, and outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    pub steps: Vec<Transition>,
    pub summary: EpisodeSummary,
}

impl EpisodeRecord {
    /// Structural invariants every stored record must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        if self.meta.format_version != SCHEMA_VERSION {
            return Err(format!(
                "format_version {:?} != {SCHEMA_VERSION:?}",
                self.meta.format_version
            ));
        }
        if self.steps.is_empty() {
            return Err("episode has no steps".into());
        }
        let done_count = self.steps.iter().filter(|t| t.done).count();
        if done_count != 1 || !self.steps.last().unwrap().done {
            return Err(format!(
                "episode must end with its single done=true step (found {done_count} done flags)"
            ));
        }
        for (i, t) in self.steps.iter().enumerate() {
            if t.state_features.is_empty() || t.state_features.len() != t.state_mask.len() {
                return Err(format!("step {i}: state candidate/mask shape mismatch"));
            }
            if t.next_features.is_empty() || t.next_features.len() != t.next_mask.len() {
                return Err(format!("step {i}: next candidate/mask shape mismatch"));
            }
            if t.action >= t.state_features.len() {
                return Err(format!(
                    "step {i}: action {} out of range for {} candidates",
                    t.action,
                    t.state_features.len()
                ));
            }
            if !t.state_mask[t.action] {
                return Err(format!("step {i}: action {} fails its mask", t.action));
            }
            if !t.reward.is_finite() {
                return Err(format!("step {i}: non-finite reward {}", t.reward));
            }
            let finite = |rows: &[[f64; crate::episode::N_FEATURES]]| {
                rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
            };
            if !finite(&t.state_features) || !finite(&t.next_features) {
                return Err(format!("step {i}: non-finite feature value"));
            }
        }
        if self.summary.step_count != self.steps.len() {
            return Err(format!(
                "summary step_count {} != {} stored steps",
                self.summary.step_count,
                self.steps.len()
            ));
        }
        if !self.summary.final_trace.is_finite() || !self.summary.path_length.is_finite() {
            return Err("non-finite summary value".into());
        }
        if self.summary.path_length < 0.0 {
            return Err("negative path length".into());
        }
        Ok(())
    }
}

/// Sidecar file describing a dataset: counts, planner mix, schema version,
/// and the checksum of the record file's exact bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub episodes: u64,
    pub total_transitions: u64,
    /// Episode count per planner display string.
    pub planner_mix: BTreeMap<String, u64>,
    pub checksum: u64,
}

/// JSON serializer whose floats carry 17 significant digits — enough that
/// parsing the decimal form recovers the original f64 bit pattern.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        debug_assert!(value.is_finite(), "non-finite float reached serialization");
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

fn record_to_line(record: &EpisodeRecord) -> Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    record
        .serialize(&mut ser)
        .map_err(|e| format!("serialization failed: {e}"))?;
    buf.push(b'\n');
    Ok(buf)
}

/// Path of the manifest belonging to a `.ds` file.
pub fn manifest_path(ds_path: &Path) -> PathBuf {
    ds_path.with_extension("manifest")
}

/// Writes `<name>.tmp` then renames onto `path`, so readers never observe a
/// half-written file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Validates and writes records to `path` (one per line) with the manifest
/// alongside. Both writes are atomic. Returns the manifest.
pub fn write_dataset(
    records: &[EpisodeRecord],
    path: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let mut body = Vec::new();
    let mut ck = Checksum::new();
    let mut total_transitions = 0u64;
    let mut planner_mix = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        record
            .validate()
            .map_err(|reason| DatasetError::BadRecord { index, reason })?;
        let line = record_to_line(record).map_err(|reason| DatasetError::BadRecord { index, reason })?;
        ck.update(&line);
        body.extend_from_slice(&line);
        total_transitions += record.steps.len() as u64;
        *planner_mix.entry(record.meta.planner.clone()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        version: SCHEMA_VERSION.to_string(),
        episodes: records.len() as u64,
        total_transitions,
        planner_mix,
        checksum: ck.finish(),
    };
    atomic_write(path, &body)?;
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    atomic_write(&manifest_path(path), format!("{manifest_json}\n").as_bytes())?;
    Ok(manifest)
}

/// Reads and validates a manifest file.
pub fn read_manifest(ds_path: &Path) -> Result<DatasetManifest, DatasetError> {
    let mpath = manifest_path(ds_path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::BadManifest(format!("{}: {e}", mpath.display())))?;
    if manifest.version != SCHEMA_VERSION {
        return Err(DatasetError::BadVersion {
            found: manifest.version,
        });
    }
    let mix_total: u64 = manifest.planner_mix.values().sum();
    if mix_total != manifest.episodes {
        return Err(DatasetError::BadManifest(format!(
            "planner mix sums to {mix_total} but manifest declares {} episodes",
            manifest.episodes
        )));
    }
    Ok(manifest)
}

/// Streaming dataset reader: yields one validated record at a time while
/// hashing the bytes it consumes; after the last record it checks the
/// checksum and episode count against the manifest. Memory stays bounded by
/// the largest single record.
pub struct DatasetReader {
    path: PathBuf,
    reader: BufReader<File>,
    manifest: DatasetManifest,
    hasher: Option<Checksum>,
    line_no: usize,
    yielded: u64,
    finished: bool,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let manifest = read_manifest(path)?;
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        Ok(DatasetReader {
            path: path.to_path_buf(),
            reader: BufReader::new(file),
            manifest,
            hasher: Some(Checksum::new()),
            line_no: 0,
            yielded: 0,
            finished: false,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn bad_line(&self, reason: String) -> DatasetError {
        DatasetError::BadLine {
            path: self.path.clone(),
            line: self.line_no,
            reason,
        }
    }

    /// End-of-stream validation: checksum and count must match the manifest.
    fn finish(&mut self) -> Result<(), DatasetError> {
        let actual = self.hasher.take().expect("finish runs once").finish();
        if actual != self.manifest.checksum {
            return Err(DatasetError::ChecksumMismatch {
                path: self.path.clone(),
                expected: self.manifest.checksum,
                actual,
            });
        }
        if self.yielded != self.manifest.episodes {
            return Err(DatasetError::BadManifest(format!(
                "file holds {} episodes but manifest declares {}",
                self.yielded, self.manifest.episodes
            )));
        }
        Ok(())
    }
}

impl Iterator for DatasetReader {
    type Item = Result<EpisodeRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Err(e) => {
                self.finished = true;
                Some(Err(io_err(&self.path, e)))
            }
            Ok(0) => {
                self.finished = true;
                match self.finish() {
                    Ok(()) => None,
                    Err(e) => Some(Err(e)),
                }
            }
            Ok(_) => {
                self.line_no += 1;
                if let Some(h) = self.hasher.as_mut() {
                    h.update(line.as_bytes());
                }
                let record: EpisodeRecord = match serde_json::from_str(line.trim_end()) {
                    Ok(r) => r,
                    Err(e) => {
                        self.finished = true;
                        return Some(Err(self.bad_line(format!("parse error: {e}"))));
                    }
                };
                if let Err(reason) = record.validate() {
                    self.finished = true;
                    return Some(Err(self.bad_line(reason)));
                }
                self.yielded += 1;
                Some(Ok(record))
            }
        }
    }
}

/// Loads a whole dataset with full validation.
pub fn read_dataset(path: &Path) -> Result<(Vec<EpisodeRecord>, DatasetManifest), DatasetError> {
    let reader = DatasetReader::open(path)?;
    let manifest = reader.manifest().clone();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((records, manifest))
}

/// Per-budget outcome row (budgets bucketed to the nearest integer so that
/// randomized budgets still aggregate into readable groups).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub budget_bucket: i64,
    pub episodes: u64,
    pub mean_final_trace: f64,
    pub std_final_trace: f64,
    pub mean_path_length: f64,
    pub mean_steps: f64,
}

/// Aggregate dataset summary — the "behavior policy" row for any dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub episodes: u64,
    pub transitions: u64,
    pub rows: Vec<BudgetRow>,
    /// Empirical entropy (nats) of the chosen candidate-index distribution,
    /// pooled over all steps — a crude action-diversity measure.
    pub action_entropy: f64,
}

#[derive(Default)]
struct Accum {
    n: u64,
    trace_sum: f64,
    trace_sq: f64,
    path_sum: f64,
    steps_sum: f64,
}

/// Streams a dataset and aggregates outcome statistics. Uses population
/// standard deviation, so a single-episode group reports std 0.
pub fn dataset_stats(path: &Path) -> Result<DatasetStats, DatasetError> {
    let reader = DatasetReader::open(path)?;
    let mut groups: BTreeMap<i64, Accum> = BTreeMap::new();
    let mut action_counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut episodes = 0u64;
    let mut transitions = 0u64;
    for record in reader {
        let record = record?;
        episodes += 1;
        transitions += record.steps.len() as u64;
        let g = groups.entry(record.meta.budget.round() as i64).or_default();
        g.n += 1;
        g.trace_sum += record.summary.final_trace;
        g.trace_sq += record.summary.final_trace * record.summary.final_trace;
        g.path_sum += record.summary.path_length;
        g.steps_sum += record.summary.step_count as f64;
        for t in &record.steps {
            *action_counts.entry(t.action).or_insert(0) += 1;
        }
    }
    let rows = groups
        .into_iter()
        .map(|(bucket, a)| {
            let n = a.n as f64;
            let mean = a.trace_sum / n;
            let var = (a.trace_sq / n - mean * mean).max(0.0);
            BudgetRow {
                budget_bucket: bucket,
                episodes: a.n,
                mean_final_trace: mean,
                std_final_trace: var.sqrt(),
                mean_path_length: a.path_sum / n,
                mean_steps: a.steps_sum / n,
            }
        })
        .collect();
    let total_actions: u64 = action_counts.values().sum();
    let action_entropy = if total_actions == 0 {
        0.0
    } else {
        -action_counts
            .values()
            .map(|&c| {
                let p = c as f64 / total_actions as f64;
                p * p.ln()
            })
            .sum::<f64>()
    };
    Ok(DatasetStats {
        episodes,
        transitions,
        rows,
        action_entropy,
    })
}

/// Human-readable rendering of [`DatasetStats`] (used by the CLI).
pub fn format_stats(stats: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "episodes={} transitions={} action_entropy={:.4}",
        stats.episodes, stats.transitions, stats.action_entropy
    );
    let _ = writeln!(
        out,
        "budget,episodes,mean_final_trace,std_final_trace,mean_path_length,mean_steps"
    );
    for r in &stats.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.2}",
            r.budget_bucket,
            r.episodes,
            r.mean_final_trace,
            r.std_final_trace,
            r.mean_path_length,
            r.mean_steps
        );
    }
    out
}

/// Flattens records into the transition list the trainer consumes.
pub fn flatten_transitions(records: &[EpisodeRecord]) -> Vec<Transition> {
    records.iter().flat_map(|r| r.steps.iter().cloned()).collect()
}
