//! Persisted human decisions.
//!
//! Every decision is first appended (and fsynced) to an audit log, then the
//! snapshot is replaced atomically. On open the snapshot is loaded and any
//! log entries newer than it are replayed, so a crash between the two
//! writes loses nothing and never leaves a torn snapshot.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mriq_core::io::write_atomic;
use mriq_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pick {
    pub h: usize,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub t_a: usize,
    pub t_b: usize,
    pub rater: String,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestLabel {
    pub rs: usize,
    pub pf: bool,
    pub timestamp_ms: u64,
}

/// One decision as written to the audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Pick { slice_id: String, rater: String, h: usize },
    Threshold { scan_type: String, rater: String, t_a: usize, t_b: usize },
    TestLabel { item_id: String, rater: String, rs: usize, pf: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct LogEntry {
    seq: u64,
    timestamp_ms: u64,
    #[serde(flatten)]
    decision: Decision,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    /// Sequence number of the last applied log entry.
    pub seq: u64,
    /// slice id → rater → pick.
    pub picks: BTreeMap<String, BTreeMap<String, Pick>>,
    /// Latest threshold per scan type.
    pub thresholds: BTreeMap<String, Threshold>,
    /// test item id → rater → label.
    pub test_labels: BTreeMap<String, BTreeMap<String, TestLabel>>,
}

impl StoreState {
    fn apply(&mut self, e: &LogEntry) {
        let ts = e.timestamp_ms;
        match &e.decision {
            Decision::Pick { slice_id, rater, h } => {
                self.picks
                    .entry(slice_id.clone())
                    .or_default()
                    .insert(rater.clone(), Pick { h: *h, timestamp_ms: ts });
            }
            Decision::Threshold { scan_type, rater, t_a, t_b } => {
                self.thresholds.insert(
                    scan_type.clone(),
                    Threshold { t_a: *t_a, t_b: *t_b, rater: rater.clone(), timestamp_ms: ts },
                );
            }
            Decision::TestLabel { item_id, rater, rs, pf } => {
                self.test_labels
                    .entry(item_id.clone())
                    .or_default()
                    .insert(rater.clone(), TestLabel { rs: *rs, pf: *pf, timestamp_ms: ts });
            }
        }
        self.seq = e.seq;
    }
}

#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    log_path: PathBuf,
    state: StoreState,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl LabelStore {
    /// Opens the store at `path` (snapshot) with its log at `path.log`,
    /// creating neither until the first write.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut log_name = path.file_name().unwrap_or_default().to_os_string();
        log_name.push(".log");
        let log_path = path.with_file_name(log_name);
        let mut state: StoreState = if path.exists() {
            let bytes = mriq_core::io::read(&path)?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?
        } else {
            StoreState::default()
        };
        if log_path.exists() {
            let f = fs::File::open(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    // a torn final line from a crash mid-append
                    Err(_) if is_last_line(&log_path, n) => break,
                    Err(e) => {
                        return Err(Error::Format { path: log_path.clone(), reason: format!("line {}: {e}", n + 1) })
                    }
                };
                if entry.seq > state.seq {
                    state.apply(&entry);
                }
            }
        }
        Ok(LabelStore { path, log_path, state })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    /// Appends `decision` to the log, applies it and rewrites the snapshot.
    pub fn record(&mut self, decision: Decision) -> Result<()> {
        let entry = LogEntry { seq: self.state.seq + 1, timestamp_ms: now_ms(), decision };
        let mut line = serde_json::to_string(&entry).expect("log entries serialize");
        line.push('\n');
        if let Some(dir) = self.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        }
        let io_err = |e| Error::Io { path: self.log_path.clone(), source: e };
        let mut f = OpenOptions::new().create(true).append(true).open(&self.log_path).map_err(io_err)?;
        f.write_all(line.as_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;

        self.state.apply(&entry);
        let snapshot = serde_json::to_vec_pretty(&self.state).expect("store state serializes");
        write_atomic(&self.path, &snapshot)
    }

    pub fn pick(&self, slice_id: &str, rater: &str) -> Option<usize> {
        self.state.picks.get(slice_id)?.get(rater).map(|p| p.h)
    }

    /// Latest pick for a slice from any rater.
    pub fn latest_pick(&self, slice_id: &str) -> Option<usize> {
        self.state
            .picks
            .get(slice_id)?
            .values()
            .max_by_key(|p| p.timestamp_ms)
            .map(|p| p.h)
    }

    pub fn threshold(&self, scan_type: &str) -> Option<(usize, usize)> {
        self.state.thresholds.get(scan_type).map(|t| (t.t_a, t.t_b))
    }

    pub fn test_label(&self, item_id: &str, rater: &str) -> Option<&TestLabel> {
        self.state.test_labels.get(item_id)?.get(rater)
    }

    /// Raters who have labeled at least one test item, sorted.
    pub fn test_raters(&self) -> Vec<String> {
        let mut r: Vec<String> = self
            .state
            .test_labels
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect();
        r.sort();
        r.dedup();
        r
    }
}

fn is_last_line(path: &Path, n: usize) -> bool {
    fs::read_to_string(path)
        .map(|s| s.lines().count() == n + 1)
        .unwrap_or(false)
}
