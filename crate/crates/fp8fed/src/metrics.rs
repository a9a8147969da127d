//! Per-round bookkeeping: communication bytes, evaluation metrics, the
//! bytes-to-accuracy gain computation, and run persistence.
//!
//! The ledger is append-only with strictly increasing round indices.
//! Communication gain compares a baseline run against a compressed run:
//! accuracy curves are smoothed by a trailing window, the threshold is the
//! lower of the two smoothed maxima, and the gain is the ratio of
//! cumulative bytes at the first threshold crossing.

use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("round {got} recorded after round {last}; rounds must increase")]
    OutOfOrder { last: usize, got: usize },
    #[error("{which} ledger is empty")]
    Empty { which: String },
    #[error("{which} run never reaches threshold accuracy {threshold:.4} (best smoothed {best:.4} at round {best_round})")]
    NotReached { which: String, threshold: f64, best: f64, best_round: usize },
    #[error("{which} run has a non-finite accuracy at round {round}")]
    NonFinite { which: String, round: usize },
    #[error("failed writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed metrics CSV at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
}

/// Column layout shared by [`RoundLedger::to_csv`] and
/// [`RoundLedger::from_csv`].
pub const CSV_HEADER: &str = "round,uplink_bytes,downlink_bytes,cum_bytes,eval_acc,eval_loss,wall_ms";

/// One completed round, as recorded by the orchestrator.
///
/// `wall_ms` is informational only; deterministic outputs write it as zero
/// and real timings go to the run summary instead.
#[derive(Clone, Copy, Debug)]
pub struct RoundEntry {
    pub round: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub eval_acc: f64,
    pub eval_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RoundLedger {
    entries: Vec<RoundEntry>,
    cum_bytes: Vec<u64>,
}

/// Trailing-window width used to smooth accuracy curves before
/// threshold detection.
pub const GAIN_SMOOTHING_WINDOW: usize = 5;

impl RoundLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_round(&mut self, entry: RoundEntry) -> Result<(), MetricsError> {
        if let Some(last) = self.entries.last() {
            if entry.round <= last.round {
                return Err(MetricsError::OutOfOrder { last: last.round, got: entry.round });
            }
        }
        let prev = self.cum_bytes.last().copied().unwrap_or(0);
        self.cum_bytes.push(prev + entry.uplink_bytes + entry.downlink_bytes);
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RoundEntry] {
        &self.entries
    }

    pub fn cum_bytes(&self) -> &[u64] {
        &self.cum_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.cum_bytes.last().copied().unwrap_or(0)
    }

    pub fn final_acc(&self) -> Option<f64> {
        self.entries.last().map(|e| e.eval_acc)
    }

    /// Trailing mean of the accuracy column: position `i` averages the last
    /// `min(window, i+1)` raw values.
    pub fn smoothed_acc(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.entries.len());
        let mut running = 0.0;
        for i in 0..self.entries.len() {
            running += self.entries[i].eval_acc;
            if i >= w {
                running -= self.entries[i - w].eval_acc;
            }
            out.push(running / (i.min(w - 1) + 1) as f64);
        }
        out
    }

    /// Parse a ledger previously rendered by [`RoundLedger::to_csv`]. The
    /// stored cumulative column is recomputed and must agree.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            other => {
                return Err(MetricsError::BadCsv {
                    line: 1,
                    reason: format!(
                        "expected header {CSV_HEADER:?}, got {:?}",
                        other.map(|(_, h)| h).unwrap_or("<empty>")
                    ),
                });
            }
        }
        let mut ledger = Self::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(MetricsError::BadCsv {
                    line: lineno,
                    reason: format!("expected 7 columns, got {}", cells.len()),
                });
            }
            let field = |i: usize, what: &str| -> Result<f64, MetricsError> {
                cells[i].parse::<f64>().map_err(|_| MetricsError::BadCsv {
                    line: lineno,
                    reason: format!("bad {what} value {:?}", cells[i]),
                })
            };
            let int = |i: usize, what: &str| -> Result<u64, MetricsError> {
                cells[i].parse::<u64>().map_err(|_| MetricsError::BadCsv {
                    line: lineno,
                    reason: format!("bad {what} value {:?}", cells[i]),
                })
            };
            let entry = RoundEntry {
                round: int(0, "round")? as usize,
                uplink_bytes: int(1, "uplink_bytes")?,
                downlink_bytes: int(2, "downlink_bytes")?,
                eval_acc: field(4, "eval_acc")?,
                eval_loss: field(5, "eval_loss")?,
                wall_ms: int(6, "wall_ms")?,
            };
            let stored_cum = int(3, "cum_bytes")?;
            ledger.record_round(entry)?;
            let recomputed = ledger.total_bytes();
            if recomputed != stored_cum {
                return Err(MetricsError::BadCsv {
                    line: lineno,
                    reason: format!("cumulative bytes {stored_cum} disagree with {recomputed}"),
                });
            }
        }
        Ok(ledger)
    }

    /// Render the ledger in the documented column layout.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (e, &cum) in self.entries.iter().zip(&self.cum_bytes) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.round, e.uplink_bytes, e.downlink_bytes, cum, e.eval_acc, e.eval_loss, e.wall_ms
            ));
        }
        s
    }
}

/// Outcome of the bytes-to-accuracy comparison of two runs.
#[derive(Clone, Debug)]
pub struct GainReport {
    pub threshold: f64,
    pub window: usize,
    pub base_round: usize,
    pub test_round: usize,
    pub base_bytes: u64,
    pub test_bytes: u64,
    pub gain: f64,
}

impl GainReport {
    pub fn summary_lines(&self) -> Vec<(String, String)> {
        vec![
            ("gain_threshold_acc".into(), format!("{}", self.threshold)),
            ("gain_smoothing_window".into(), format!("{}", self.window)),
            ("gain_base_round".into(), format!("{}", self.base_round)),
            ("gain_test_round".into(), format!("{}", self.test_round)),
            ("gain_base_bytes".into(), format!("{}", self.base_bytes)),
            ("gain_test_bytes".into(), format!("{}", self.test_bytes)),
            ("gain".into(), format!("{}", self.gain)),
        ]
    }
}

fn smoothed_or_err(
    ledger: &RoundLedger,
    which: &str,
    window: usize,
) -> Result<Vec<f64>, MetricsError> {
    if ledger.is_empty() {
        return Err(MetricsError::Empty { which: which.into() });
    }
    let sm = ledger.smoothed_acc(window);
    if let Some(i) = sm.iter().position(|a| !a.is_finite()) {
        return Err(MetricsError::NonFinite { which: which.into(), round: ledger.entries[i].round });
    }
    Ok(sm)
}

fn first_crossing(
    ledger: &RoundLedger,
    smoothed: &[f64],
    which: &str,
    threshold: f64,
) -> Result<(usize, u64), MetricsError> {
    match smoothed.iter().position(|&a| a >= threshold) {
        Some(i) => Ok((ledger.entries[i].round, ledger.cum_bytes[i])),
        None => {
            let (bi, &best) = smoothed
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .expect("non-empty");
            Err(MetricsError::NotReached {
                which: which.into(),
                threshold,
                best,
                best_round: ledger.entries[bi].round,
            })
        }
    }
}

/// Gain of `test` over `base`: ratio of cumulative bytes needed to first
/// reach the shared threshold (the lower of the two smoothed maxima).
pub fn compute_gain(base: &RoundLedger, test: &RoundLedger) -> Result<GainReport, MetricsError> {
    compute_gain_with_window(base, test, GAIN_SMOOTHING_WINDOW)
}

pub fn compute_gain_with_window(
    base: &RoundLedger,
    test: &RoundLedger,
    window: usize,
) -> Result<GainReport, MetricsError> {
    let sm_base = smoothed_or_err(base, "base", window)?;
    let sm_test = smoothed_or_err(test, "test", window)?;
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max(&sm_base).min(max(&sm_test));
    let (base_round, base_bytes) = first_crossing(base, &sm_base, "base", threshold)?;
    let (test_round, test_bytes) = first_crossing(test, &sm_test, "test", threshold)?;
    let gain = base_bytes as f64 / test_bytes as f64;
    Ok(GainReport { threshold, window, base_round, test_round, base_bytes, test_bytes, gain })
}

fn write_file(path: &Path, content: &str) -> Result<(), MetricsError> {
    let io_err = |source| MetricsError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(content.as_bytes()).map_err(io_err)
}

/// Write all artifacts of one run under `out_dir`: the configuration
/// snapshot, one CSV per ledger, and a `summary.txt` of key/value lines.
/// Returns the created paths.
pub fn persist_run(
    out_dir: &Path,
    config_text: &str,
    ledgers: &[(&str, &RoundLedger)],
    summary: &[(String, String)],
) -> Result<Vec<PathBuf>, MetricsError> {
    std::fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let config_path = out_dir.join("config.toml");
    write_file(&config_path, config_text)?;
    written.push(config_path);
    for (name, ledger) in ledgers {
        let path = out_dir.join(format!("{name}.csv"));
        write_file(&path, &ledger.to_csv())?;
        written.push(path);
    }
    let mut text = String::new();
    for (k, v) in summary {
        text.push_str(&format!("{k}: {v}\n"));
    }
    let summary_path = out_dir.join("summary.txt");
    write_file(&summary_path, &text)?;
    written.push(summary_path);
    Ok(written)
}
