//! Per-epoch training metrics, JSONL persistence, and run summaries.
//!
//! Records deliberately contain no wall-clock data: two runs with the same
//! configuration and seed must serialize to byte-identical JSONL, which the
//! reproducibility checks compare directly. All floats are written with
//! serde_json's shortest-round-trip formatting, so equality of the numbers
//! implies equality of the bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::dynamics::SweepTable;
use crate::error::{GvqError, Result};

/// One epoch's losses and codebook-health statistics.
///
/// `perplexity` and `active_codes` measure the nearest-codeword usage
/// histogram under that epoch's effective codebook — the same deterministic
/// assignment rule every method applies at inference — so usage numbers are
/// directly comparable across methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub total: f64,
    pub link: f64,
    pub feature: f64,
    pub commit: f64,
    pub vocab: f64,
    pub ortho: f64,
    /// Contrastive regularizer value; 0 when the method does not use one.
    pub contrastive: f64,
    /// Perplexity of the hard code-usage histogram, in [1, K].
    pub perplexity: f64,
    /// Number of codewords with at least one assigned node.
    pub active_codes: usize,
    /// Epoch wall time. Never serialized: metrics files must be identical
    /// across reruns, and this is the one field that cannot be.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Serializes records as one JSON object per line.
pub fn to_jsonl_string(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| GvqError::Numeric(format!("metrics serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl_string(records)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads records back, reporting the 1-based line of the first malformed row.
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| GvqError::Format { line: idx + 1, msg: e.to_string() })?;
        records.push(rec);
    }
    Ok(records)
}

/// End-of-run digest. `best_perplexity` is the maximum over recorded epochs
/// (ties resolved to the earliest), which is the headline number the
/// experiments report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub k: usize,
    pub epochs: usize,
    pub best_perplexity: f64,
    pub best_epoch: usize,
    pub final_perplexity: f64,
    pub final_active_codes: usize,
    pub final_total: f64,
}

impl TrainSummary {
    pub fn from_records(method: Method, k: usize, records: &[MetricsRecord]) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| GvqError::Contract("summary requires at least one record".into()))?;
        let mut best = &records[0];
        for r in &records[1..] {
            if r.perplexity > best.perplexity {
                best = r;
            }
        }
        Ok(TrainSummary {
            method,
            k,
            epochs: last.epoch + 1,
            best_perplexity: best.perplexity,
            best_epoch: best.epoch,
            final_perplexity: last.perplexity,
            final_active_codes: last.active_codes,
            final_total: last.total,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| GvqError::Numeric(format!("summary serialization: {e}")))
    }
}

/// Renders a sweep as CSV with a fixed header. Correlations are not part of
/// the table; callers print them alongside.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("pca95,avg_degree,perplexity\n");
    for c in &table.cells {
        out.push_str(&format!("{},{},{}\n", c.pca95, c.avg_degree, c.perplexity));
    }
    out
}
