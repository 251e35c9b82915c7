//! Result persistence: an append-only JSON-lines record store plus a flat
//! CSV of rate-relevance points for plotting.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Joint predictor cross-entropy over the evaluation set, nats.
    pub cross_entropy: f64,
    pub avg_bits: f64,
    pub avg_rounds: f64,
    pub latency_secs: f64,
    /// Estimated relevance, bits.
    pub delta_bits: f64,
    /// Estimated sum rate, bits.
    pub rate_bits: f64,
}

/// One evaluated configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub family: String,
    pub beta: f64,
    pub t_max: usize,
    pub delta0: f64,
    pub budget_bits: u64,
    pub status: String,
    pub metrics: Option<Metrics>,
    pub created_unix: u64,
}

impl ExperimentRecord {
    pub fn run_id_for(config_hash: &str, ordinal: usize) -> String {
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        format!("{}-{ordinal}-{nanos:x}", &config_hash[..12.min(config_hash.len())])
    }

    pub fn now_unix() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

/// Append records to `records.jsonl`, one JSON object per line. Each line
/// is written with a single call so concurrent appenders from separate
/// processes cannot interleave partial lines.
pub fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Write the plotting CSV: one row per successful record.
pub fn write_rate_relevance_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("avg_bits,accuracy,delta_bits,rate_bits,beta,T,delta0,seed\n");
    for r in records {
        if let Some(m) = &r.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.avg_bits, m.accuracy, m.delta_bits, m.rate_bits, r.beta, r.t_max, r.delta0, r.seed
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn record(ordinal: usize) -> ExperimentRecord {
        ExperimentRecord {
            run_id: ExperimentRecord::run_id_for("abcdef0123456789", ordinal),
            seed: 7,
            config_hash: "abcdef0123456789".into(),
            family: "vddib".into(),
            beta: 0.01,
            t_max: 1,
            delta0: 1.01,
            budget_bits: 10,
            status: "ok".into(),
            metrics: Some(Metrics {
                accuracy: 0.9,
                cross_entropy: 0.3,
                avg_bits: 10.0,
                avg_rounds: 1.0,
                latency_secs: 10.0 / 144_000.0,
                delta_bits: 2.5,
                rate_bits: 4.0,
            }),
            created_unix: ExperimentRecord::now_unix(),
        }
    }

    #[test]
    fn append_is_cumulative() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        append_records(&path, &[record(0)]).unwrap();
        append_records(&path, &[record(1), record(2)]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].seed, 7);
    }

    #[test]
    fn duplicate_config_gets_distinct_run_ids() {
        let a = record(0);
        let b = record(1);
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.run_id, b.run_id);
    }

    #[test]
    fn csv_has_expected_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rate_relevance.csv");
        write_rate_relevance_csv(&path, &[record(0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("avg_bits,accuracy,delta_bits,rate_bits,beta,T,delta0,seed\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
