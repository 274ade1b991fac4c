//! Result records and their CSV/JSON serialisation.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One table of results plus what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub metric: String,
    pub config_hash: String,
    pub env_hash: String,
    pub provenance: String,
    pub created_unix: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn provenance() -> String {
    format!("swimrl {} ({})", env!("CARGO_PKG_VERSION"), env!("SWIMRL_GIT_DESCRIBE"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ResultRecord {
    pub fn new(experiment: &str, metric: &str, config_hash: &str, env_hash: &str, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            metric: metric.to_string(),
            config_hash: config_hash.to_string(),
            env_hash: env_hash.to_string(),
            provenance: provenance(),
            created_unix: unix_now(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// `x` rounded to 12 significant digits, in plain decimal notation.
pub fn format_sig12(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("valid float");
    rounded.to_string()
}

/// Writes the header and rows as RFC 4180 CSV. Timestamps and hashes stay
/// out of the CSV so identical runs give identical files.
pub fn export_csv(record: &ResultRecord, path: &Path) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::io(path, e);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(&record.columns).map_err(|e| io(e.into()))?;
    for row in &record.rows {
        w.write_record(row.iter().map(|&x| format_sig12(x))).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let io = |e: std::io::Error| CliError::io(path, e);
    let mut r = csv::Reader::from_path(path).map_err(|e| io(e.into()))?;
    let header = r.headers().map_err(|e| io(e.into()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io(e.into()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| CliError::Refused(format!("{}: bad number {f:?}: {e}", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
