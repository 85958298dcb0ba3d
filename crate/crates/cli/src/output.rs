//! Output files: provenance headers, atomic writes and the long-format
//! metric table.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Config, Seeds};
use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `#`-prefixed block naming the command, its seeds, any extra facts and the
/// full resolved configuration.
pub fn provenance(command: &str, cfg: &Config, seeds: &Seeds, extra: &[(&str, String)]) -> String {
    let mut s = format!("# epifed {VERSION} {command}\n# seeds {}\n", seeds.describe());
    for (k, v) in extra {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s.push_str("# config:\n");
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            s.push_str("#\n");
        } else {
            s.push_str(&format!("#   {line}\n"));
        }
    }
    s
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", tmp.display())))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub model: String,
    pub aggregation: String,
    pub partition: String,
    pub epidemic: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub metric: String,
    pub value: f64,
}

pub fn metric_table(header: &str, rows: &[MetricRow]) -> CliResult<Vec<u8>> {
    let mut out = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        if rows.is_empty() {
            w.write_record(["scenario", "model", "aggregation", "partition", "epidemic", "M", "metric", "value"])?;
        }
        w.flush()?;
    }
    Ok(out)
}

pub fn read_metric_table<R: BufRead>(reader: R) -> CliResult<Vec<MetricRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Scenario labels are `;`-separated `key=value` pairs.
pub fn scenario_fields(scenario: &str) -> Vec<(&str, &str)> {
    scenario
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .collect()
}
