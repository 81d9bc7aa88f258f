//! JSON artifacts. Every report is pretty-printed with a fixed field order
//! and `BTreeMap` keys, so equal inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::MergeInstance;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const TRACE_FILE: &str = "trace.json";
pub const MERGE_REPORT_FILE: &str = "merge_report.json";
pub const PROBE_REPORT_FILE: &str = "probe_report.json";
pub const SCORECARD_FILE: &str = "scorecard.json";
pub const CONTINUAL_FILE: &str = "continual_matrix.json";
pub const BENCH_REPORT_FILE: &str = "report.json";

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Write `value` to `path`, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// MergeFail of one rule and subset size, with its bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeFailSummary {
    pub rule: String,
    pub t: usize,
    pub tau: f64,
    pub merge_fail: f64,
    pub ci: (f64, f64),
    pub replicates: usize,
}

/// Contents of `merge_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub cache_fingerprint: String,
    /// Instances per sampling seed.
    pub instances: BTreeMap<u64, Vec<MergeInstance>>,
    pub summaries: Vec<MergeFailSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/x.json");
        let value = BTreeMap::from([("b".to_string(), 0.1 + 0.2), ("a".to_string(), 1e-300)]);
        write_json(&path, &value).unwrap();
        let back: BTreeMap<String, f64> = read_json(&path).unwrap();
        assert_eq!(back, value);
        assert_eq!(fs::read_to_string(&path).unwrap(), to_json(&back).unwrap());
    }
}
