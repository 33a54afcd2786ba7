//! QVHighlights-style JSON Lines annotations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::metrics::Window;

/// One query annotation. Unknown fields are ignored so real QVHighlights
/// files load unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub qid: u64,
    pub vid: String,
    pub duration: f64,
    pub relevant_windows: Vec<Window>,
    pub saliency: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl AnnotationRecord {
    /// Checks the window invariants; the message names the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration {} must be positive", self.duration));
        }
        for w in &self.relevant_windows {
            if w[0] >= w[1] {
                return Err(format!("window [{}, {}]: start ≥ end", w[0], w[1]));
            }
            if w[0] < 0.0 || w[1] > self.duration {
                return Err(format!(
                    "window [{}, {}] outside duration {}",
                    w[0], w[1], self.duration
                ));
            }
        }
        Ok(())
    }
}

/// Parsed records plus those rejected by validation.
#[derive(Debug, Clone, Default)]
pub struct AnnotationLoad {
    pub records: Vec<AnnotationRecord>,
    /// `(line number, reason)` of rejected records.
    pub rejected: Vec<(usize, String)>,
}

/// Parses JSONL text. Malformed JSON is an error; records that parse but
/// violate window invariants are rejected and logged.
pub fn parse_annotations(reader: impl BufRead) -> Result<AnnotationLoad, DataError> {
    let mut load = AnnotationLoad::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        match record.validate() {
            Ok(()) => load.records.push(record),
            Err(reason) => {
                warn!("annotation line {lineno} (qid {}) rejected: {reason}", record.qid);
                load.rejected.push((lineno, reason));
            }
        }
    }
    Ok(load)
}

pub fn load_annotations(path: &Path) -> Result<AnnotationLoad, DataError> {
    let file = fs::File::open(path)?;
    parse_annotations(BufReader::new(file))
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}
