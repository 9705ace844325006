//! Manifest: `utt_id<TAB>feature_path<TAB>{bonafide|spoof}` per line.
//!
//! Relative feature paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_text, resolve_relative, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::TrialLabel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: TrialLabel,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [utt_id, file, label] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let label: TrialLabel = label.trim().parse().map_err(|e: Error| err(e.to_string()))?;
        if !seen.insert(utt_id.to_string()) {
            return Err(err(format!("duplicate utterance id `{utt_id}`")));
        }
        let resolved = resolve_relative(path, file);
        if !resolved.is_file() {
            return Err(err(format!("feature file {} not found", resolved.display())));
        }
        entries.push(ManifestEntry {
            utt_id: utt_id.to_string(),
            path: resolved,
            label,
        });
    }
    Ok(entries)
}

/// Writes entries with paths as given (callers choose relative or absolute).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{}\t{}\t{}", e.utt_id, e.path.display(), e.label).expect("write to string");
    }
    write_atomic(path, out.as_bytes())
}
