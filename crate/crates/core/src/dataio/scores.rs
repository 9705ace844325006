//! Score files (`utt_id score`) and key files (`utt_id {bonafide|spoof}`).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::{ScoreRecord, TrialLabel};

fn two_columns<'a>(path: &Path, text: &'a str) -> Result<Vec<(usize, &'a str, &'a str)>> {
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [id, value] = fields[..] else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected 2 fields, got {}", fields.len()),
            });
        };
        if !seen.insert(id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("duplicate utterance id `{id}`"),
            });
        }
        rows.push((n + 1, id, value));
    }
    Ok(rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = read_text(path)?;
    two_columns(path, &text)?
        .into_iter()
        .map(|(line, id, value)| {
            let score: f64 = value.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad score `{value}`"),
            })?;
            if !score.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "non-finite score".into(),
                });
            }
            Ok((id.to_string(), score))
        })
        .collect()
}

/// Scores are written in shortest round-trip decimal form, one per line.
pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    let mut out = String::new();
    for (id, s) in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score of `{id}`")));
        }
        writeln!(out, "{id} {s}").expect("write to string");
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_key(path: &Path) -> Result<Vec<(String, TrialLabel)>> {
    let text = read_text(path)?;
    two_columns(path, &text)?
        .into_iter()
        .map(|(line, id, value)| {
            let label = value.parse().map_err(|e: Error| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            Ok((id.to_string(), label))
        })
        .collect()
}

pub fn write_key(path: &Path, key: &[(String, TrialLabel)]) -> Result<()> {
    let mut out = String::new();
    for (id, label) in key {
        writeln!(out, "{id} {label}").expect("write to string");
    }
    write_atomic(path, out.as_bytes())
}

/// Attaches labels to scores. Every scored utterance must appear in the key;
/// key entries without a score are ignored.
pub fn join_with_key(scores: &[(String, f64)], key: &[(String, TrialLabel)]) -> Result<Vec<ScoreRecord>> {
    let labels: HashMap<&str, TrialLabel> = key.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    scores
        .iter()
        .map(|(id, s)| {
            let label = labels
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("utterance `{id}` missing from key")))?;
            Ok(ScoreRecord::new(id.clone(), *s, *label))
        })
        .collect()
}
