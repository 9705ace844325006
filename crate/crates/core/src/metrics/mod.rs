//! Countermeasure evaluation: DET curve, equal error rate and min t-DCF.
//!
//! Scores follow the higher-is-bonafide convention. A trial is accepted at
//! threshold `s` when its score is `>= s`.

mod tdcf;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use tdcf::{compute_min_tdcf, AsvCostModel, MinTdcf, TdcfCosts, TdcfMode, TdcfParams};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialLabel {
    Bonafide,
    Spoof,
}

impl TrialLabel {
    /// Class index used by the classifier (bonafide 0, spoof 1).
    pub fn class_index(self) -> usize {
        match self {
            TrialLabel::Bonafide => crate::model::BONAFIDE,
            TrialLabel::Spoof => crate::model::SPOOF,
        }
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(TrialLabel::Bonafide),
            "spoof" => Ok(TrialLabel::Spoof),
            other => Err(Error::InvalidArgument(format!("unknown label `{other}`"))),
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Bonafide => "bonafide",
            TrialLabel::Spoof => "spoof",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

impl ScoreRecord {
    pub fn new(utt_id: impl Into<String>, score: f64, label: TrialLabel) -> Self {
        ScoreRecord {
            utt_id: utt_id.into(),
            score,
            label,
        }
    }
}

/// One vertex of the DET curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    /// Fraction of bonafide trials scoring below the threshold.
    pub p_miss: f64,
    /// Fraction of spoof trials scoring at or above the threshold.
    pub p_fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Splits validated records into bonafide and spoof score lists.
pub fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of `{}`", r.utt_id)));
        }
        if !seen.insert(r.utt_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate utterance id `{}`", r.utt_id)));
        }
        match r.label {
            TrialLabel::Bonafide => bona.push(r.score),
            TrialLabel::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((bona, spoof))
}

pub fn det_curve(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let (bona, spoof) = split_scores(records)?;
    det_curve_from_scores(&bona, &spoof)
}

/// DET vertices at `-inf`, every distinct score, and `+inf`, in increasing
/// threshold order.
pub fn det_curve_from_scores(bona: &[f64], spoof: &[f64]) -> Result<Vec<DetPoint>> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass);
    }
    if bona.iter().chain(spoof).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut bona = bona.to_vec();
    let mut spoof = spoof.to_vec();
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nb, ns) = (bona.len(), spoof.len());
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    for &s in &thresholds {
        while bona_below < nb && bona[bona_below] < s {
            bona_below += 1;
        }
        while spoof_below < ns && spoof[spoof_below] < s {
            spoof_below += 1;
        }
        points.push(DetPoint {
            threshold: s,
            p_miss: bona_below as f64 / nb as f64,
            p_fa: (ns - spoof_below) as f64 / ns as f64,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

pub fn compute_eer(records: &[ScoreRecord]) -> Result<Eer> {
    let (bona, spoof) = split_scores(records)?;
    compute_eer_from_scores(&bona, &spoof)
}

/// Equal error rate at the crossing of `P_miss = P_fa` on the piecewise
/// linear DET polyline.
pub fn compute_eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<Eer> {
    Ok(eer_from_curve(&det_curve_from_scores(bona, spoof)?))
}

/// EER from an ordered DET curve that starts at `(P_miss, P_fa) = (0, 1)`
/// and ends at `(1, 0)`.
pub fn eer_from_curve(curve: &[DetPoint]) -> Eer {
    let gap = |p: &DetPoint| p.p_miss - p.p_fa;
    let k = curve
        .iter()
        .position(|p| gap(p) >= 0.0)
        .expect("curve ends with P_miss = 1, P_fa = 0");
    let hi = curve[k];
    if gap(&hi) == 0.0 || k == 0 {
        return Eer {
            eer: hi.p_miss,
            threshold: hi.threshold,
        };
    }
    let lo = curve[k - 1];
    let lambda = -gap(&lo) / (gap(&hi) - gap(&lo));
    let eer = lo.p_miss + lambda * (hi.p_miss - lo.p_miss);
    let threshold = match (lo.threshold.is_finite(), hi.threshold.is_finite()) {
        (true, true) => lo.threshold + lambda * (hi.threshold - lo.threshold),
        (true, false) => lo.threshold,
        (false, _) => hi.threshold,
    };
    Eer { eer, threshold }
}
