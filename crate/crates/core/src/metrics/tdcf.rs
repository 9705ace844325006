//! Tandem detection cost function of a countermeasure placed in front of a
//! fixed ASV system.
//!
//! ```text
//! t-DCF(s)      = C0 + C1 * P_miss_cm(s) + C2 * P_fa_cm(s)
//! t-DCF_norm(s) = t-DCF(s) / (C0 + min(C1, C2))
//! ```
//!
//! The legacy form has `C0 = 0`.

use serde::{Deserialize, Serialize};

use super::{det_curve_from_scores, split_scores, ScoreRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdcfMode {
    Legacy,
    Revised,
}

impl std::str::FromStr for TdcfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legacy" => Ok(TdcfMode::Legacy),
            "revised" => Ok(TdcfMode::Revised),
            other => Err(Error::InvalidArgument(format!("unknown t-DCF mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TdcfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TdcfMode::Legacy => "legacy",
            TdcfMode::Revised => "revised",
        })
    }
}

/// Cost coefficients of the t-DCF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcfCosts {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl TdcfCosts {
    pub fn validate(&self) -> Result<()> {
        if ![self.c0, self.c1, self.c2].iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(Error::DegenerateCost(format!("coefficients must be finite and >= 0: {self:?}")));
        }
        if self.c1 == 0.0 && self.c2 == 0.0 {
            return Err(Error::DegenerateCost("C1 = C2 = 0".into()));
        }
        if self.c1 == 0.0 || self.c2 == 0.0 {
            return Err(Error::DegenerateCost(format!("C1 and C2 must be positive: {self:?}")));
        }
        Ok(())
    }

    fn normalizer(&self) -> f64 {
        self.c0 + self.c1.min(self.c2)
    }
}

/// Priors, costs and ASV operating point from which the coefficients are
/// derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsvCostModel {
    pub p_tar: f64,
    pub p_non: f64,
    pub p_spoof: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// ASV miss rate on target trials.
    pub asv_pmiss: f64,
    /// ASV false-accept rate on non-target trials.
    pub asv_pfa: f64,
    /// ASV miss rate on spoofed trials.
    pub asv_pmiss_spoof: f64,
}

impl AsvCostModel {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_tar, self.p_non, self.p_spoof, self.asv_pmiss, self.asv_pfa, self.asv_pmiss_spoof];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("priors and ASV rates must lie in [0, 1]".into()));
        }
        let total = self.p_tar + self.p_non + self.p_spoof;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("priors sum to {total}, expected 1")));
        }
        if [self.c_miss, self.c_fa, self.c_miss_cm, self.c_fa_cm].iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidArgument("costs must be >= 0".into()));
        }
        Ok(())
    }

    pub fn costs(&self, mode: TdcfMode) -> Result<TdcfCosts> {
        self.validate()?;
        let costs = match mode {
            TdcfMode::Legacy => TdcfCosts {
                c0: 0.0,
                c1: self.p_tar * (self.c_miss_cm - self.c_miss * self.asv_pmiss) - self.p_non * self.c_fa * self.asv_pfa,
                c2: self.c_fa_cm * self.p_spoof * (1.0 - self.asv_pmiss_spoof),
            },
            TdcfMode::Revised => {
                let c0 = self.p_tar * self.c_miss * self.asv_pmiss + self.p_non * self.c_fa * self.asv_pfa;
                TdcfCosts {
                    c0,
                    c1: self.p_tar * self.c_miss - c0,
                    c2: self.c_fa * self.p_spoof * (1.0 - self.asv_pmiss_spoof),
                }
            }
        };
        costs.validate()?;
        Ok(costs)
    }
}

/// Contents of a t-DCF parameter file: either the coefficients themselves
/// or a cost model to derive them from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdcfParams {
    Direct(TdcfCosts),
    CostModel(AsvCostModel),
}

const ASVSPOOF2019_LA: &str = include_str!("../../presets/asvspoof2019_la.tdcf");

impl TdcfParams {
    /// The shipped ASVspoof 2019 LA preset.
    pub fn asvspoof2019_la() -> Self {
        Self::parse(ASVSPOOF2019_LA).expect("bundled preset parses")
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    ///
    /// Accepts either `c0`, `c1`, `c2` (with `c0` optional) or the full set
    /// `p_tar p_non p_spoof c_miss c_fa c_miss_cm c_fa_cm asv_pmiss asv_pfa
    /// asv_pmiss_spoof`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("t-DCF params line {}: expected key=value", n + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("t-DCF params line {}: bad number `{}`", n + 1, v.trim())))?;
            if kv.insert(k.trim().to_string(), v).is_some() {
                return Err(Error::InvalidArgument(format!("t-DCF params: duplicate key `{}`", k.trim())));
            }
        }
        let direct = kv.contains_key("c1") || kv.contains_key("c2");
        let mut take = |k: &str| kv.remove(k);
        let parsed = if direct {
            let (c1, c2) = (take("c1"), take("c2"));
            let costs = TdcfCosts {
                c0: take("c0").unwrap_or(0.0),
                c1: c1.ok_or_else(|| missing("c1"))?,
                c2: c2.ok_or_else(|| missing("c2"))?,
            };
            costs.validate()?;
            TdcfParams::Direct(costs)
        } else {
            let mut req = |k: &'static str| take(k).ok_or_else(|| missing(k));
            let model = AsvCostModel {
                p_tar: req("p_tar")?,
                p_non: req("p_non")?,
                p_spoof: req("p_spoof")?,
                c_miss: req("c_miss")?,
                c_fa: req("c_fa")?,
                c_miss_cm: req("c_miss_cm")?,
                c_fa_cm: req("c_fa_cm")?,
                asv_pmiss: req("asv_pmiss")?,
                asv_pfa: req("asv_pfa")?,
                asv_pmiss_spoof: req("asv_pmiss_spoof")?,
            };
            model.validate()?;
            TdcfParams::CostModel(model)
        };
        drop(take);
        if let Some(extra) = kv.keys().next() {
            return Err(Error::InvalidArgument(format!("t-DCF params: unknown key `{extra}`")));
        }
        Ok(parsed)
    }

    /// Coefficients for `mode`. Legacy mode always has `C0 = 0`.
    pub fn costs(&self, mode: TdcfMode) -> Result<TdcfCosts> {
        match (self, mode) {
            (TdcfParams::Direct(c), TdcfMode::Legacy) => {
                let c = TdcfCosts { c0: 0.0, ..*c };
                c.validate()?;
                Ok(c)
            }
            (TdcfParams::Direct(c), TdcfMode::Revised) => {
                c.validate()?;
                Ok(*c)
            }
            (TdcfParams::CostModel(m), mode) => m.costs(mode),
        }
    }
}

fn missing(key: &str) -> Error {
    Error::InvalidArgument(format!("t-DCF params: missing `{key}`"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTdcf {
    /// Minimum normalized t-DCF.
    pub value: f64,
    pub threshold: f64,
}

/// Minimum of the normalized t-DCF over all DET thresholds, including the
/// accept-all and reject-all sentinels (so the result is at most 1).
pub fn compute_min_tdcf(records: &[ScoreRecord], costs: &TdcfCosts) -> Result<MinTdcf> {
    costs.validate()?;
    let (bona, spoof) = split_scores(records)?;
    let curve = det_curve_from_scores(&bona, &spoof)?;
    let norm = costs.normalizer();
    let mut best = MinTdcf {
        value: f64::INFINITY,
        threshold: f64::NAN,
    };
    for p in &curve {
        let v = (costs.c0 + costs.c1 * p.p_miss + costs.c2 * p.p_fa) / norm;
        if v < best.value {
            best = MinTdcf {
                value: v,
                threshold: p.threshold,
            };
        }
    }
    Ok(best)
}
