//! Detection error metrics. Scores are oriented higher-is-attack and the
//! classification rule is fixed: score >= tau classifies as attack. APCER is
//! then the fraction of attacks below tau (missed), BPCER the fraction of
//! bona fides at or above tau (false alarms).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::{Label, Medium};

pub mod report;
pub mod vuln;

pub use report::{generalization_report, render_bpcer_table, EvalReport, ReportCounts};
pub use vuln::{fmr_threshold, mmpmr, FmrThreshold, VulnEntry, VulnTable};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("score table has no {0} entries")]
    MissingClass(&'static str),
    #[error("duplicate image id in score table: {0}")]
    DuplicateImageId(String),
    #[error("non-finite score for {0}")]
    NonFiniteScore(String),
    #[error("target rate {0} outside (0,1)")]
    BadTarget(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("report is missing the APCER={0}% operating point")]
    MissingOperatingPoint(f64),
    #[error("vulnerability entry {0} has non-finite similarity")]
    NonFiniteSimilarity(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub image_id: String,
    pub score: f64,
    pub label: Label,
    pub medium: Medium,
}

/// Per-sample detector scores, higher-is-attack.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self, MetricError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !e.score.is_finite() {
                return Err(MetricError::NonFiniteScore(e.image_id.clone()));
            }
            if !seen.insert(e.image_id.clone()) {
                return Err(MetricError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(ScoreTable { entries })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn attack_scores(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == Label::Attack)
            .map(|e| e.score)
            .collect()
    }

    pub fn bonafide_scores(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == Label::Bonafide)
            .map(|e| e.score)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "score", "label", "medium"])?;
        for e in &self.entries {
            w.write_record([
                e.image_id.as_str(),
                &format!("{:.17}", e.score),
                &e.label.to_string(),
                &e.medium.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let get = |idx: usize| {
                row.get(idx).ok_or(MetricError::Parse {
                    line,
                    message: format!("missing column {idx}"),
                })
            };
            entries.push(ScoreEntry {
                image_id: get(0)?.to_string(),
                score: get(1)?.parse().map_err(|e| MetricError::Parse {
                    line,
                    message: format!("bad score: {e}"),
                })?,
                label: Label::parse(get(2)?).ok_or(MetricError::Parse {
                    line,
                    message: format!("bad label {:?}", row.get(2)),
                })?,
                medium: Medium::parse(get(3)?).ok_or(MetricError::Parse {
                    line,
                    message: format!("bad medium {:?}", row.get(3)),
                })?,
            });
        }
        ScoreTable::new(entries)
    }
}

/// Attack presentation classification error rate at threshold `tau`:
/// fraction of attacks classified bona fide (score < tau).
pub fn apcer(scores: &ScoreTable, tau: f64) -> Result<f64, MetricError> {
    let attacks = scores.attack_scores();
    if attacks.is_empty() {
        return Err(MetricError::MissingClass("attack"));
    }
    let missed = attacks.iter().filter(|&&s| s < tau).count();
    Ok(missed as f64 / attacks.len() as f64)
}

/// Bona fide presentation classification error rate at threshold `tau`:
/// fraction of bona fides classified attack (score >= tau).
pub fn bpcer(scores: &ScoreTable, tau: f64) -> Result<f64, MetricError> {
    let bonafides = scores.bonafide_scores();
    if bonafides.is_empty() {
        return Err(MetricError::MissingClass("bona fide"));
    }
    let flagged = bonafides.iter().filter(|&&s| s >= tau).count();
    Ok(flagged as f64 / bonafides.len() as f64)
}

/// Finite threshold candidates: every observed score, midpoints between
/// consecutive distinct scores, and one value off each end.
fn threshold_candidates(scores: &ScoreTable) -> Vec<f64> {
    let mut values: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut cands = Vec::with_capacity(values.len() * 2 + 2);
    cands.push(values[0] - 1.0);
    for (i, &v) in values.iter().enumerate() {
        cands.push(v);
        if let Some(&next) = values.get(i + 1) {
            cands.push((v + next) / 2.0);
        }
    }
    cands.push(values[values.len() - 1] + 1.0);
    cands
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_apcer: f64,
    pub bpcer: f64,
    pub apcer: f64,
    pub tau: f64,
    /// True when the target is below the resolution of the attack count, so
    /// the chosen point collapses to APCER = 0.
    pub saturated: bool,
}

/// BPCER at the decision threshold meeting `target_apcer`: the best (largest)
/// tau over the finite candidate set with APCER <= target. Ties resolve
/// toward the smaller BPCER.
pub fn bpcer_at_apcer(scores: &ScoreTable, target_apcer: f64) -> Result<OperatingPoint, MetricError> {
    if !(0.0 < target_apcer && target_apcer < 1.0) {
        return Err(MetricError::BadTarget(target_apcer));
    }
    let n_attacks = scores.attack_scores().len();
    if n_attacks == 0 {
        return Err(MetricError::MissingClass("attack"));
    }
    if scores.bonafide_scores().is_empty() {
        return Err(MetricError::MissingClass("bona fide"));
    }
    let mut best: Option<OperatingPoint> = None;
    for tau in threshold_candidates(scores) {
        let a = apcer(scores, tau)?;
        if a > target_apcer {
            continue;
        }
        let b = bpcer(scores, tau)?;
        let candidate = OperatingPoint {
            target_apcer,
            bpcer: b,
            apcer: a,
            tau,
            saturated: false,
        };
        let better = match &best {
            None => true,
            Some(cur) => b < cur.bpcer || (b == cur.bpcer && tau > cur.tau),
        };
        if better {
            best = Some(candidate);
        }
    }
    // tau below every score gives APCER = 0, so a feasible point always exists.
    let mut point = best.expect("feasible threshold always exists");
    point.saturated = (target_apcer * n_attacks as f64).floor() < 1.0;
    Ok(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub apcer: f64,
    pub one_minus_bpcer: f64,
    pub tau: f64,
}

/// Operating characteristic over all distinct observed thresholds, sorted by
/// APCER; exact duplicate points are dropped. `max_points` thins the curve
/// (endpoints always kept) for plotting.
pub fn roc(scores: &ScoreTable, max_points: Option<usize>) -> Result<Vec<RocPoint>, MetricError> {
    if scores.attack_scores().is_empty() {
        return Err(MetricError::MissingClass("attack"));
    }
    if scores.bonafide_scores().is_empty() {
        return Err(MetricError::MissingClass("bona fide"));
    }
    let mut points: Vec<RocPoint> = Vec::new();
    for tau in threshold_candidates(scores) {
        points.push(RocPoint {
            apcer: apcer(scores, tau)?,
            one_minus_bpcer: 1.0 - bpcer(scores, tau)?,
            tau,
        });
    }
    points.sort_by(|a, b| {
        a.apcer
            .partial_cmp(&b.apcer)
            .unwrap()
            .then(a.one_minus_bpcer.partial_cmp(&b.one_minus_bpcer).unwrap())
    });
    points.dedup_by(|a, b| a.apcer == b.apcer && a.one_minus_bpcer == b.one_minus_bpcer);
    if let Some(cap) = max_points {
        if cap >= 2 && points.len() > cap {
            let last = points.len() - 1;
            let mut thinned = Vec::with_capacity(cap);
            for i in 0..cap {
                let idx = i * last / (cap - 1);
                thinned.push(points[idx]);
            }
            thinned.dedup_by(|a, b| a.apcer == b.apcer && a.one_minus_bpcer == b.one_minus_bpcer);
            points = thinned;
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests;
