//! Face-recognition vulnerability metrics: false-match-rate thresholding on
//! non-mated similarity scores and the mated morph presentation match rate.
//! Similarities are oriented higher-is-more-similar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricError;

/// One attack with its similarity to both contributing identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnEntry {
    pub morph_id: String,
    pub sim_id1: f64,
    pub sim_id2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VulnTable {
    pub entries: Vec<VulnEntry>,
}

impl VulnTable {
    pub fn new(entries: Vec<VulnEntry>) -> Result<Self, MetricError> {
        for e in &entries {
            if !e.sim_id1.is_finite() || !e.sim_id2.is_finite() {
                return Err(MetricError::NonFiniteSimilarity(e.morph_id.clone()));
            }
        }
        Ok(VulnTable { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["morph_id", "sim_id1", "sim_id2"])?;
        for e in &self.entries {
            w.write_record([
                e.morph_id.as_str(),
                &format!("{:.17}", e.sim_id1),
                &format!("{:.17}", e.sim_id2),
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
            let parse = |idx: usize| -> Result<f64, MetricError> {
                row.get(idx)
                    .ok_or(MetricError::Parse {
                        line,
                        message: format!("missing column {idx}"),
                    })?
                    .parse()
                    .map_err(|e| MetricError::Parse {
                        line,
                        message: format!("bad similarity: {e}"),
                    })
            };
            entries.push(VulnEntry {
                morph_id: row
                    .get(0)
                    .ok_or(MetricError::Parse {
                        line,
                        message: "missing morph_id".into(),
                    })?
                    .to_string(),
                sim_id1: parse(1)?,
                sim_id2: parse(2)?,
            });
        }
        VulnTable::new(entries)
    }
}

/// Plain one-column CSV of non-mated comparison scores.
pub fn write_nonmated_csv(scores: &[f64], path: &Path) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["score"])?;
    for s in scores {
        w.write_record([format!("{s:.17}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_nonmated_csv(path: &Path) -> Result<Vec<f64>, MetricError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        out.push(
            row.get(0)
                .ok_or(MetricError::Parse {
                    line: i + 2,
                    message: "missing score".into(),
                })?
                .parse()
                .map_err(|e| MetricError::Parse {
                    line: i + 2,
                    message: format!("bad score: {e}"),
                })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmrThreshold {
    pub tau: f64,
    /// Set when the target is degenerate (>= 1): every comparison matches and
    /// tau falls below the smallest observed score by convention.
    pub degenerate: bool,
}

/// Decision threshold for a target false match rate: the smallest observed
/// score such that the fraction of non-mated scores strictly above it is at
/// most the target. A non-mated score equal to tau does not count as a match.
pub fn fmr_threshold(nonmated: &[f64], target_fmr: f64) -> Result<FmrThreshold, MetricError> {
    if nonmated.is_empty() {
        return Err(MetricError::Empty("non-mated score list"));
    }
    if target_fmr <= 0.0 {
        return Err(MetricError::BadTarget(target_fmr));
    }
    let mut sorted = nonmated.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if target_fmr >= 1.0 {
        return Ok(FmrThreshold {
            tau: sorted[0] - 1.0,
            degenerate: true,
        });
    }
    let n = sorted.len() as f64;
    for &tau in sorted.iter() {
        let above = sorted.iter().filter(|&&s| s > tau).count() as f64;
        if above / n <= target_fmr {
            return Ok(FmrThreshold {
                tau,
                degenerate: false,
            });
        }
    }
    // The maximum observed score always satisfies the target (0 above it).
    unreachable!("max score always meets the target")
}

/// Mated morph presentation match rate: fraction of attacks whose similarity
/// to BOTH contributing identities exceeds tau.
pub fn mmpmr(vuln: &VulnTable, tau: f64) -> Result<f64, MetricError> {
    if vuln.entries.is_empty() {
        return Err(MetricError::Empty("vulnerability table"));
    }
    let matched = vuln
        .entries
        .iter()
        .filter(|e| e.sim_id1.min(e.sim_id2) > tau)
        .count();
    Ok(matched as f64 / vuln.entries.len() as f64)
}
