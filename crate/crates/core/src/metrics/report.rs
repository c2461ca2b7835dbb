//! Evaluation reports: fixed operating points, the ROC point list, and
//! rendered comparison tables, including the cross-medium generalization
//! delta in BPCER percentage points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bpcer_at_apcer, roc, MetricError, OperatingPoint, RocPoint, ScoreTable};
use crate::datakit::Medium;

/// The three reported APCER operating targets: 0.1%, 1%, 10%.
pub const BPCER_TARGETS: [f64; 3] = [0.001, 0.01, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub attacks: usize,
    pub bonafides: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub train_medium: Medium,
    pub test_medium: Medium,
    pub bpcer_at: Vec<OperatingPoint>,
    pub roc_points: Vec<RocPoint>,
    pub counts: ReportCounts,
}

impl EvalReport {
    pub fn from_scores(
        model: &str,
        train_medium: Medium,
        test_medium: Medium,
        scores: &ScoreTable,
    ) -> Result<Self, MetricError> {
        let mut bpcer_at = Vec::with_capacity(BPCER_TARGETS.len());
        for target in BPCER_TARGETS {
            bpcer_at.push(bpcer_at_apcer(scores, target)?);
        }
        let report = EvalReport {
            model: model.to_string(),
            train_medium,
            test_medium,
            bpcer_at,
            roc_points: roc(scores, None)?,
            counts: ReportCounts {
                attacks: scores.attack_scores().len(),
                bonafides: scores.bonafide_scores().len(),
            },
        };
        report.check_roc_monotone()?;
        Ok(report)
    }

    /// ROC points must be nondecreasing in 1-BPCER as APCER increases.
    pub fn check_roc_monotone(&self) -> Result<(), MetricError> {
        for pair in self.roc_points.windows(2) {
            if pair[1].apcer < pair[0].apcer
                || (pair[1].apcer >= pair[0].apcer
                    && pair[1].one_minus_bpcer < pair[0].one_minus_bpcer - 1e-12)
            {
                return Err(MetricError::Parse {
                    line: 0,
                    message: format!(
                        "non-monotone roc: ({}, {}) then ({}, {})",
                        pair[0].apcer, pair[0].one_minus_bpcer, pair[1].apcer, pair[1].one_minus_bpcer
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn operating_point(&self, target: f64) -> Option<&OperatingPoint> {
        self.bpcer_at
            .iter()
            .find(|p| (p.target_apcer - target).abs() < 1e-12)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), MetricError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, MetricError> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }

    /// CSV sidecar of raw ROC points for plotting.
    pub fn write_roc_csv(&self, path: &Path) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["apcer", "one_minus_bpcer", "tau"])?;
        for p in &self.roc_points {
            w.write_record([
                format!("{:.17}", p.apcer),
                format!("{:.17}", p.one_minus_bpcer),
                format!("{:.17}", p.tau),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Label used in tables, e.g. "Train-D Test-PS".
    pub fn setting_label(&self) -> String {
        format!("Train-{} Test-{}", self.train_medium, self.test_medium)
    }
}

/// Generalization measure: the BPCER increase in percentage points at
/// APCER = 10% when moving from the in-domain to the cross-domain test,
/// reported at two decimals.
pub fn generalization_report(
    in_domain: &EvalReport,
    cross_domain: &EvalReport,
) -> Result<f64, MetricError> {
    let at10 = |r: &EvalReport| {
        r.operating_point(0.1)
            .map(|p| p.bpcer)
            .ok_or(MetricError::MissingOperatingPoint(10.0))
    };
    let delta_pp = (at10(cross_domain)? - at10(in_domain)?) * 100.0;
    Ok((delta_pp * 100.0).round() / 100.0)
}

/// Plain-text table with one row per report: the three BPCER(%) operating
/// points per train/test medium setting.
pub fn render_bpcer_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<6} {:<6} {:>18} {:>12} {:>12}\n",
        "Approach", "Train", "Test", "BPCER(%)@APCER=0.1%", "@1.0%", "@10.0%"
    ));
    for r in reports {
        let cell = |target: f64| {
            r.operating_point(target)
                .map(|p| format!("{:.2}", p.bpcer * 100.0))
                .unwrap_or_else(|| "-".to_string())
        };
        out.push_str(&format!(
            "{:<14} {:<6} {:<6} {:>18} {:>12} {:>12}\n",
            r.model,
            r.train_medium.to_string(),
            r.test_medium.to_string(),
            cell(0.001),
            cell(0.01),
            cell(0.1),
        ));
    }
    out
}

/// Generalization table rows: in-domain BPCER@10%, cross-domain BPCER@10%,
/// and the increase in percentage points.
pub fn render_generalization_table(
    rows: &[(String, EvalReport, EvalReport)],
) -> Result<String, MetricError> {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>22} {:>22} {:>22}\n",
        "Approach", "BPCER(%)@10% in-domain", "cross-domain", "increase (pp)"
    ));
    for (name, in_domain, cross_domain) in rows {
        let delta = generalization_report(in_domain, cross_domain)?;
        let at10 = |r: &EvalReport| {
            r.operating_point(0.1)
                .map(|p| p.bpcer * 100.0)
                .ok_or(MetricError::MissingOperatingPoint(10.0))
        };
        out.push_str(&format!(
            "{:<14} {:>22.2} {:>22.2} {:>22.2}\n",
            name,
            at10(in_domain)?,
            at10(cross_domain)?,
            delta
        ));
    }
    Ok(out)
}
