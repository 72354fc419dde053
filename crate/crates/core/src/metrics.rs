//! ROC-AUC, McClish-standardised partial AUC, per-domain splits and the harmonic-mean aggregate.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Domain, Label};

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("need at least one normal and one anomalous score ({normal} normal, {anomalous} anomalous)")]
    OneClass { normal: usize, anomalous: usize },
    #[error("machine {machine:?} has single-label test scores ({normal} normal, {anomalous} anomalous)")]
    SingleLabelMachine {
        machine: String,
        normal: usize,
        anomalous: usize,
    },
    #[error("machine {machine:?} has no normal test clips in the {domain} domain")]
    EmptyDomain { machine: String, domain: Domain },
    #[error("max_fpr = {0} must lie in (0, 1]")]
    InvalidMaxFpr(f64),
    #[error("harmonic mean needs positive values, found {0}")]
    NonPositive(f64),
    #[error("harmonic mean of an empty set")]
    Empty,
    #[error("non-finite score for clip {0:?}")]
    NonFinite(String),
    #[error("clip {0:?} has label unknown")]
    UnknownLabel(String),
    #[error("scores {path}: {msg}")]
    Csv { path: String, msg: String },
}

/// One evaluated test clip; higher scores are more anomalous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub clip_id: String,
    pub machine_type: String,
    pub domain: Domain,
    pub label: Label,
    pub score: f64,
}

fn split_labels<'a>(scores: impl IntoIterator<Item = &'a ScoredClip>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(MetricsError::NonFinite(s.clip_id.clone()));
        }
        match s.label {
            Label::Normal => normal.push(s.score),
            Label::Anomalous => anomalous.push(s.score),
            Label::Unknown => return Err(MetricsError::UnknownLabel(s.clip_id.clone())),
        }
    }
    Ok((normal, anomalous))
}

fn require_two_classes(normal: &[f64], anomalous: &[f64]) -> Result<()> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(MetricsError::OneClass {
            normal: normal.len(),
            anomalous: anomalous.len(),
        });
    }
    Ok(())
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc_from(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    require_two_classes(normal, anomalous)?;
    let mut sorted = normal.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the credited pair count keeps the tally integral
    let mut twice: u64 = 0;
    for &a in anomalous {
        let below = sorted.partition_point(|&n| n < a);
        let not_above = sorted.partition_point(|&n| n <= a);
        twice += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(twice as f64 / (2 * normal.len() * anomalous.len()) as f64)
}

pub fn auc(scores: &[ScoredClip]) -> Result<f64> {
    let (normal, anomalous) = split_labels(scores)?;
    auc_from(&normal, &anomalous)
}

/// Vertices of the ROC curve, with tied scores forming a single diagonal step.
pub fn roc_points(normal: &[f64], anomalous: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, na) = (normal.len() as f64, anomalous.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn, tp as f64 / na));
    }
    points
}

/// Trapezoidal area under the piecewise-linear ROC over `[0, max_fpr]`.
fn partial_area(points: &[(f64, f64)], max_fpr: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= max_fpr {
            break;
        }
        if x1 <= max_fpr {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0);
            area += (max_fpr - x0) * (y0 + y) / 2.0;
        }
    }
    area
}

/// Partial AUC over FPR in `[0, max_fpr]`, McClish-standardised so chance scores 0.5.
pub fn pauc_from(normal: &[f64], anomalous: &[f64], max_fpr: f64) -> Result<f64> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(MetricsError::InvalidMaxFpr(max_fpr));
    }
    require_two_classes(normal, anomalous)?;
    let a = partial_area(&roc_points(normal, anomalous), max_fpr);
    let min_area = max_fpr * max_fpr / 2.0;
    Ok(0.5 * (1.0 + (a - min_area) / (max_fpr - min_area)))
}

pub fn pauc(scores: &[ScoredClip], max_fpr: f64) -> Result<f64> {
    let (normal, anomalous) = split_labels(scores)?;
    pauc_from(&normal, &anomalous, max_fpr)
}

/// AUC of domain-`domain` normals against the anomalies of both domains.
pub fn domain_auc(scores: &[ScoredClip], domain: Domain) -> Result<f64> {
    let subset: Vec<&ScoredClip> = scores
        .iter()
        .filter(|s| s.label == Label::Anomalous || s.domain == domain)
        .collect();
    let (normal, anomalous) = split_labels(subset)?;
    auc_from(&normal, &anomalous)
}

/// Harmonic mean.
pub fn omega(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(MetricsError::NonPositive(v));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub machine_type: String,
    pub auc_source: f64,
    pub auc_target: f64,
    pub pauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub per_class: Vec<ClassMetrics>,
    pub omega: f64,
}

impl EvalReport {
    /// Builds a report from precomputed per-class metrics.
    pub fn from_metrics(system: impl Into<String>, per_class: Vec<ClassMetrics>) -> Result<Self> {
        let values: Vec<f64> = per_class
            .iter()
            .flat_map(|c| [c.auc_target, c.auc_source, c.pauc])
            .collect();
        let omega = omega(&values)?;
        Ok(Self {
            system: system.into(),
            per_class,
            omega,
        })
    }
}

/// Per-machine metrics (machines in order of first appearance) and Ω.
pub fn evaluate(system: &str, scores: &[ScoredClip], max_fpr: f64) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    let machines: Vec<&str> = scores
        .iter()
        .map(|s| s.machine_type.as_str())
        .filter(|m| seen.insert(*m))
        .collect();
    let mut groups = Vec::new();
    for m in machines {
        let subset: Vec<ScoredClip> = scores.iter().filter(|s| s.machine_type == m).cloned().collect();
        let (normal, anomalous) = split_labels(&subset)?;
        if normal.is_empty() || anomalous.is_empty() {
            return Err(MetricsError::SingleLabelMachine {
                machine: m.to_string(),
                normal: normal.len(),
                anomalous: anomalous.len(),
            });
        }
        groups.push((m, subset, normal, anomalous));
    }
    let mut per_class = Vec::new();
    for (m, subset, normal, anomalous) in groups {
        let per_domain = |d: Domain| {
            if !subset.iter().any(|s| s.domain == d && s.label == Label::Normal) {
                return Err(MetricsError::EmptyDomain {
                    machine: m.to_string(),
                    domain: d,
                });
            }
            domain_auc(&subset, d)
        };
        per_class.push(ClassMetrics {
            machine_type: m.to_string(),
            auc_source: per_domain(Domain::Source)?,
            auc_target: per_domain(Domain::Target)?,
            pauc: pauc_from(&normal, &anomalous, max_fpr)?,
        });
    }
    EvalReport::from_metrics(system, per_class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Table with one row group per system and one column per machine (taken from the first report).
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> String {
    let machines: Vec<&str> = reports
        .first()
        .map(|r| r.per_class.iter().map(|c| c.machine_type.as_str()).collect())
        .unwrap_or_default();
    let metric_rows: [(&str, fn(&ClassMetrics) -> f64); 3] = [
        ("AUC(Target)", |c| c.auc_target),
        ("AUC(Source)", |c| c.auc_source),
        ("pAUC", |c| c.pauc),
    ];
    let cell = |r: &EvalReport, m: &str, f: fn(&ClassMetrics) -> f64| {
        r.per_class
            .iter()
            .find(|c| c.machine_type == m)
            .map(|c| pct(f(c)))
            .unwrap_or_else(|| "-".into())
    };
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| System | Metric | {} | Omega (h-mean) |", machines.join(" | "));
            let _ = writeln!(out, "|---|---|{}---|", "---|".repeat(machines.len()));
            for r in reports {
                for (i, (name, f)) in metric_rows.iter().enumerate() {
                    let cells: Vec<String> = machines.iter().map(|m| cell(r, m, *f)).collect();
                    let (sys, om) = if i == 0 { (r.system.clone(), pct(r.omega)) } else { (String::new(), String::new()) };
                    let _ = writeln!(out, "| {sys} | {name} | {} | {om} |", cells.join(" | "));
                }
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "system,metric,{},omega", machines.join(","));
            for r in reports {
                for (name, f) in metric_rows.iter() {
                    let cells: Vec<String> = machines.iter().map(|m| cell(r, m, *f)).collect();
                    let _ = writeln!(out, "{},{name},{},{}", r.system, cells.join(","), pct(r.omega));
                }
            }
        }
    }
    out
}

pub const SCORES_HEADER: [&str; 5] = ["clip_id", "machine_type", "domain", "label", "score"];

pub fn scores_to_csv(scores: &[ScoredClip]) -> String {
    let mut out = SCORES_HEADER.join(",");
    out.push('\n');
    for s in scores {
        let _ = writeln!(out, "{},{},{},{},{}", s.clip_id, s.machine_type, s.domain, s.label, s.score);
    }
    out
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredClip>> {
    let err = |msg: String| MetricsError::Csv {
        path: path.display().to_string(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().ne(SCORES_HEADER.iter().copied()) {
        return Err(err(format!("header must be `{}`", SCORES_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = i + 1;
        let f = |k: usize| rec.get(k).unwrap_or("");
        out.push(ScoredClip {
            clip_id: f(0).to_string(),
            machine_type: f(1).to_string(),
            domain: f(2).parse().map_err(|v| err(format!("row {row}: bad domain {v:?}")))?,
            label: f(3).parse().map_err(|v| err(format!("row {row}: bad label {v:?}")))?,
            score: f(4).parse().map_err(|_| err(format!("row {row}: bad score {:?}", f(4))))?,
        });
    }
    Ok(out)
}
