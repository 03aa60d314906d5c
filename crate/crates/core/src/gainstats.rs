//! Benchmark-gain summaries: per-dataset deltas against a baseline, AVG, #DG
//! (datasets with a strict gain) and the coefficient of variation of the deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// |μ| below this makes CV Δ undefined.
pub const CV_MEAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("model {0:?} is not in the score table")]
    UnknownModel(String),
    #[error("model {model:?} has no datasets")]
    Empty { model: String },
    #[error("dataset sets differ between {baseline:?} and {candidate:?}: only in baseline {only_baseline:?}, only in candidate {only_candidate:?}")]
    DatasetMismatch {
        baseline: String,
        candidate: String,
        only_baseline: Vec<String>,
        only_candidate: Vec<String>,
    },
    #[error("score {value} for {model:?}/{dataset:?} is outside [0, 100]")]
    ScoreRange { model: String, dataset: String, value: f64 },
    #[error("relative improvement is undefined for a zero baseline")]
    ZeroBaseline,
    #[error("judge counts sum to {sum}, expected M = {m}")]
    CountSum { sum: u64, m: u64 },
    #[error("judge sample count M must be at least 1")]
    NoSamples,
    #[error("score table is not valid JSON: {0}")]
    Json(String),
}

/// Scores in percent, keyed by model then dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub models: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ScoreTable {
    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let table: ScoreTable = serde_json::from_str(text).map_err(|e| StatsError::Json(e.to_string()))?;
        for (model, scores) in &table.models {
            for (dataset, &value) in scores {
                if !(0.0..=100.0).contains(&value) {
                    return Err(StatsError::ScoreRange {
                        model: model.clone(),
                        dataset: dataset.clone(),
                        value,
                    });
                }
            }
        }
        Ok(table)
    }

    pub fn model(&self, name: &str) -> Result<&BTreeMap<String, f64>, StatsError> {
        self.models
            .get(name)
            .ok_or_else(|| StatsError::UnknownModel(name.to_string()))
    }

    /// Mean score of one model over its datasets.
    pub fn average(&self, name: &str) -> Result<f64, StatsError> {
        let scores = self.model(name)?;
        if scores.is_empty() {
            return Err(StatsError::Empty { model: name.to_string() });
        }
        Ok(scores.values().sum::<f64>() / scores.len() as f64)
    }
}

/// Standard deviation used for CV Δ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum VarianceForm {
    /// Divide by n − 1. Reproduces the published CV Δ columns.
    #[default]
    Sample,
    /// Divide by n.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub baseline: String,
    pub candidate: String,
    /// `(dataset, candidate − baseline)` in dataset-name order.
    pub deltas: Vec<(String, f64)>,
    pub mean_delta: f64,
    pub avg_score: f64,
    pub num_dataset_gains: usize,
    /// `None` when |mean_delta| < [`CV_MEAN_TOLERANCE`].
    pub cv_delta: Option<f64>,
}

/// Population or sample standard deviation over the mean.
pub fn coefficient_of_variation(deltas: &[f64], form: VarianceForm) -> Option<f64> {
    let n = deltas.len();
    if n == 0 {
        return None;
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    if mean.abs() < CV_MEAN_TOLERANCE {
        return None;
    }
    let denom = match form {
        VarianceForm::Population => n as f64,
        VarianceForm::Sample if n > 1 => (n - 1) as f64,
        VarianceForm::Sample => 1.0,
    };
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / denom;
    Some(var.sqrt() / mean.abs())
}

pub fn gain_report(table: &ScoreTable, baseline: &str, candidate: &str) -> Result<GainReport, StatsError> {
    gain_report_with(table, baseline, candidate, VarianceForm::default())
}

pub fn gain_report_with(
    table: &ScoreTable,
    baseline: &str,
    candidate: &str,
    form: VarianceForm,
) -> Result<GainReport, StatsError> {
    let b = table.model(baseline)?;
    let c = table.model(candidate)?;
    let only_baseline: Vec<String> = b.keys().filter(|k| !c.contains_key(*k)).cloned().collect();
    let only_candidate: Vec<String> = c.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
    if !only_baseline.is_empty() || !only_candidate.is_empty() {
        return Err(StatsError::DatasetMismatch {
            baseline: baseline.to_string(),
            candidate: candidate.to_string(),
            only_baseline,
            only_candidate,
        });
    }
    if c.is_empty() {
        return Err(StatsError::Empty {
            model: candidate.to_string(),
        });
    }
    let deltas: Vec<(String, f64)> = c.iter().map(|(d, s)| (d.clone(), s - b[d])).collect();
    let values: Vec<f64> = deltas.iter().map(|(_, d)| *d).collect();
    let n = values.len() as f64;
    Ok(GainReport {
        baseline: baseline.to_string(),
        candidate: candidate.to_string(),
        mean_delta: values.iter().sum::<f64>() / n,
        avg_score: c.values().sum::<f64>() / n,
        num_dataset_gains: values.iter().filter(|d| **d > 0.0).count(),
        cv_delta: coefficient_of_variation(&values, form),
        deltas,
    })
}

/// `100 · (candidate − baseline) / baseline`.
pub fn relative_improvement(baseline: f64, candidate: f64) -> Result<f64, StatsError> {
    if baseline == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

/// Judge score counts for one criterion: `counts[s]` samples received score `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCounts {
    pub m: u64,
    pub counts: BTreeMap<u8, u64>,
}

pub const JUDGE_SCORES: [u8; 4] = [1, 2, 3, 4];

/// `S = (1/M) Σ c_s · s`.
pub fn aggregate_judge_scores(counts: &JudgeCounts) -> Result<f64, StatsError> {
    if counts.m == 0 {
        return Err(StatsError::NoSamples);
    }
    let sum: u64 = counts.counts.values().sum();
    if sum != counts.m {
        return Err(StatsError::CountSum { sum, m: counts.m });
    }
    let total: u64 = counts.counts.iter().map(|(s, c)| *s as u64 * c).sum();
    Ok(total as f64 / counts.m as f64)
}

/// [`aggregate_judge_scores`] for every criterion.
pub fn aggregate_all(criteria: &BTreeMap<String, JudgeCounts>) -> Result<BTreeMap<String, f64>, StatsError> {
    criteria
        .iter()
        .map(|(name, c)| Ok((name.clone(), aggregate_judge_scores(c)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" | "table-text" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn cv_text(cv: Option<f64>) -> String {
    cv.map_or_else(|| "—".to_string(), |v| format!("{v:.1}"))
}

fn trend(r: &GainReport) -> &'static str {
    if r.mean_delta > 0.0 {
        "gain"
    } else if r.mean_delta < 0.0 {
        "loss"
    } else {
        "even"
    }
}

/// Renders reports with columns AVG, #DG, CV Δ at one decimal.
pub fn render_report(reports: &[GainReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = reports
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "baseline": r.baseline,
                        "candidate": r.candidate,
                        "avg": r.avg_score,
                        "num_dataset_gains": r.num_dataset_gains,
                        "cv_delta": r.cv_delta,
                        "mean_delta": r.mean_delta,
                        "trend": trend(r),
                        "deltas": r.deltas.iter().map(|(d, v)| (d.clone(), *v)).collect::<BTreeMap<_, _>>(),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("candidate,baseline,AVG,#DG,CV Δ,mean Δ,trend\n");
            for r in reports {
                let _ = writeln!(
                    s,
                    "{},{},{:.1},{},{},{:+.1},{}",
                    csv_field(&r.candidate),
                    csv_field(&r.baseline),
                    r.avg_score,
                    r.num_dataset_gains,
                    cv_text(r.cv_delta),
                    r.mean_delta,
                    trend(r)
                );
            }
            s
        }
        ReportFormat::Table => {
            let width = reports
                .iter()
                .map(|r| r.candidate.chars().count())
                .max()
                .unwrap_or(0)
                .max("model".len());
            let mut s = format!("{:<width$}  {:>6}  {:>4}  {:>6}  {:>7}\n", "model", "AVG", "#DG", "CV Δ", "mean Δ");
            for r in reports {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>6.1}  {:>4}  {:>6}  {:>+7.1}  {}",
                    r.candidate,
                    r.avg_score,
                    r.num_dataset_gains,
                    cv_text(r.cv_delta),
                    r.mean_delta,
                    trend(r)
                );
            }
            s
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
