//! Report types and their JSON/CSV files.

use std::path::{Path, PathBuf};

use mbmeval::checking::{CellCheckResult, RelativeNll, Verdict};
use mbmeval::dataset::SubpopKey;
use mbmeval::inference::SamplerDiagnostics;
use mbmeval::metrics::MetricKind;
use mbmeval::resample::MetricEstimate;
use mbmeval::synth::GroundTruth;
use mbmeval::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::pipeline::write_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub dataset_hash: String,
    pub n_records: usize,
    pub metrics: Vec<MetricKind>,
    /// Interval levels present on bootstrapped estimates.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimates {
    /// `empirical`, a model name, or `<model>+fallback`.
    pub method: String,
    pub estimates: Vec<MetricEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub spec: String,
    pub diagnostics: Option<SamplerDiagnostics>,
    pub median_ess: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChecks {
    pub model: String,
    pub results: Vec<CellCheckResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLl {
    pub key: SubpopKey,
    pub choice: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: Manifest,
    pub estimates: Vec<MethodEstimates>,
    pub models: Vec<ModelSummary>,
    pub checks: Vec<ModelChecks>,
    pub relative_nll: Vec<RelativeNll>,
    pub best_ll: Vec<BestLl>,
    pub truth: Option<GroundTruth>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn method(&self, name: &str) -> Option<&[MetricEstimate]> {
        self.estimates
            .iter()
            .find(|m| m.method == name)
            .map(|m| m.estimates.as_slice())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

fn pct(level: f64) -> String {
    format!("{}", (level * 100.0).round())
}

pub fn estimates_csv(report: &Report) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["method", "key", "metric", "threshold", "n", "point", "error", "provenance", "n_missing"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for &l in &report.manifest.levels {
        header.push(format!("lo{}", pct(l)));
        header.push(format!("hi{}", pct(l)));
    }
    let mut rows = Vec::new();
    for m in &report.estimates {
        for e in &m.estimates {
            let mut row = vec![
                m.method.clone(),
                e.key.to_string(),
                e.metric.name().into(),
                opt(e.metric.threshold()),
                e.n.to_string(),
                opt(e.point),
                e.error.clone().unwrap_or_default(),
                e.provenance.label(),
                e.n_missing().to_string(),
            ];
            for &l in &report.manifest.levels {
                let i = e.interval(l);
                row.push(opt(i.map(|i| i.lo)));
                row.push(opt(i.map(|i| i.hi)));
            }
            rows.push(row);
        }
    }
    csv_bytes(&header, &rows)
}

/// Long table for forest plots: one row per (key, metric, method).
pub fn forest_csv(report: &Report) -> Result<Vec<u8>> {
    let header: Vec<String> = ["key", "metric", "method", "point", "lo95", "hi95", "truth"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for m in &report.estimates {
        for e in &m.estimates {
            let i = e.interval(0.95);
            let truth = report.truth.as_ref().and_then(|t| t.get(&e.key, e.metric));
            rows.push(vec![
                e.key.to_string(),
                e.metric.name().into(),
                m.method.clone(),
                opt(e.point),
                opt(i.map(|i| i.lo)),
                opt(i.map(|i| i.hi)),
                opt(truth),
            ]);
        }
    }
    csv_bytes(&header, &rows)
}

pub fn checks_csv(report: &Report) -> Result<Vec<u8>> {
    let header: Vec<String> = [
        "model",
        "key",
        "class",
        "n",
        "model_ll",
        "kde_ll",
        "paired_model_ll",
        "n_compared",
        "se",
        "verdict",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for c in &report.checks {
        for r in &c.results {
            rows.push(vec![
                c.model.clone(),
                r.key.to_string(),
                r.class.to_string(),
                r.n.to_string(),
                r.model_ll.to_string(),
                opt(r.kde_ll),
                opt(r.paired_model_ll),
                r.n_compared.to_string(),
                opt(r.se),
                match r.verdict {
                    Verdict::ModelOk => "model_ok".into(),
                    Verdict::Fallback => "fallback".into(),
                },
            ]);
        }
    }
    csv_bytes(&header, &rows)
}

/// Relative NLL per (key, class, model); the KDE is 1 and lower is better.
pub fn relative_nll_csv(report: &Report) -> Result<Vec<u8>> {
    let header: Vec<String> = ["key", "class", "model", "relative_nll"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .relative_nll
        .iter()
        .map(|r| vec![r.key.to_string(), r.class.to_string(), r.model.clone(), opt(r.relative_nll)])
        .collect();
    csv_bytes(&header, &rows)
}

pub fn to_pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes `report.json`, `manifest.json` and the CSV tables to `dir`.
/// Returns the written paths.
pub fn emit(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("report.json", to_pretty_json(report)?),
        ("manifest.json", to_pretty_json(&report.manifest)?),
        ("estimates.csv", estimates_csv(report)?),
        ("forest.csv", forest_csv(report)?),
        ("checks.csv", checks_csv(report)?),
        ("relative_nll.csv", relative_nll_csv(report)?),
    ];
    write_all(dir, files)
}

pub fn write_all(dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    files
        .into_iter()
        .map(|(name, bytes)| {
            let p = dir.join(name);
            write_file(&p, &bytes)?;
            Ok(p)
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<Report> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
