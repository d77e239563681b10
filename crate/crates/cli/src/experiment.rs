//! Repeated-subsample experiments against synthetic ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mbmeval::dataset::SubpopKey;
use mbmeval::metrics::MetricKind;
use mbmeval::resample::Interval;
use mbmeval::rng::indexed;
use mbmeval::synth::ScoreMechanism;
use mbmeval::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Source};
use crate::pipeline::{scenario, synth_inputs, Cache, Pipeline};
use crate::report::{to_pretty_json, write_all, Report};

pub const SIZE_BINS: [&str; 3] = ["(0,100]", "(100,500]", ">500"];

pub fn size_bin(n: usize) -> &'static str {
    match n {
        0..=100 => SIZE_BINS[0],
        101..=500 => SIZE_BINS[1],
        _ => SIZE_BINS[2],
    }
}

/// One estimate in one repetition, next to its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub mechanism: ScoreMechanism,
    pub sample_size: usize,
    pub rep: usize,
    pub key: SubpopKey,
    /// Cell size in the subsample.
    pub n: usize,
    pub metric: MetricKind,
    pub method: String,
    pub estimate: Option<f64>,
    pub intervals: Vec<Interval>,
    pub truth: Option<f64>,
}

impl CellRow {
    pub fn interval(&self, level: f64) -> Option<&Interval> {
        self.intervals.iter().find(|i| (i.level - level).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub mechanism: ScoreMechanism,
    pub sample_size: usize,
    pub method: String,
    pub metric: String,
    /// `all` or one of [`SIZE_BINS`].
    pub size_bin: String,
    /// (repetition, cell) pairs where every method and the truth are defined.
    pub n_pairs: usize,
    pub mae: Option<f64>,
    pub mape: Option<f64>,
    /// `mae` over the empirical estimator's `mae`.
    pub relative_mae: Option<f64>,
    pub relative_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub mechanism: ScoreMechanism,
    pub sample_size: usize,
    pub method: String,
    pub metric: String,
    pub size_bin: String,
    pub level: f64,
    /// Intervals checked against a defined truth.
    pub n_intervals: usize,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
    /// Range of non-missing bootstrap replicates behind the intervals.
    pub min_valid_replicates: Option<usize>,
    pub max_valid_replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub mechanisms: Vec<ScoreMechanism>,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: ExperimentManifest,
    pub errors: Vec<ErrorRow>,
    pub coverage: Vec<CoverageRow>,
    pub cells: Vec<CellRow>,
    pub warnings: Vec<String>,
}

fn cell_rows(report: &Report, mechanism: ScoreMechanism, sample_size: usize, rep: usize) -> Vec<CellRow> {
    let mut out = Vec::new();
    for m in &report.estimates {
        for e in &m.estimates {
            out.push(CellRow {
                mechanism,
                sample_size,
                rep,
                key: e.key.clone(),
                n: e.n,
                metric: e.metric,
                method: m.method.clone(),
                estimate: e.point,
                intervals: e.intervals.clone(),
                truth: report.truth.as_ref().and_then(|t| t.get(&e.key, e.metric)),
            });
        }
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Error rows for one (mechanism, size) block. Cells enter only where all
/// methods and the truth are defined, so methods are compared on the same
/// cells.
pub fn error_table(rows: &[CellRow], methods: &[String]) -> Vec<ErrorRow> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    // (metric, bin) -> method -> (abs errors, abs percentage errors)
    type Acc = BTreeMap<String, (Vec<f64>, Vec<f64>)>;
    let mut acc: BTreeMap<(String, String), Acc> = BTreeMap::new();
    let mut groups: BTreeMap<(usize, &SubpopKey, String), Vec<&CellRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.rep, &r.key, r.metric.to_string())).or_default().push(r);
    }
    for g in groups.values() {
        let Some(truth) = g[0].truth else { continue };
        let complete = methods
            .iter()
            .all(|m| g.iter().any(|r| &r.method == m && r.estimate.is_some()));
        if !complete {
            continue;
        }
        for r in g {
            let est = r.estimate.expect("checked above");
            let abs = (est - truth).abs();
            for bin in ["all", size_bin(r.n)] {
                let e = acc
                    .entry((r.metric.name().to_string(), bin.to_string()))
                    .or_default()
                    .entry(r.method.clone())
                    .or_default();
                e.0.push(abs);
                if truth != 0.0 {
                    e.1.push(abs / truth.abs());
                }
            }
        }
    }
    let mut metrics: Vec<String> = rows.iter().map(|r| r.metric.name().to_string()).collect();
    metrics.sort();
    metrics.dedup();
    let mut out = Vec::new();
    for metric in &metrics {
        for bin in std::iter::once("all").chain(SIZE_BINS) {
            let cell = acc.get(&(metric.clone(), bin.to_string()));
            let stats = |m: &str| cell.and_then(|c| c.get(m)).map(|(a, p)| (a.len(), mean(a), mean(p)));
            let base = stats("empirical");
            for method in methods {
                let (n_pairs, mae, mape) = stats(method).unwrap_or((0, None, None));
                let ratio = |x: Option<f64>, y: Option<f64>| match (x, y) {
                    (Some(x), Some(y)) if y > 0.0 => Some(x / y),
                    _ => None,
                };
                out.push(ErrorRow {
                    mechanism: first.mechanism,
                    sample_size: first.sample_size,
                    method: method.clone(),
                    metric: metric.clone(),
                    size_bin: bin.to_string(),
                    n_pairs,
                    mae,
                    mape,
                    relative_mae: ratio(mae, base.and_then(|b| b.1)),
                    relative_mape: ratio(mape, base.and_then(|b| b.2)),
                });
            }
        }
    }
    out
}

/// Coverage rows for one (mechanism, size) block.
pub fn coverage_table(rows: &[CellRow], methods: &[String], levels: &[f64]) -> Vec<CoverageRow> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut metrics: Vec<String> = rows.iter().map(|r| r.metric.name().to_string()).collect();
    metrics.sort();
    metrics.dedup();
    let mut out = Vec::new();
    for method in methods {
        for metric in &metrics {
            for bin in std::iter::once("all").chain(SIZE_BINS) {
                for &level in levels {
                    let hits: Vec<(&Interval, f64)> = rows
                        .iter()
                        .filter(|r| &r.method == method && r.metric.name() == metric)
                        .filter(|r| bin == "all" || size_bin(r.n) == bin)
                        .filter_map(|r| Some((r.interval(level)?, r.truth?)))
                        .collect();
                    let covered: Vec<f64> = hits
                        .iter()
                        .map(|(i, t)| f64::from(u8::from(i.lo <= *t && *t <= i.hi)))
                        .collect();
                    let widths: Vec<f64> = hits.iter().map(|(i, _)| i.hi - i.lo).collect();
                    out.push(CoverageRow {
                        mechanism: first.mechanism,
                        sample_size: first.sample_size,
                        method: method.clone(),
                        metric: metric.clone(),
                        size_bin: bin.to_string(),
                        level,
                        n_intervals: hits.len(),
                        coverage: mean(&covered),
                        mean_width: mean(&widths),
                        min_valid_replicates: hits.iter().map(|(i, _)| i.n_valid).min(),
                        max_valid_replicates: hits.iter().map(|(i, _)| i.n_valid).max(),
                    });
                }
            }
        }
    }
    out
}

/// Runs the pipeline on `repetitions` subsamples for every configured
/// mechanism and size. `progress` is called after each repetition.
pub fn run_experiment(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    let Source::Synth { mechanism, n, .. } = &cfg.source else {
        return Err(Error::Config("experiments need a synthetic source".into()));
    };
    let mechanisms = if cfg.experiment.mechanisms.is_empty() {
        vec![*mechanism]
    } else {
        cfg.experiment.mechanisms.clone()
    };
    let sizes = if cfg.experiment.sizes.is_empty() {
        vec![*n]
    } else {
        cfg.experiment.sizes.clone()
    };
    let levels = if cfg.bootstrap.b > 0 {
        cfg.bootstrap.levels.clone()
    } else {
        Vec::new()
    };
    let mut cells = Vec::new();
    let mut errors = Vec::new();
    let mut coverage = Vec::new();
    let mut warnings = Vec::new();
    for &mech in &mechanisms {
        let sc = scenario(cfg, mech)?;
        for &size in &sizes {
            let mut block = Vec::new();
            let mut methods: Vec<String> = Vec::new();
            for rep in 0..cfg.experiment.repetitions {
                let inputs = synth_inputs(cfg, &sc, size, rep)?;
                let seed = indexed(cfg.seed, "repetition", rep as u64);
                let report = Pipeline::new(cfg, inputs, seed, Cache::disabled())?.report()?;
                for m in &report.estimates {
                    if !methods.contains(&m.method) {
                        methods.push(m.method.clone());
                    }
                }
                warnings.extend(report.warnings.iter().map(|w| format!("{mech} n={size} rep={rep}: {w}")));
                block.extend(cell_rows(&report, mech, size, rep));
                progress(&format!("{mech} n={size} rep {}/{}", rep + 1, cfg.experiment.repetitions));
            }
            errors.extend(error_table(&block, &methods));
            coverage.extend(coverage_table(&block, &methods, &levels));
            cells.extend(block);
        }
    }
    Ok(ExperimentReport {
        manifest: ExperimentManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            mechanisms,
            sizes,
            repetitions: cfg.experiment.repetitions,
            levels,
        },
        errors,
        coverage,
        cells,
        warnings,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table<T>(header: &[&str], rows: &[T], f: impl Fn(&T) -> Vec<String>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(f(r))?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Writes `experiment.json`, `errors.csv`, `coverage.csv` and `cells.csv`.
pub fn emit(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let errors = table(
        &["mechanism", "sample_size", "method", "metric", "size_bin", "n_pairs", "mae", "mape", "relative_mae", "relative_mape"],
        &report.errors,
        |r| {
            vec![
                r.mechanism.to_string(),
                r.sample_size.to_string(),
                r.method.clone(),
                r.metric.clone(),
                r.size_bin.clone(),
                r.n_pairs.to_string(),
                opt(r.mae),
                opt(r.mape),
                opt(r.relative_mae),
                opt(r.relative_mape),
            ]
        },
    )?;
    let coverage = table(
        &[
            "mechanism",
            "sample_size",
            "method",
            "metric",
            "size_bin",
            "level",
            "n_intervals",
            "coverage",
            "mean_width",
            "min_valid_replicates",
            "max_valid_replicates",
        ],
        &report.coverage,
        |r| {
            vec![
                r.mechanism.to_string(),
                r.sample_size.to_string(),
                r.method.clone(),
                r.metric.clone(),
                r.size_bin.clone(),
                r.level.to_string(),
                r.n_intervals.to_string(),
                opt(r.coverage),
                opt(r.mean_width),
                opt(r.min_valid_replicates),
                opt(r.max_valid_replicates),
            ]
        },
    )?;
    let cells = table(
        &["mechanism", "sample_size", "rep", "key", "n", "metric", "method", "estimate", "lo95", "hi95", "truth"],
        &report.cells,
        |r| {
            let i = r.interval(0.95);
            vec![
                r.mechanism.to_string(),
                r.sample_size.to_string(),
                r.rep.to_string(),
                r.key.to_string(),
                r.n.to_string(),
                r.metric.name().into(),
                r.method.clone(),
                opt(r.estimate),
                opt(i.map(|i| i.lo)),
                opt(i.map(|i| i.hi)),
                opt(r.truth),
            ]
        },
    )?;
    write_all(
        dir,
        vec![
            ("experiment.json", to_pretty_json(report)?),
            ("errors.csv", errors),
            ("coverage.csv", coverage),
            ("cells.csv", cells),
        ],
    )
}
