//! Bootstrap confidence intervals for empirical and model-based metrics.
//!
//! The exact MBM bootstrap refits the evaluation model on every bootstrap
//! dataset `D_b`. The importance-weighted approximation reuses the draws
//! fitted on `D`: draw `r` gets weight proportional to the likelihood ratio
//! `prod_n p(s_n | lambda_r)^(c_n - 1)`, where `c_n` is how often record `n`
//! appears in `D_b`; weights are capped at `sqrt(R)` times their mean and
//! normalized, and `R_out` draws are resampled from them.
//!
//! Both modes (and the empirical bootstrap) draw `D_b` from the same
//! `(seed, b)` stream, so their replicates are paired.

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellPartition, EvalDataset, SubpopKey};
use crate::error::{Error, Result};
use crate::formula::ModelLayout;
use crate::inference::{fit, McmcOptions, PosteriorDraws};
use crate::metrics::{quantile_sorted, MetricKind, SortedScores};
use crate::predictive::{cell_metrics, simulate_predictive};
use crate::rng::{indexed, rng_for};

/// Where an estimate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Empirical,
    Mbm { model: String },
    /// The model failed its check in this cell; the value is empirical.
    Fallback { model: String },
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Empirical => "empirical".into(),
            Provenance::Mbm { model } => model.clone(),
            Provenance::Fallback { model } => format!("{model}+fallback"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    /// Non-missing replicates the interval was computed from.
    pub n_valid: usize,
}

/// A point estimate for one (subpopulation, metric) with optional bootstrap
/// replicates and intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub key: SubpopKey,
    pub metric: MetricKind,
    /// Records in the subpopulation.
    pub n: usize,
    pub point: Option<f64>,
    pub error: Option<String>,
    pub replicates: Vec<Option<f64>>,
    pub intervals: Vec<Interval>,
    pub provenance: Provenance,
}

impl MetricEstimate {
    pub fn point(key: SubpopKey, metric: MetricKind, n: usize, value: Result<f64>, provenance: Provenance) -> Self {
        let (point, error) = match value {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        MetricEstimate {
            key,
            metric,
            n,
            point,
            error,
            replicates: Vec::new(),
            intervals: Vec::new(),
            provenance,
        }
    }

    /// Stores replicates and derives equal-tailed percentile intervals from
    /// the non-missing ones.
    pub fn set_replicates(&mut self, replicates: Vec<Option<f64>>, levels: &[f64]) {
        let mut valid: Vec<f64> = replicates.iter().flatten().copied().collect();
        valid.sort_unstable_by(f64::total_cmp);
        self.intervals = if valid.is_empty() {
            Vec::new()
        } else {
            levels
                .iter()
                .map(|&level| Interval {
                    level,
                    lo: quantile_sorted(&valid, (1.0 - level) / 2.0),
                    hi: quantile_sorted(&valid, (1.0 + level) / 2.0),
                    n_valid: valid.len(),
                })
                .collect()
        };
        self.replicates = replicates;
    }

    pub fn n_missing(&self) -> usize {
        self.replicates.iter().filter(|r| r.is_none()).count()
    }

    pub fn interval(&self, level: f64) -> Option<&Interval> {
        self.intervals.iter().find(|i| (i.level - level).abs() < 1e-12)
    }

    pub fn covers(&self, level: f64, truth: f64) -> Option<bool> {
        self.interval(level).map(|i| i.lo <= truth && truth <= i.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    Exact,
    ImportanceWeighted,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapPlan {
    pub b: usize,
    pub mode: BootstrapMode,
    pub seed: u64,
    pub levels: Vec<f64>,
    /// Posterior draws per replicate (refit size, or resample size).
    pub r_out: usize,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan {
            b: 100,
            mode: BootstrapMode::ImportanceWeighted,
            seed: 0,
            levels: vec![0.5, 0.95],
            r_out: 1000,
        }
    }
}

impl BootstrapPlan {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.r_out == 0 {
            return Err(Error::Config("bootstrap needs B >= 1 and r_out >= 1".into()));
        }
        if self.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Config("interval levels must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Row indices of bootstrap replicate `b`: `N` uniform draws with replacement.
pub fn bootstrap_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, "bootstrap", b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Multiplicity of every original record in a replicate.
pub fn bootstrap_counts(indices: &[usize], n: usize) -> Vec<u32> {
    let mut c = vec![0u32; n];
    for &i in indices {
        c[i] += 1;
    }
    c
}

pub fn bootstrap_dataset(d: &EvalDataset, seed: u64, b: usize) -> EvalDataset {
    d.select(&bootstrap_indices(d.len(), seed, b))
}

/// Importance weights of one bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    /// `log w~_r` before truncation.
    pub log_raw: Vec<f64>,
    /// Truncated, normalized weights.
    pub weights: Vec<f64>,
    pub ess: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub rows: Vec<WeightRow>,
}

impl WeightMatrix {
    pub fn ess(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ess).collect()
    }

    pub fn median_ess(&self) -> f64 {
        let mut e = self.ess();
        e.sort_unstable_by(f64::total_cmp);
        if e.is_empty() {
            f64::NAN
        } else {
            quantile_sorted(&e, 0.5)
        }
    }
}

/// Caps raw weights (given as logs) at `sqrt(R)` times their mean and
/// normalizes them to sum to one. Works after subtracting the maximum log.
pub fn truncate_normalize(log_raw: &[f64]) -> Vec<f64> {
    let r = log_raw.len() as f64;
    let max = log_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_raw.iter().map(|l| (l - max).exp()).collect();
    let cap = r.sqrt() * (w.iter().sum::<f64>() / r);
    let t: Vec<f64> = w.into_iter().map(|v| v.min(cap)).collect();
    let total: f64 = t.iter().sum();
    t.into_iter().map(|v| v / total).collect()
}

pub fn weight_ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Importance weights approximating the posterior given the replicate with
/// record multiplicities `counts`.
pub fn importance_weights(draws: &PosteriorDraws, d: &EvalDataset, counts: &[u32]) -> Result<WeightRow> {
    let ll = draws
        .loglik()
        .ok_or_else(|| Error::Data("importance weights need the log-likelihood cache".into()))?;
    if draws.data_hash != d.content_hash() || counts.len() != d.len() || draws.n_records() != d.len() {
        return Err(Error::Stale);
    }
    if counts.iter().map(|&c| c as usize).sum::<usize>() != d.len() {
        return Err(Error::Shape("bootstrap counts must sum to N".into()));
    }
    let n = d.len();
    let log_raw: Vec<f64> = (0..draws.n_draws())
        .map(|r| {
            ll[r * n..(r + 1) * n]
                .iter()
                .zip(counts)
                .map(|(l, &c)| (c as f64 - 1.0) * l)
                .sum()
        })
        .collect();
    if log_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite importance weight".into()));
    }
    let weights = truncate_normalize(&log_raw);
    let ess = weight_ess(&weights);
    Ok(WeightRow { log_raw, weights, ess })
}

/// `r_out` draws sampled with replacement proportional to `weights`.
pub fn resample_posterior(draws: &PosteriorDraws, weights: &[f64], r_out: usize, seed: u64) -> Result<PosteriorDraws> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Data(format!("invalid weights: {e}")))?;
    let mut rng = crate::rng::rng(seed);
    let idx: Vec<usize> = (0..r_out).map(|_| dist.sample(&mut rng)).collect();
    Ok(draws.select(&idx))
}

/// Bootstrap results plus importance-weight diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutput {
    pub estimates: Vec<MetricEstimate>,
    /// Per-replicate ESS in importance-weighted mode.
    pub ess: Vec<f64>,
    pub warnings: Vec<String>,
}

fn assemble(
    part: &CellPartition,
    metrics: &[MetricKind],
    points: Vec<Vec<Result<f64>>>,
    replicates: Vec<Vec<Vec<Option<f64>>>>,
    levels: &[f64],
    provenance: &Provenance,
) -> Vec<MetricEstimate> {
    let mut out = Vec::with_capacity(part.len() * metrics.len());
    for (c, row) in points.into_iter().enumerate() {
        for (m, value) in row.into_iter().enumerate() {
            let key = &part.keys[c];
            let mut est = MetricEstimate::point(
                key.clone(),
                metrics[m],
                part.counts[c],
                value.map_err(|e| e.in_cell(key)),
                provenance.clone(),
            );
            est.set_replicates(replicates.iter().map(|rep| rep[c][m]).collect(), levels);
            out.push(est);
        }
    }
    out
}

fn empirical_cells(d: &EvalDataset, cell_of: &[Option<usize>], n_cells: usize, metrics: &[MetricKind]) -> Vec<Vec<Result<f64>>> {
    let mut pos = vec![Vec::new(); n_cells];
    let mut neg = vec![Vec::new(); n_cells];
    for (n, c) in cell_of.iter().enumerate() {
        if let Some(c) = *c {
            if d.label(n) == 1 {
                pos[c].push(d.score(n));
            } else {
                neg[c].push(d.score(n));
            }
        }
    }
    pos.into_iter()
        .zip(neg)
        .map(|(p, q)| {
            let s = SortedScores::new(p, q);
            metrics.iter().map(|&m| s.evaluate(m)).collect()
        })
        .collect()
}

/// Empirical point estimates for every non-empty cell of `attrs`, in
/// partition order.
pub fn empirical_all(d: &EvalDataset, attrs: &[&str], metrics: &[MetricKind]) -> Result<Vec<MetricEstimate>> {
    let part = CellPartition::build(d, attrs)?;
    let all: Vec<Option<usize>> = part.membership.iter().map(|&c| Some(c)).collect();
    let points = empirical_cells(d, &all, part.len(), metrics);
    Ok(assemble(&part, metrics, points, Vec::new(), &[], &Provenance::Empirical))
}

/// Empirical estimates and their bootstrap intervals for every cell of
/// `attrs`.
pub fn empirical_bootstrap(
    d: &EvalDataset,
    plan: &BootstrapPlan,
    attrs: &[&str],
    metrics: &[MetricKind],
) -> Result<Vec<MetricEstimate>> {
    plan.validate()?;
    let part = CellPartition::build(d, attrs)?;
    let all: Vec<Option<usize>> = part.membership.iter().map(|&c| Some(c)).collect();
    let points = empirical_cells(d, &all, part.len(), metrics);
    let replicates: Vec<Vec<Vec<Option<f64>>>> = (0..plan.b)
        .into_par_iter()
        .map(|b| {
            let idx = bootstrap_indices(d.len(), plan.seed, b);
            let cell_of: Vec<Option<usize>> = idx.iter().map(|&i| Some(part.membership[i])).collect();
            let db = d.select(&idx);
            empirical_cells(&db, &cell_of, part.len(), metrics)
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.ok()).collect())
                .collect()
        })
        .collect();
    Ok(assemble(&part, metrics, points, replicates, &plan.levels, &Provenance::Empirical))
}

/// MBM point estimates (from `draws` fitted on `d`) with exact or
/// importance-weighted bootstrap intervals.
#[allow(clippy::too_many_arguments)]
pub fn mbm_bootstrap(
    layout: &ModelLayout,
    draws: &PosteriorDraws,
    d: &EvalDataset,
    plan: &BootstrapPlan,
    attrs: &[&str],
    metrics: &[MetricKind],
    model: &str,
    mcmc: &McmcOptions,
) -> Result<BootstrapOutput> {
    plan.validate()?;
    if plan.mode == BootstrapMode::Empirical {
        return Err(Error::Config("use empirical_bootstrap for the empirical mode".into()));
    }
    let part = CellPartition::build(d, attrs)?;
    let all: Vec<Option<usize>> = part.membership.iter().map(|&c| Some(c)).collect();
    let sims = simulate_predictive(layout, draws, d, indexed(plan.seed, "point-sims", 0))?;
    let points = cell_metrics(&sims, &all, part.len(), metrics);
    drop(sims);

    let replicate = |b: usize| -> Result<(Vec<Vec<Option<f64>>>, f64)> {
        let idx = bootstrap_indices(d.len(), plan.seed, b);
        let db = d.select(&idx);
        let (draws_b, ess) = match plan.mode {
            BootstrapMode::Exact => {
                let (fit_b, _) = fit(layout, &db, plan.r_out, indexed(plan.seed, "refit", b as u64), mcmc, false)?;
                (fit_b, f64::NAN)
            }
            _ => {
                let row = importance_weights(draws, d, &bootstrap_counts(&idx, d.len()))?;
                let resampled = resample_posterior(draws, &row.weights, plan.r_out, indexed(plan.seed, "resample", b as u64))?;
                (resampled, row.ess)
            }
        };
        let sims_b = simulate_predictive(layout, &draws_b, &db, indexed(plan.seed, "replicate-sims", b as u64))?;
        let cell_of: Vec<Option<usize>> = idx.iter().map(|&i| Some(part.membership[i])).collect();
        let vals = cell_metrics(&sims_b, &cell_of, part.len(), metrics)
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.ok()).collect())
            .collect();
        Ok((vals, ess))
    };
    let results: Vec<(Vec<Vec<Option<f64>>>, f64)> = (0..plan.b).into_par_iter().map(replicate).collect::<Result<_>>()?;
    let ess: Vec<f64> = results.iter().map(|r| r.1).filter(|e| e.is_finite()).collect();
    let replicates = results.into_iter().map(|r| r.0).collect();

    let mut warnings = Vec::new();
    if !ess.is_empty() {
        let mut sorted = ess.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let m = quantile_sorted(&sorted, 0.5);
        if m < draws.n_draws() as f64 / 10.0 {
            warnings.push(format!(
                "median importance-weight ESS {m:.1} is below R/10 = {:.1}",
                draws.n_draws() as f64 / 10.0
            ));
        }
    }
    let provenance = Provenance::Mbm { model: model.to_string() };
    Ok(BootstrapOutput {
        estimates: assemble(&part, metrics, points, replicates, &plan.levels, &provenance),
        ess,
        warnings,
    })
}
