//! Cross-validated model checking against a per-cell KDE baseline.
//!
//! Records are split into `K` folds stratified on (cell, class), or on class
//! alone for (cell, class) groups smaller than `K`. Each held-out record is
//! scored once by the model's posterior predictive density (fitted on the
//! other folds) and once by a Gaussian KDE of the training scores in its own
//! (cell, class). A (cell, class) falls back to the empirical estimator when
//! the KDE wins by more than `margin` standard errors of the paired
//! per-record differences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellPartition, EvalDataset, SubpopKey};
use crate::error::{Error, Result};
use crate::formula::{ModelLayout, ModelSpec};
use crate::inference::{fit, McmcOptions, ModelData};
use crate::metrics::quantile_sorted;
use crate::predictive::PredictiveSims;
use crate::resample::{MetricEstimate, Provenance};
use crate::rng::{indexed, rng_for};

/// Gaussian kernel density estimate with Silverman's bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    train: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    pub fn new(train: &[f64]) -> Result<Kde> {
        if train.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "a KDE needs at least 2 training scores, got {}",
                train.len()
            )));
        }
        let mut sorted = train.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let mut h = 0.9 * spread * n.powf(-0.2);
        let floor = if sd > 0.0 { 1e-3 * sd } else { 1e-3 };
        if !(h >= floor) {
            h = floor;
        }
        Ok(Kde { train: sorted, bandwidth: h })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn logpdf(&self, q: f64) -> f64 {
        let h = self.bandwidth;
        let logs: Vec<f64> = self.train.iter().map(|t| -0.5 * ((q - t) / h).powi(2)).collect();
        let c = -(self.train.len() as f64).ln() - h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_sum_exp(&logs) + c
    }
}

pub fn kde_logpdf(train: &[f64], query: f64) -> Result<f64> {
    Ok(Kde::new(train)?.logpdf(query))
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ModelOk,
    Fallback,
}

/// Out-of-fold comparison for one (cell, class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCheckResult {
    pub key: SubpopKey,
    pub class: u8,
    pub n: usize,
    /// Mean out-of-fold log predictive density of the model.
    pub model_ll: f64,
    /// Mean KDE log density over records that had a KDE baseline.
    pub kde_ll: Option<f64>,
    /// Mean model log density over the same records as `kde_ll`.
    pub paired_model_ll: Option<f64>,
    /// Records with both densities.
    pub n_compared: usize,
    /// Standard error of the paired differences.
    pub se: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub folds: usize,
    /// Posterior draws per fold fit.
    pub draws: usize,
    /// Fallback when `kde_ll - model_ll` exceeds this many standard errors.
    pub margin: f64,
    pub mcmc: McmcOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 5,
            draws: 1000,
            margin: 1.0,
            mcmc: McmcOptions::default(),
        }
    }
}

/// Fold of every record, stratified on (cell, class) when that group has at
/// least `k` members and on class alone otherwise.
pub fn stratified_folds(d: &EvalDataset, part: &CellPartition, k: usize, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for n in 0..d.len() {
        groups.entry((part.membership[n], d.label(n))).or_default().push(n);
    }
    let mut strata: BTreeMap<(bool, usize, u8), Vec<usize>> = BTreeMap::new();
    for ((cell, y), members) in groups {
        let key = if members.len() >= k { (true, cell, y) } else { (false, 0, y) };
        strata.entry(key).or_default().extend(members);
    }
    let mut folds = vec![0; d.len()];
    for (i, (_, mut members)) in strata.into_iter().enumerate() {
        let mut rng = rng_for(seed, "cv-folds", i as u64);
        members.shuffle(&mut rng);
        for (j, n) in members.into_iter().enumerate() {
            folds[n] = j % k;
        }
    }
    folds
}

/// Per-record out-of-fold log densities: (model, KDE if available).
pub fn cv_log_densities(
    spec: &ModelSpec,
    d: &EvalDataset,
    attrs: &[&str],
    opts: &CvOptions,
    seed: u64,
) -> Result<(CellPartition, Vec<f64>, Vec<Option<f64>>)> {
    if opts.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let part = CellPartition::build(d, attrs)?;
    let layout = ModelLayout::new(spec, d)?;
    let folds = stratified_folds(d, &part, opts.folds, seed);
    let per_fold: Vec<Vec<(usize, f64, Option<f64>)>> = (0..opts.folds)
        .into_par_iter()
        .map(|k| {
            let test: Vec<usize> = (0..d.len()).filter(|&n| folds[n] == k).collect();
            let train: Vec<usize> = (0..d.len()).filter(|&n| folds[n] != k).collect();
            if test.is_empty() {
                return Ok(Vec::new());
            }
            let dtrain = d.select(&train);
            let dtest = d.select(&test);
            let (draws, _) = fit(&layout, &dtrain, opts.draws, indexed(seed, "cv-fit", k as u64), &opts.mcmc, false)?;
            let data = ModelData::new(&layout, &dtest)?;
            let r = draws.n_draws();
            let mut lls = vec![vec![0.0; r]; test.len()];
            let mut row = vec![0.0; test.len()];
            for j in 0..r {
                data.log_likelihood_into(&draws.layout, draws.draw(j), &mut row);
                for (t, v) in row.iter().enumerate() {
                    lls[t][j] = *v;
                }
            }
            let mut train_scores: BTreeMap<(usize, u8), Vec<f64>> = BTreeMap::new();
            for &n in &train {
                train_scores
                    .entry((part.membership[n], d.label(n)))
                    .or_default()
                    .push(d.score(n));
            }
            let mut kdes: BTreeMap<(usize, u8), Option<Kde>> = BTreeMap::new();
            Ok(test
                .iter()
                .zip(&lls)
                .map(|(&n, ll)| {
                    let g = (part.membership[n], d.label(n));
                    let kde = kdes
                        .entry(g)
                        .or_insert_with(|| train_scores.get(&g).and_then(|s| Kde::new(s).ok()));
                    (n, log_sum_exp(ll) - (r as f64).ln(), kde.as_ref().map(|k| k.logpdf(d.score(n))))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut model = vec![f64::NAN; d.len()];
    let mut kde = vec![None; d.len()];
    for (n, m, k) in per_fold.into_iter().flatten() {
        model[n] = m;
        kde[n] = k;
    }
    Ok((part, model, kde))
}

/// Compares `spec` with the KDE baseline in every (cell, class) of `attrs`.
pub fn cv_compare(
    spec: &ModelSpec,
    d: &EvalDataset,
    attrs: &[&str],
    opts: &CvOptions,
    seed: u64,
) -> Result<Vec<CellCheckResult>> {
    let (part, model, kde) = cv_log_densities(spec, d, attrs, opts, seed)?;
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for n in 0..d.len() {
        groups.entry((part.membership[n], d.label(n))).or_default().push(n);
    }
    Ok(groups
        .into_iter()
        .map(|((cell, class), members)| {
            let model_ll = members.iter().map(|&n| model[n]).sum::<f64>() / members.len() as f64;
            let paired: Vec<(f64, f64)> = members.iter().filter_map(|&n| kde[n].map(|k| (model[n], k))).collect();
            let m = paired.len();
            let (mut kde_ll, mut paired_model_ll, mut se) = (None, None, None);
            let mut verdict = Verdict::ModelOk;
            if m > 0 {
                kde_ll = Some(paired.iter().map(|p| p.1).sum::<f64>() / m as f64);
                paired_model_ll = Some(paired.iter().map(|p| p.0).sum::<f64>() / m as f64);
            }
            if m >= 2 {
                let diffs: Vec<f64> = paired.iter().map(|(a, b)| b - a).collect();
                let mean = diffs.iter().sum::<f64>() / m as f64;
                let sd = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0)).sqrt();
                let s = sd / (m as f64).sqrt();
                se = Some(s);
                if mean > opts.margin * s {
                    verdict = Verdict::Fallback;
                }
            }
            CellCheckResult {
                key: part.keys[cell].clone(),
                class,
                n: members.len(),
                model_ll,
                kde_ll,
                paired_model_ll,
                n_compared: m,
                se,
                verdict,
            }
        })
        .collect())
}

/// Cells whose check failed in at least one class.
pub fn fallback_cells(checks: &[CellCheckResult]) -> Vec<SubpopKey> {
    let mut out: Vec<SubpopKey> = checks
        .iter()
        .filter(|c| c.verdict == Verdict::Fallback)
        .map(|c| c.key.clone())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Replaces MBM estimates by the empirical ones in cells where the model
/// failed its check. Estimates are matched on (key, metric).
pub fn apply_fallback(
    estimates: &[MetricEstimate],
    checks: &[CellCheckResult],
    empirical: &[MetricEstimate],
) -> Result<Vec<MetricEstimate>> {
    let checked: std::collections::BTreeSet<&SubpopKey> = checks.iter().map(|c| &c.key).collect();
    let failed = fallback_cells(checks);
    estimates
        .iter()
        .map(|est| {
            if !checked.contains(&est.key) {
                return Err(Error::Alignment(format!("no check result for cell {}", est.key)));
            }
            if failed.binary_search(&est.key).is_err() {
                return Ok(est.clone());
            }
            let emp = empirical
                .iter()
                .find(|e| e.key == est.key && e.metric == est.metric)
                .ok_or_else(|| Error::Alignment(format!("no empirical {} estimate for cell {}", est.metric, est.key)))?;
            let model = match &est.provenance {
                Provenance::Mbm { model } | Provenance::Fallback { model } => model.clone(),
                Provenance::Empirical => "empirical".into(),
            };
            Ok(MetricEstimate {
                provenance: Provenance::Fallback { model },
                ..emp.clone()
            })
        })
        .collect()
}

/// Per cell, the candidate (a model name or `"kde"`) with the highest total
/// out-of-fold log density over the records both could score.
pub fn best_ll(results: &[(String, Vec<CellCheckResult>)]) -> BTreeMap<SubpopKey, String> {
    let mut totals: BTreeMap<SubpopKey, Vec<(String, f64)>> = BTreeMap::new();
    for (name, checks) in results {
        let mut per_cell: BTreeMap<&SubpopKey, (f64, f64, bool)> = BTreeMap::new();
        for c in checks {
            let e = per_cell.entry(&c.key).or_insert((0.0, 0.0, true));
            match (c.paired_model_ll, c.kde_ll) {
                (Some(m), Some(k)) => {
                    e.0 += m * c.n_compared as f64;
                    e.1 += k * c.n_compared as f64;
                }
                _ => e.2 = false,
            }
        }
        for (key, (m, k, kde_ok)) in per_cell {
            let entry = totals.entry(key.clone()).or_default();
            entry.push((name.clone(), m));
            if kde_ok && !entry.iter().any(|e| e.0 == "kde") {
                entry.push(("kde".into(), k));
            }
        }
    }
    totals
        .into_iter()
        .map(|(key, cands)| {
            let best = cands
                .into_iter()
                .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            (key, best.0)
        })
        .collect()
}

/// One row of the relative NLL table: model NLL divided by KDE NLL, so the
/// KDE scores 1 and lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeNll {
    pub key: SubpopKey,
    pub class: u8,
    pub model: String,
    pub relative_nll: Option<f64>,
}

pub fn relative_nll(model: &str, checks: &[CellCheckResult]) -> Vec<RelativeNll> {
    checks
        .iter()
        .map(|c| RelativeNll {
            key: c.key.clone(),
            class: c.class,
            model: model.to_string(),
            relative_nll: match (c.paired_model_ll, c.kde_ll) {
                (Some(m), Some(k)) if k != 0.0 => Some(m / k),
                _ => None,
            },
        })
        .collect()
}

/// Observed vs simulated score moments per (cell, class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcRow {
    pub key: SubpopKey,
    pub class: u8,
    pub n: usize,
    pub observed_mean: f64,
    pub observed_sd: f64,
    pub simulated_mean: f64,
    pub simulated_sd: f64,
}

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in v {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, if n > 1.0 { (m2 / (n - 1.0)).sqrt() } else { 0.0 })
}

pub fn ppc_moments(sims: &PredictiveSims, attrs: &[&str]) -> Result<Vec<PpcRow>> {
    let d = sims.data();
    let part = CellPartition::build(d, attrs)?;
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for n in 0..d.len() {
        groups.entry((part.membership[n], d.label(n))).or_default().push(n);
    }
    Ok(groups
        .into_iter()
        .map(|((cell, class), members)| {
            let (om, osd) = moments(members.iter().map(|&n| d.score(n)));
            let (sm, ssd) = moments((0..sims.n_draws()).flat_map(|r| members.iter().map(move |&n| sims.get(n, r))));
            PpcRow {
                key: part.keys[cell].clone(),
                class,
                n: members.len(),
                observed_mean: om,
                observed_sd: osd,
                simulated_mean: sm,
                simulated_sd: ssd,
            }
        })
        .collect())
}
