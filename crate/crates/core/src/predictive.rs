//! Posterior predictive simulation and model-based metric (MBM) estimates.
//!
//! Every record of the dataset gets one simulated score per posterior draw,
//! with covariates held at their observed values. A subpopulation's MBM pools
//! all `n_k x R` simulated scores and applies the ordinary subsample estimator.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{CellPartition, EvalDataset, SubpopKey};
use crate::error::{Error, Result};
use crate::formula::ModelLayout;
use crate::inference::PosteriorDraws;
use crate::metrics::{MetricKind, SortedScores};
use crate::resample::{MetricEstimate, Provenance};
use crate::rng::rng_for;

/// `N x R` simulated scores aligned with the records of `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSims {
    data: EvalDataset,
    n_draws: usize,
    /// Draw-major: the `r`-th block of `N` values is one simulated dataset.
    values: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"MBMSIMS1";

impl PredictiveSims {
    pub fn from_parts(data: EvalDataset, n_draws: usize, values: Vec<f64>) -> Result<PredictiveSims> {
        if values.len() != data.len() * n_draws {
            return Err(Error::Shape(format!(
                "{} simulated values for {} records x {} draws",
                values.len(),
                data.len(),
                n_draws
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite simulated score".into()));
        }
        Ok(PredictiveSims { data, n_draws, values })
    }

    pub fn data(&self) -> &EvalDataset {
        &self.data
    }

    pub fn n_records(&self) -> usize {
        self.data.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    /// Simulated scores of all records under draw `r`.
    pub fn column(&self, r: usize) -> &[f64] {
        let n = self.n_records();
        &self.values[r * n..(r + 1) * n]
    }

    pub fn get(&self, n: usize, r: usize) -> f64 {
        self.values[r * self.n_records() + n]
    }

    /// All simulated scores of `members`, split by class and sorted.
    pub fn pooled(&self, members: &[usize]) -> SortedScores {
        let n_pos = members.iter().filter(|&&n| self.data.label(n) == 1).count();
        let mut pos = Vec::with_capacity(n_pos * self.n_draws);
        let mut neg = Vec::with_capacity((members.len() - n_pos) * self.n_draws);
        for r in 0..self.n_draws {
            let col = self.column(r);
            for &n in members {
                if self.data.label(n) == 1 {
                    pos.push(col[n]);
                } else {
                    neg.push(col[n]);
                }
            }
        }
        SortedScores::new(pos, neg)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_records() as u64).to_le_bytes())?;
        w.write_all(&(self.n_draws as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads sims written by [`write_binary`](Self::write_binary) for `data`.
    pub fn read_binary<R: Read>(mut r: R, data: EvalDataset) -> Result<PredictiveSims> {
        let io = |e| Error::io("<sims>", e);
        let mut head = [0u8; 24];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..8] != MAGIC {
            return Err(Error::Data("not a predictive simulation file".into()));
        }
        let n = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
        let n_draws = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
        if n != data.len() {
            return Err(Error::Stale);
        }
        let mut buf = vec![0u8; n * n_draws * 8];
        r.read_exact(&mut buf).map_err(io)?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        PredictiveSims::from_parts(data, n_draws, values)
    }
}

/// Simulates `s_{n,r} ~ N(mu_n(lambda_r), sigma_n(lambda_r)^2)` for every
/// record of `d` and every draw. Draw `r` uses its own RNG stream, so the
/// result does not depend on thread scheduling.
pub fn simulate_predictive(
    layout: &ModelLayout,
    draws: &PosteriorDraws,
    d: &EvalDataset,
    seed: u64,
) -> Result<PredictiveSims> {
    if draws.model_hash != layout.fingerprint() || !layout.conforms(d) {
        return Err(Error::Stale);
    }
    let (mean, sigma) = layout.design(d)?;
    let n = d.len();
    let mut values = vec![0.0; n * draws.n_draws()];
    if n > 0 {
        values.par_chunks_mut(n).enumerate().for_each(|(r, out)| {
            let mut log_sd = vec![0.0; n];
            draws
                .layout
                .predict(draws.draw(r), &mean, sigma.as_ref(), out, &mut log_sd);
            let mut rng = rng_for(seed, "predictive", r as u64);
            for (o, ls) in out.iter_mut().zip(&log_sd) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *o += ls.exp() * e;
            }
        });
    }
    PredictiveSims::from_parts(d.clone(), draws.n_draws(), values)
}

/// MBM of `metric` on the subpopulation `key`.
pub fn mbm_estimate(sims: &PredictiveSims, key: &SubpopKey, metric: MetricKind) -> Result<f64> {
    let resolved = sims.data.resolve(key)?;
    let members: Vec<usize> = (0..sims.n_records())
        .filter(|&n| resolved.matches(&sims.data, n))
        .collect();
    sims.pooled(&members).evaluate(metric).map_err(|e| e.in_cell(key))
}

/// Metrics for cells given a cell index per record (`None` = no cell).
/// Returns `[cell][metric]`.
pub fn cell_metrics(
    sims: &PredictiveSims,
    cell_of: &[Option<usize>],
    n_cells: usize,
    metrics: &[MetricKind],
) -> Vec<Vec<Result<f64>>> {
    let mut members = vec![Vec::new(); n_cells];
    for (n, c) in cell_of.iter().enumerate() {
        if let Some(c) = c {
            members[*c].push(n);
        }
    }
    members
        .par_iter()
        .map(|m| {
            let pooled = sims.pooled(m);
            metrics.iter().map(|&k| pooled.evaluate(k)).collect()
        })
        .collect()
}

/// MBM point estimates for every non-empty cell of `attrs`, in partition
/// order. Per-cell failures are recorded on the estimate, not returned.
pub fn mbm_all(
    sims: &PredictiveSims,
    attrs: &[&str],
    metrics: &[MetricKind],
    model: &str,
) -> Result<Vec<MetricEstimate>> {
    let part = CellPartition::build(&sims.data, attrs)?;
    let cell_of: Vec<Option<usize>> = part.membership.iter().map(|&c| Some(c)).collect();
    let values = cell_metrics(sims, &cell_of, part.len(), metrics);
    let mut out = Vec::with_capacity(part.len() * metrics.len());
    for (c, row) in values.into_iter().enumerate() {
        for (&metric, v) in metrics.iter().zip(row) {
            out.push(MetricEstimate::point(
                part.keys[c].clone(),
                metric,
                part.counts[c],
                v.map_err(|e| e.in_cell(&part.keys[c])),
                Provenance::Mbm { model: model.to_string() },
            ));
        }
    }
    Ok(out)
}
