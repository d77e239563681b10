use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{DesignMatrix, ModelLayout, PredictorLayout};

/// Positions of one random-intercept group: its standard deviation and its
/// per-level effects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    pub sd: usize,
    pub effects: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleParams {
    Homoscedastic { sigma: usize },
    LogLinear { coefs: Range<usize>, groups: Vec<GroupParams> },
}

/// Flat parameter vector layout shared by the constrained draws and the
/// unconstrained sampler state (same positions; scales are on the log scale
/// and random effects are standardized in the unconstrained version).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub beta: Range<usize>,
    pub mean_groups: Vec<GroupParams>,
    pub scale: ScaleParams,
}

fn push_groups(
    names: &mut Vec<String>,
    p: &PredictorLayout,
    prefix: &str,
) -> Vec<GroupParams> {
    (0..p.n_groups())
        .map(|g| {
            let gname = p.group_name(g);
            let sd = names.len();
            names.push(format!("sd{prefix}_{gname}"));
            let start = names.len();
            names.extend(p.group_levels(g).iter().map(|l| format!("r{prefix}_{gname}[{l}]")));
            GroupParams {
                sd,
                effects: start..names.len(),
            }
        })
        .collect()
}

impl ParamLayout {
    pub fn new(layout: &ModelLayout) -> ParamLayout {
        let mut names: Vec<String> = layout.mean.fixed_names().iter().map(|c| format!("b_{c}")).collect();
        let beta = 0..names.len();
        let mean_groups = push_groups(&mut names, &layout.mean, "");
        let scale = match &layout.sigma {
            None => {
                names.push("sigma".into());
                ScaleParams::Homoscedastic {
                    sigma: names.len() - 1,
                }
            }
            Some(s) => {
                let start = names.len();
                names.extend(s.fixed_names().iter().map(|c| format!("b_sigma_{c}")));
                let coefs = start..names.len();
                let groups = push_groups(&mut names, s, "_sigma");
                ScaleParams::LogLinear { coefs, groups }
            }
        };
        ParamLayout {
            names,
            beta,
            mean_groups,
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Positions holding scale parameters (group sds and the residual sigma).
    pub fn scale_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.mean_groups.iter().map(|g| g.sd).collect();
        match &self.scale {
            ScaleParams::Homoscedastic { sigma } => out.push(*sigma),
            ScaleParams::LogLinear { groups, .. } => out.extend(groups.iter().map(|g| g.sd)),
        }
        out
    }

    /// Writes `mu_n` and `log sigma_n` for every row of the designs under one
    /// constrained parameter vector.
    pub fn predict(
        &self,
        params: &[f64],
        mean: &DesignMatrix,
        sigma: Option<&DesignMatrix>,
        mu: &mut [f64],
        log_sd: &mut [f64],
    ) {
        linear_predictor(mean, &params[self.beta.clone()], &self.mean_groups, params, mu);
        match (&self.scale, sigma) {
            (ScaleParams::Homoscedastic { sigma }, _) => log_sd.fill(params[*sigma].ln()),
            (ScaleParams::LogLinear { coefs, groups }, Some(z)) => {
                linear_predictor(z, &params[coefs.clone()], groups, params, log_sd)
            }
            (ScaleParams::LogLinear { .. }, None) => panic!("log-linear scale needs a sigma design"),
        }
    }
}

fn linear_predictor(
    design: &DesignMatrix,
    coefs: &[f64],
    groups: &[GroupParams],
    params: &[f64],
    out: &mut [f64],
) {
    let n = design.nrows();
    out.fill(0.0);
    let x = design.values.as_slice();
    for (j, &b) in coefs.iter().enumerate() {
        if b != 0.0 {
            for (o, &v) in out.iter_mut().zip(&x[j * n..(j + 1) * n]) {
                *o += v * b;
            }
        }
    }
    for (gp, gd) in groups.iter().zip(&design.groups) {
        let effects = &params[gp.effects.clone()];
        for (o, &l) in out.iter_mut().zip(&gd.levels) {
            *o += effects[l as usize];
        }
    }
}

/// `R` posterior draws on the constrained scale, with an optional `R x N`
/// cache of per-record log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub layout: ParamLayout,
    values: Vec<f64>,
    loglik: Option<Vec<f64>>,
    n_records: usize,
    /// Fingerprint of the model spec and dataset schema.
    pub model_hash: String,
    /// Fingerprint of the records the log-likelihood cache refers to.
    pub data_hash: String,
}

const MAGIC: &[u8; 8] = b"MBMDRAW1";

impl PosteriorDraws {
    pub fn new(
        layout: ParamLayout,
        values: Vec<f64>,
        n_records: usize,
        model_hash: String,
        data_hash: String,
    ) -> Result<PosteriorDraws> {
        if layout.dim() == 0 || values.is_empty() || values.len() % layout.dim() != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form draws of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(PosteriorDraws {
            layout,
            values,
            loglik: None,
            n_records,
            model_hash,
            data_hash,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.values.len() / self.layout.dim()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn draw(&self, r: usize) -> &[f64] {
        let d = self.dim();
        &self.values[r * d..(r + 1) * d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Draws of parameter `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|r| self.draw(r)[j]).collect()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.column(j).iter().sum::<f64>() / self.n_draws() as f64
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn has_loglik(&self) -> bool {
        self.loglik.is_some()
    }

    pub fn loglik_row(&self, r: usize) -> Option<&[f64]> {
        let n = self.n_records;
        self.loglik.as_ref().map(|ll| &ll[r * n..(r + 1) * n])
    }

    pub fn loglik(&self) -> Option<&[f64]> {
        self.loglik.as_deref()
    }

    pub fn set_loglik(&mut self, loglik: Vec<f64>) -> Result<()> {
        if loglik.len() != self.n_draws() * self.n_records {
            return Err(Error::Shape("log-likelihood cache has the wrong size".into()));
        }
        if loglik.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite log-likelihood in cache".into()));
        }
        self.loglik = Some(loglik);
        Ok(())
    }

    pub fn drop_loglik(&mut self) {
        self.loglik = None;
    }

    /// Draws at `indices` (repeats allowed), carrying their cache rows.
    pub fn select(&self, indices: &[usize]) -> PosteriorDraws {
        let d = self.dim();
        let n = self.n_records;
        let mut values = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            values.extend_from_slice(self.draw(r));
        }
        let loglik = self.loglik.as_ref().map(|ll| {
            let mut out = Vec::with_capacity(indices.len() * n);
            for &r in indices {
                out.extend_from_slice(&ll[r * n..(r + 1) * n]);
            }
            out
        });
        PosteriorDraws {
            layout: self.layout.clone(),
            values,
            loglik,
            n_records: n,
            model_hash: self.model_hash.clone(),
            data_hash: self.data_hash.clone(),
        }
    }

    /// Concatenates draw sets of the same model (chain merge).
    pub fn concat(parts: Vec<PosteriorDraws>) -> Result<PosteriorDraws> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::Shape("no draws to concatenate".into()))?;
        for p in iter {
            if p.layout != out.layout || p.model_hash != out.model_hash {
                return Err(Error::Shape("cannot concatenate draws of different models".into()));
            }
            out.values.extend(p.values);
            out.loglik = match (out.loglik.take(), p.loglik) {
                (Some(mut a), Some(b)) => {
                    a.extend(b);
                    Some(a)
                }
                _ => None,
            };
        }
        Ok(out)
    }

    /// CSV with one column per parameter and one row per draw.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.layout.names)?;
        for r in 0..self.n_draws() {
            w.write_record(self.draw(r).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Reads draws written by [`write_csv`](Self::write_csv) for the model
    /// `layout`; the header must match its parameter names.
    pub fn read_csv<R: Read>(reader: R, layout: &ModelLayout, data_hash: &str, n_records: usize) -> Result<PosteriorDraws> {
        let params = ParamLayout::new(layout);
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != params.names {
            return Err(Error::Stale);
        }
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            for (j, cell) in rec?.iter().enumerate() {
                values.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    column: header[j].clone(),
                    value: cell.to_string(),
                })?);
            }
        }
        PosteriorDraws::new(params, values, n_records, layout.fingerprint().to_string(), data_hash.to_string())
    }

    /// Little-endian binary dump including the log-likelihood cache.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&(
            &self.layout,
            &self.model_hash,
            &self.data_hash,
            self.n_records,
            self.n_draws(),
            self.loglik.is_some(),
        ))
        .expect("metadata serializes");
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(ll) = &self.loglik {
            for v in ll {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<PosteriorDraws> {
        let io = |e| Error::io("<draws>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a posterior draws file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut meta = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut meta).map_err(io)?;
        let (layout, model_hash, data_hash, n_records, n_draws, has_ll): (
            ParamLayout,
            String,
            String,
            usize,
            usize,
            bool,
        ) = serde_json::from_slice(&meta).map_err(|e| Error::Data(format!("draws metadata: {e}")))?;
        let read_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(io)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let values = read_f64s(&mut r, n_draws * layout.dim())?;
        let mut draws = PosteriorDraws::new(layout, values, n_records, model_hash, data_hash)?;
        if has_ll {
            draws.set_loglik(read_f64s(&mut r, n_draws * n_records)?)?;
        }
        Ok(draws)
    }
}
