use std::f64::consts::PI;

use crate::dataset::EvalDataset;
use crate::error::{Error, Result};
use crate::formula::{DesignMatrix, ModelLayout};

use super::draws::{GroupParams, ParamLayout, ScaleParams};
use super::{half_t_log, PriorConfig};

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `theta` and writes its gradient to `grad`.
    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Design matrices, scores and priors of one model fit.
///
/// The sampler works on the unconstrained vector: scales as logs and random
/// effects standardized (`u = tau * z`). The response is centred internally
/// when the mean predictor has an intercept; [`constrain`](Self::constrain)
/// moves the offset back into the intercept.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub params: ParamLayout,
    pub mean: DesignMatrix,
    pub sigma: Option<DesignMatrix>,
    scores: Vec<f64>,
    centred: Vec<f64>,
    offset: f64,
    intercept: Option<usize>,
    prior: PriorConfig,
}

impl ModelData {
    pub fn new(layout: &ModelLayout, d: &EvalDataset) -> Result<ModelData> {
        if d.is_empty() {
            return Err(Error::InsufficientData("empty dataset".into()));
        }
        if d.scores().iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("scores must be finite".into()));
        }
        layout.spec.prior.validate()?;
        let (mean, sigma) = layout.design(d)?;
        let intercept = layout.mean.intercept_column();
        let scores = d.scores().to_vec();
        let offset = if intercept.is_some() {
            scores.iter().sum::<f64>() / scores.len() as f64
        } else {
            0.0
        };
        let centred = scores.iter().map(|s| s - offset).collect();
        Ok(ModelData {
            params: ParamLayout::new(layout),
            mean,
            sigma,
            scores,
            centred,
            offset,
            intercept,
            prior: layout.spec.prior,
        })
    }

    pub fn n_records(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Scores minus the internal offset.
    pub(crate) fn centred(&self) -> &[f64] {
        &self.centred
    }

    pub(crate) fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub(crate) fn beta_prior_sd(&self, j: usize) -> f64 {
        if Some(j) == self.intercept {
            self.prior.intercept_sd
        } else {
            self.prior.fixed_coef_sd
        }
    }

    /// Per-record log density under constrained parameters.
    pub fn log_likelihood(&self, params: &ParamLayout, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_records()];
        self.log_likelihood_into(params, values, &mut out);
        out
    }

    pub fn log_likelihood_into(&self, params: &ParamLayout, values: &[f64], out: &mut [f64]) {
        let n = self.n_records();
        let mut mu = vec![0.0; n];
        let mut log_sd = vec![0.0; n];
        params.predict(values, &self.mean, self.sigma.as_ref(), &mut mu, &mut log_sd);
        let c = 0.5 * (2.0 * PI).ln();
        for i in 0..n {
            let r = (self.scores[i] - mu[i]) * (-log_sd[i]).exp();
            out[i] = -log_sd[i] - c - 0.5 * r * r;
        }
    }

    /// Maps an unconstrained sampler state to constrained parameters.
    pub fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut out = theta.to_vec();
        if let Some(j) = self.intercept {
            out[p.beta.start + j] += self.offset;
        }
        let scale_groups = |out: &mut [f64], groups: &[GroupParams]| {
            for g in groups {
                let tau = theta[g.sd].exp();
                out[g.sd] = tau;
                for k in g.effects.clone() {
                    out[k] = tau * theta[k];
                }
            }
        };
        scale_groups(&mut out, &p.mean_groups);
        match &p.scale {
            ScaleParams::Homoscedastic { sigma } => out[*sigma] = theta[*sigma].exp(),
            ScaleParams::LogLinear { groups, .. } => scale_groups(&mut out, groups),
        }
        out
    }

    /// Inverse of [`constrain`](Self::constrain).
    pub fn unconstrain(&self, values: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut out = values.to_vec();
        if let Some(j) = self.intercept {
            out[p.beta.start + j] -= self.offset;
        }
        let unscale = |out: &mut [f64], groups: &[GroupParams]| {
            for g in groups {
                let tau = values[g.sd];
                out[g.sd] = tau.ln();
                for k in g.effects.clone() {
                    out[k] = values[k] / tau;
                }
            }
        };
        unscale(&mut out, &p.mean_groups);
        match &p.scale {
            ScaleParams::Homoscedastic { sigma } => out[*sigma] = values[*sigma].ln(),
            ScaleParams::LogLinear { groups, .. } => unscale(&mut out, groups),
        }
        out
    }
}

/// `out = X b + sum_g tau_g z_g[level]` with standardized effects.
fn predictor(design: &DesignMatrix, coefs: &[f64], groups: &[GroupParams], theta: &[f64], out: &mut [f64]) {
    let n = design.nrows();
    let x = design.values.as_slice();
    out.fill(0.0);
    for (j, &b) in coefs.iter().enumerate() {
        if b != 0.0 {
            for (o, &v) in out.iter_mut().zip(&x[j * n..(j + 1) * n]) {
                *o += v * b;
            }
        }
    }
    for (gp, gd) in groups.iter().zip(&design.groups) {
        let tau = theta[gp.sd].exp();
        let z = &theta[gp.effects.clone()];
        for (o, &l) in out.iter_mut().zip(&gd.levels) {
            *o += tau * z[l as usize];
        }
    }
}

/// Accumulates gradient contributions of `d` (derivative of the log
/// likelihood with respect to the linear predictor) into coefficients and
/// standardized group effects, adding the group priors.
fn backprop(
    design: &DesignMatrix,
    coefs: std::ops::Range<usize>,
    groups: &[GroupParams],
    theta: &[f64],
    d: &[f64],
    sd_scale: f64,
    grad: &mut [f64],
) -> f64 {
    let n = design.nrows();
    let x = design.values.as_slice();
    for (j, k) in coefs.enumerate() {
        grad[k] += x[j * n..(j + 1) * n].iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut lp = 0.0;
    for (gp, gd) in groups.iter().zip(&design.groups) {
        let mut acc = vec![0.0; gd.n_levels()];
        for (&l, &v) in gd.levels.iter().zip(d) {
            acc[l as usize] += v;
        }
        let tau = theta[gp.sd].exp();
        let (prior_lp, prior_grad) = half_t_log(theta[gp.sd], sd_scale);
        lp += prior_lp;
        let mut dtau = 0.0;
        for (k, a) in gp.effects.clone().zip(acc) {
            let z = theta[k];
            lp -= 0.5 * z * z;
            grad[k] += tau * a - z;
            dtau += z * a;
        }
        grad[gp.sd] += tau * dtau + prior_grad;
    }
    lp
}

impl LogDensity for ModelData {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = &self.params;
        let n = self.n_records();
        grad.fill(0.0);
        let mut mu = vec![0.0; n];
        predictor(&self.mean, &theta[p.beta.clone()], &p.mean_groups, theta, &mut mu);
        let mut eta = vec![0.0; n];
        match &p.scale {
            ScaleParams::Homoscedastic { sigma } => eta.fill(theta[*sigma]),
            ScaleParams::LogLinear { coefs, groups } => predictor(
                self.sigma.as_ref().expect("log-linear scale has a design"),
                &theta[coefs.clone()],
                groups,
                theta,
                &mut eta,
            ),
        }
        let mut lp = 0.0;
        // Reuse the buffers: mu becomes d/dmu, eta becomes d/deta.
        for i in 0..n {
            let inv = (-eta[i]).exp();
            let r = (self.centred[i] - mu[i]) * inv;
            lp -= eta[i] + 0.5 * r * r;
            mu[i] = r * inv;
            eta[i] = r * r - 1.0;
        }
        for (j, k) in p.beta.clone().enumerate() {
            let sd = self.beta_prior_sd(j);
            lp -= 0.5 * (theta[k] / sd).powi(2);
            grad[k] -= theta[k] / (sd * sd);
        }
        lp += backprop(&self.mean, p.beta.clone(), &p.mean_groups, theta, &mu, self.prior.group_sd_scale, grad);
        match &p.scale {
            ScaleParams::Homoscedastic { sigma } => {
                let (plp, pg) = half_t_log(theta[*sigma], self.prior.resid_sd_scale);
                lp += plp;
                grad[*sigma] += eta.iter().sum::<f64>() + pg;
            }
            ScaleParams::LogLinear { coefs, groups } => {
                let sd = self.prior.sigma_coef_sd;
                for k in coefs.clone() {
                    lp -= 0.5 * (theta[k] / sd).powi(2);
                    grad[k] -= theta[k] / (sd * sd);
                }
                lp += backprop(
                    self.sigma.as_ref().expect("log-linear scale has a design"),
                    coefs.clone(),
                    groups,
                    theta,
                    &eta,
                    self.prior.group_sd_scale,
                    grad,
                );
            }
        }
        lp
    }
}

/// Fixed effects moved onto centred, unit-variance columns: `theta = A phi`
/// with `A` triangular, so the target keeps its priors and only picks up a
/// constant Jacobian. Raw covariates far from zero are otherwise nearly
/// collinear with the intercept, which a diagonal metric cannot adapt to.
pub(crate) struct Standardized<'a> {
    inner: &'a ModelData,
    blocks: Vec<Shift>,
}

struct Shift {
    intercept: Option<usize>,
    /// (parameter index, column mean, column scale)
    cols: Vec<(usize, f64, f64)>,
}

impl Shift {
    fn new(design: &DesignMatrix, coefs: std::ops::Range<usize>) -> Shift {
        let n = design.nrows();
        let x = design.values.as_slice();
        let intercept = design.fixed_names.iter().position(|c| c == "(Intercept)");
        let mut cols = Vec::new();
        for (j, k) in coefs.clone().enumerate() {
            if Some(j) == intercept {
                continue;
            }
            let col = &x[j * n..(j + 1) * n];
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-12 {
                cols.push((k, if intercept.is_some() { mean } else { 0.0 }, sd));
            }
        }
        Shift {
            intercept: intercept.map(|j| coefs.start + j),
            cols,
        }
    }
}

impl<'a> Standardized<'a> {
    pub fn new(inner: &'a ModelData) -> Self {
        let p = &inner.params;
        let mut blocks = vec![Shift::new(&inner.mean, p.beta.clone())];
        if let (ScaleParams::LogLinear { coefs, .. }, Some(design)) = (&p.scale, &inner.sigma) {
            blocks.push(Shift::new(design, coefs.clone()));
        }
        Standardized { inner, blocks }
    }

    pub fn to_theta(&self, phi: &[f64]) -> Vec<f64> {
        let mut theta = phi.to_vec();
        for b in &self.blocks {
            for &(k, m, s) in &b.cols {
                theta[k] = phi[k] / s;
                if let Some(i) = b.intercept {
                    theta[i] -= m * phi[k] / s;
                }
            }
        }
        theta
    }
}

impl LogDensity for Standardized<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density_grad(&self, phi: &[f64], grad: &mut [f64]) -> f64 {
        let lp = self.inner.log_density_grad(&self.to_theta(phi), grad);
        for b in &self.blocks {
            let g0 = b.intercept.map_or(0.0, |i| grad[i]);
            for &(k, m, s) in &b.cols {
                grad[k] = (grad[k] - m * g0) / s;
            }
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Attribute, EvalRecord};
    use crate::formula::parse_model;
    use rand::{Rng, SeedableRng};

    fn data(n: usize) -> EvalDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut d = EvalDataset::new(
            vec![Attribute::new("g", &["a", "b", "c"]), Attribute::new("h", &["x", "y"])],
            vec!["x1".into()],
        );
        for _ in 0..n {
            d.push(EvalRecord {
                levels: vec![rng.random_range(0..3), rng.random_range(0..2)],
                covariates: vec![rng.random_range(-1.0..1.0)],
                label: rng.random_range(0..2),
                score: rng.random_range(-2.0..2.0),
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn constrain_round_trips() {
        let d = data(40);
        let spec = parse_model("S ~ g + Y + (1 | h)", Some("sigma ~ Y + (1 | g)")).unwrap();
        let m = ModelData::new(&ModelLayout::new(&spec, &d).unwrap(), &d).unwrap();
        let theta: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = m.unconstrain(&m.constrain(&theta));
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn density_and_likelihood_agree_up_to_priors() {
        // With a flat part removed, changing only beta shifts log density by
        // the likelihood change plus the prior change.
        let d = data(30);
        let spec = parse_model("S ~ g + x1", None).unwrap();
        let m = ModelData::new(&ModelLayout::new(&spec, &d).unwrap(), &d).unwrap();
        let mut g = vec![0.0; m.dim()];
        let t0 = vec![0.1, 0.2, -0.3, 0.4, 0.0];
        let mut t1 = t0.clone();
        t1[3] = -0.2;
        let ll = |t: &[f64]| m.log_likelihood(&m.params, &m.constrain(t)).iter().sum::<f64>();
        let prior = |t: &[f64]| -0.5 * (t[3] / 5.0f64).powi(2);
        let dl = m.log_density_grad(&t1, &mut g) - m.log_density_grad(&t0, &mut g);
        assert!((dl - (ll(&t1) - ll(&t0) + prior(&t1) - prior(&t0))).abs() < 1e-9);
    }

    #[test]
    fn standardized_gradient_matches_differences() {
        let mut d = data(60);
        let shifted: Vec<f64> = (0..d.len()).map(|n| 4.8 + 0.1 * d.covariates(n)[0]).collect();
        d = {
            let mut e = EvalDataset::new(d.attributes().to_vec(), vec!["x1".into()]);
            for n in 0..d.len() {
                let mut r = d.record(n);
                r.covariates[0] = shifted[n];
                e.push(r).unwrap();
            }
            e
        };
        let spec = parse_model("S ~ g + x1", Some("sigma ~ h + x1")).unwrap();
        let m = ModelData::new(&ModelLayout::new(&spec, &d).unwrap(), &d).unwrap();
        let t = Standardized::new(&m);
        let phi: Vec<f64> = (0..t.dim()).map(|i| (i as f64 * 0.7).cos() * 0.5).collect();
        let mut g = vec![0.0; t.dim()];
        let lp = t.log_density_grad(&phi, &mut g);
        let mut scratch = vec![0.0; t.dim()];
        assert_eq!(lp, m.log_density_grad(&t.to_theta(&phi), &mut scratch));
        for j in 0..t.dim() {
            let (mut up, mut dn) = (phi.clone(), phi.clone());
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let fd = (t.log_density_grad(&up, &mut scratch) - t.log_density_grad(&dn, &mut scratch)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-4 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }
}
