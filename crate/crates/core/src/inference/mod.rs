//! Posterior inference for Gaussian evaluation models
//!
//! ```text
//! s_n ~ N(mu_n, sigma_n^2)
//! mu_n = x_n' beta + sum_g u_g[cell_g(n)],          u_g = tau_g * z_g,  z_g ~ N(0, I)
//! log sigma_n = z_n' gamma + sum_h v_h[cell_h(n)]   (or a single sigma)
//! ```
//!
//! Priors: `beta ~ N(0, fixed_coef_sd^2)` (intercept `N(0, intercept_sd^2)`)
//! on the internally centred response, half-Student-t(3) on every scale,
//! `gamma ~ N(0, sigma_coef_sd^2)`.
//!
//! Homoscedastic fixed-effects models use a Gibbs sampler ([`sample_conjugate`]);
//! everything else runs multinomial NUTS ([`sample_mcmc`]) on the
//! non-centred, log-scale parameterization.

mod conjugate;
mod diagnostics;
mod draws;
mod model;
mod nuts;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use conjugate::{sample_conjugate, ConjugateOptions};
pub use diagnostics::{ess, split_rhat, SamplerDiagnostics};
pub use draws::{GroupParams, ParamLayout, PosteriorDraws, ScaleParams};
pub use model::{LogDensity, ModelData};
pub use nuts::{sample_mcmc, McmcOptions};

use crate::dataset::EvalDataset;
use crate::error::{Error, Result};
use crate::formula::ModelLayout;

/// Default number of retained posterior draws.
pub const DEFAULT_DRAWS: usize = 4000;

/// Degrees of freedom of the half-Student-t scale priors.
pub const HALF_T_DF: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub fixed_coef_sd: f64,
    pub intercept_sd: f64,
    pub group_sd_scale: f64,
    pub resid_sd_scale: f64,
    pub sigma_coef_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            fixed_coef_sd: 5.0,
            intercept_sd: 5.0,
            group_sd_scale: 2.5,
            resid_sd_scale: 2.5,
            sigma_coef_sd: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.fixed_coef_sd,
            self.intercept_sd,
            self.group_sd_scale,
            self.resid_sd_scale,
            self.sigma_coef_sd,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("prior scales must be positive and finite".into()))
        }
    }
}

/// Log density of a half-Student-t(`HALF_T_DF`, 0, `scale`) prior evaluated on
/// `log tau`, including the log-Jacobian, up to a constant; and its derivative
/// with respect to `log tau`.
pub(crate) fn half_t_log(log_tau: f64, scale: f64) -> (f64, f64) {
    let nu = HALF_T_DF;
    let tau2 = (2.0 * log_tau).exp();
    let a2 = nu * scale * scale;
    let lp = -(nu + 1.0) / 2.0 * (tau2 / a2).ln_1p() + log_tau;
    let grad = -(nu + 1.0) * tau2 / (a2 + tau2) + 1.0;
    (lp, grad)
}

/// Per-record Gaussian log density of the scores under one parameter draw
/// (constrained scale).
pub fn log_likelihood(layout: &ModelLayout, params: &[f64], d: &EvalDataset) -> Result<Vec<f64>> {
    let data = ModelData::new(layout, d)?;
    let param_layout = ParamLayout::new(layout);
    if params.len() != param_layout.dim() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, model needs {}",
            params.len(),
            param_layout.dim()
        )));
    }
    Ok(data.log_likelihood(&param_layout, params))
}

/// `R x N` per-record log-likelihoods of every draw, row-major.
pub(crate) fn cache_loglik(data: &ModelData, draws: &PosteriorDraws) -> Vec<f64> {
    let n = data.n_records();
    let mut out = vec![0.0; draws.n_draws() * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| data.log_likelihood_into(&draws.layout, draws.draw(r), row));
    out
}

/// Fits `layout` with the Gibbs sampler when the model is conjugate and NUTS
/// otherwise.
pub fn fit(
    layout: &ModelLayout,
    d: &EvalDataset,
    draws: usize,
    seed: u64,
    mcmc: &McmcOptions,
    cache_loglik: bool,
) -> Result<(PosteriorDraws, Option<SamplerDiagnostics>)> {
    if layout.spec.is_conjugate() {
        let opts = ConjugateOptions {
            warmup: mcmc.warmup,
            cache_loglik,
        };
        Ok((sample_conjugate(layout, d, draws, seed, &opts)?, None))
    } else {
        let opts = McmcOptions {
            cache_loglik,
            ..mcmc.clone()
        };
        let (draws, diag) = sample_mcmc(layout, d, draws, seed, &opts)?;
        Ok((draws, Some(diag)))
    }
}
