use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::EvalDataset;
use crate::error::{Error, Result};
use crate::formula::ModelLayout;
use crate::rng::{rng_for, Rng};

use super::draws::{PosteriorDraws, ScaleParams};
use super::half_t_log;
use super::model::ModelData;

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateOptions {
    pub warmup: usize,
    pub cache_loglik: bool,
}

impl Default for ConjugateOptions {
    fn default() -> Self {
        ConjugateOptions {
            warmup: 1000,
            cache_loglik: true,
        }
    }
}

/// One univariate slice-sampling update (stepping out, then shrinkage).
pub(crate) fn slice_step(x0: f64, w: f64, rng: &mut Rng, f: impl Fn(f64) -> f64) -> f64 {
    let fx = f(x0);
    let level = fx + (1.0 - rng.random::<f64>()).ln();
    let mut lo = x0 - w * rng.random::<f64>();
    let mut hi = lo + w;
    let mut steps = 64;
    while steps > 0 && f(lo) > level {
        lo -= w;
        steps -= 1;
    }
    steps = 64;
    while steps > 0 && f(hi) > level {
        hi += w;
        steps -= 1;
    }
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if f(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-14 {
            return x0;
        }
    }
}

/// Gibbs sampler for homoscedastic fixed-effects models: `beta | sigma` is
/// Gaussian and `log sigma | beta` is slice sampled under its half-t prior.
/// Sufficient statistics are formed once, so each sweep costs `O(P^3)`.
pub fn sample_conjugate(
    layout: &ModelLayout,
    d: &EvalDataset,
    draws: usize,
    seed: u64,
    opts: &ConjugateOptions,
) -> Result<PosteriorDraws> {
    if !layout.spec.is_conjugate() {
        return Err(Error::Unsupported(format!(
            "the conjugate sampler needs a homoscedastic fixed-effects model, got `{}`",
            layout.spec
        )));
    }
    if draws == 0 {
        return Err(Error::Config("at least one draw is required".into()));
    }
    let data = ModelData::new(layout, d)?;
    let x = &data.mean.values;
    let p = x.ncols();
    let n = data.n_records() as f64;
    let s = DVector::from_column_slice(data.centred());
    let xtx = x.tr_mul(x);
    let xts = x.tr_mul(&s);
    let sts = s.dot(&s);
    let prior_prec = DVector::from_iterator(p, (0..p).map(|j| data.beta_prior_sd(j).powi(-2)));
    let resid_scale = data.prior().resid_sd_scale;
    let sigma_pos = match data.params.scale {
        ScaleParams::Homoscedastic { sigma } => sigma,
        ScaleParams::LogLinear { .. } => unreachable!("checked conjugate"),
    };

    let mut rng = rng_for(seed, "conjugate", 0);
    let mut eta = (sts / n).sqrt().max(1e-3).ln();
    let mut values = Vec::with_capacity(draws * data.params.dim());
    for it in 0..opts.warmup + draws {
        let inv_var = (-2.0 * eta).exp();
        let mut q: DMatrix<f64> = &xtx * inv_var;
        for j in 0..p {
            q[(j, j)] += prior_prec[j];
        }
        let chol = q
            .cholesky()
            .ok_or_else(|| Error::LinAlg("posterior precision is not positive definite".into()))?;
        let mean = chol.solve(&(&xts * inv_var));
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let noise = chol
            .l()
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| Error::LinAlg("singular Cholesky factor".into()))?;
        let beta = mean + noise;

        let ssr = (sts - 2.0 * beta.dot(&xts) + beta.dot(&(&xtx * &beta))).max(0.0);
        let target = |e: f64| -n * e - 0.5 * ssr * (-2.0 * e).exp() + half_t_log(e, resid_scale).0;
        eta = slice_step(eta, 1.0, &mut rng, target);

        if it >= opts.warmup {
            let mut theta = beta.as_slice().to_vec();
            theta.push(eta);
            debug_assert_eq!(theta.len() - 1, sigma_pos);
            values.extend(data.constrain(&theta));
        }
    }
    let mut out = PosteriorDraws::new(
        data.params.clone(),
        values,
        d.len(),
        layout.fingerprint().to_string(),
        d.content_hash(),
    )?;
    if opts.cache_loglik {
        out.set_loglik(super::cache_loglik(&data, &out))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn slice_sampler_recovers_normal_moments() {
        let mut r = rng(5);
        let mut x = 0.0;
        let mut xs = Vec::new();
        for _ in 0..20000 {
            x = slice_step(x, 1.0, &mut r, |v| -0.5 * ((v - 2.0) / 0.5f64).powi(2));
            xs.push(x);
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((m - 2.0).abs() < 0.02, "{m}");
        assert!((v - 0.25).abs() < 0.02, "{v}");
    }
}
