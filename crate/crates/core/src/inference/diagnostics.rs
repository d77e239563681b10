use serde::{Deserialize, Serialize};

/// Sampler health summary for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub divergences: usize,
    pub mean_accept: f64,
    pub max_tree_depth_hits: usize,
    /// Largest split-R-hat over parameters.
    pub max_rhat: f64,
    /// Smallest bulk effective sample size over parameters.
    pub min_ess: f64,
    pub step_sizes: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SamplerDiagnostics {
    pub fn is_healthy(&self) -> bool {
        self.warnings.is_empty()
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect()
}

/// Split potential scale reduction factor. Each chain is halved; returns 1 for
/// constant draws and NaN when chains are shorter than 4.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) {
        return f64::NAN;
    }
    let parts = split(chains);
    let n = parts[0].len() as f64;
    let stats: Vec<(f64, f64)> = parts.iter().map(|p| mean_var(p)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let (_, b_over_n) = mean_var(&stats.iter().map(|s| s.0).collect::<Vec<_>>());
    if w <= 0.0 {
        return 1.0;
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn autocovariance(c: &[f64], lag: usize) -> f64 {
    let n = c.len();
    c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Effective sample size over split chains, with Geyer's initial monotone
/// sequence estimator of the integrated autocorrelation.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) {
        return f64::NAN;
    }
    let parts = split(chains);
    let m = parts.len() as f64;
    let n = parts[0].len();
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|v| v - mu).collect())
        .collect();
    let acov = |t: usize| centred.iter().map(|c| autocovariance(c, t)).sum::<f64>() / m;
    let w = acov(0) * n as f64 / (n as f64 - 1.0);
    if w <= 0.0 {
        return m * n as f64;
    }
    let b_over_n = if parts.len() > 1 { mean_var(&means).1 } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    let mut pairs = Vec::new();
    let mut t = 0;
    while t + 1 < n {
        let p = rho(t) + rho(t + 1);
        if p <= 0.0 {
            break;
        }
        pairs.push(p);
        t += 2;
    }
    for k in 1..pairs.len() {
        if pairs[k] > pairs[k - 1] {
            pairs[k] = pairs[k - 1];
        }
    }
    let tau = -1.0 + 2.0 * pairs.iter().sum::<f64>();
    let total = m * n as f64;
    total / tau.max(1.0 / total.log10().max(1.0))
}
