#![allow(dead_code)]

use mbmeval::dataset::{Attribute, EvalDataset, EvalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Attributes `g` (2 levels) and `h` (3 levels), covariate `x`, labels with
/// prevalence 0.4 and scores `s = 0.5*g + (h - 1)*0.3 + 1.5*y + 0.7*x + sd*eps`.
pub fn toy(n: usize, sd: f64, seed: u64) -> EvalDataset {
    let mut r = rng(seed);
    let mut d = EvalDataset::new(
        vec![Attribute::new("g", &["a", "b"]), Attribute::new("h", &["p", "q", "r"])],
        vec!["x".into()],
    );
    for _ in 0..n {
        let g = r.random_range(0..2u32);
        let h = r.random_range(0..3u32);
        let y = u8::from(r.random::<f64>() < 0.4);
        let x: f64 = StandardNormal.sample(&mut r);
        let e: f64 = StandardNormal.sample(&mut r);
        let s = 0.5 * g as f64 + (h as f64 - 1.0) * 0.3 + 1.5 * f64::from(y) + 0.7 * x + sd * e;
        d.push(EvalRecord {
            levels: vec![g, h],
            covariates: vec![x],
            label: y,
            score: s,
        })
        .unwrap();
    }
    d
}

/// Two-attribute dataset with a single Gaussian per class and no covariates.
pub fn two_gaussians(n: usize, mu: [f64; 2], sd: f64, prevalence: f64, seed: u64) -> EvalDataset {
    let mut r = rng(seed);
    let mut d = EvalDataset::new(
        vec![Attribute::new("g", &["a", "b"]), Attribute::new("h", &["p", "q", "r"])],
        vec![],
    );
    for _ in 0..n {
        let y = usize::from(r.random::<f64>() < prevalence);
        let e: f64 = StandardNormal.sample(&mut r);
        d.push(EvalRecord {
            levels: vec![r.random_range(0..2), r.random_range(0..3)],
            covariates: vec![],
            label: y as u8,
            score: mu[y] + sd * e,
        })
        .unwrap();
    }
    d
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn phi(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}
