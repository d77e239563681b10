mod common;

use common::{phi, toy, two_gaussians};
use mbmeval::dataset::{Attribute, EvalDataset, EvalRecord, SubpopKey};
use mbmeval::formula::{parse_model, ModelLayout};
use mbmeval::inference::{sample_conjugate, ConjugateOptions, PosteriorDraws};
use mbmeval::metrics::{empirical_estimate, MetricKind};
use mbmeval::predictive::{mbm_all, mbm_estimate, simulate_predictive, PredictiveSims};
use mbmeval::Error;

fn conj(l: &ModelLayout, d: &EvalDataset, r: usize, seed: u64) -> PosteriorDraws {
    let opts = ConjugateOptions {
        warmup: 500,
        cache_loglik: false,
    };
    sample_conjugate(l, d, r, seed, &opts).unwrap()
}

fn layout(f: &str, d: &EvalDataset) -> ModelLayout {
    ModelLayout::new(&parse_model(f, None).unwrap(), d).unwrap()
}

#[test]
fn zero_noise_reproduces_scores() {
    let mut d = toy(50, 1.0, 1);
    let s: Vec<f64> = (0..d.len()).map(|n| d.covariates(n)[0]).collect();
    d = d.with_scores(s.clone()).unwrap();
    let l = layout("S ~ 0 + x", &d);
    let draws = PosteriorDraws::new(
        mbmeval::inference::ParamLayout::new(&l),
        vec![1.0, 1e-300, 1.0, 1e-300],
        d.len(),
        l.fingerprint().to_string(),
        d.content_hash(),
    )
    .unwrap();
    let sims = simulate_predictive(&l, &draws, &d, 3).unwrap();
    for r in 0..2 {
        for (a, b) in sims.column(r).iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn column_means_track_linear_predictor() {
    let d = toy(4000, 1.0, 2);
    let l = layout("S ~ g + h + x + Y", &d);
    let draws = conj(&l, &d, 20, 4);
    let sims = simulate_predictive(&l, &draws, &d, 5).unwrap();
    let (x, _) = l.design(&d).unwrap();
    for r in 0..draws.n_draws() {
        let p = draws.draw(r);
        let beta = nalgebra::DVector::from_column_slice(&p[..x.values.ncols()]);
        let mu = &x.values * beta;
        let sigma = p[x.values.ncols()];
        let gap = common::mean(sims.column(r)) - mu.mean();
        assert!(gap.abs() < 3.0 * sigma / (d.len() as f64).sqrt(), "draw {r}: {gap}");
    }
}

/// Posterior predictive CDF of an intercept-only model by 2-D quadrature over
/// (intercept, log sigma) with the sampler's priors.
fn predictive_cdf_quadrature(s: &[f64], q: &[f64]) -> Vec<f64> {
    let n = s.len() as f64;
    let m = s.iter().sum::<f64>() / n;
    let sd = common::sd(s);
    let mut grid = Vec::new();
    let mut max = f64::NEG_INFINITY;
    let k = 400;
    for i in 0..k {
        for j in 0..k {
            let b = m + sd * (-1.5 + 3.0 * i as f64 / (k - 1) as f64);
            let eta = sd.ln() + (-0.8 + 1.6 * j as f64 / (k - 1) as f64);
            let sig = eta.exp();
            let ll: f64 = s.iter().map(|x| -eta - 0.5 * ((x - b) / sig).powi(2)).sum();
            let prior = -0.5 * ((b - m) / 5.0).powi(2) - 2.0 * (sig * sig / (3.0 * 2.5 * 2.5)).ln_1p() + eta;
            max = f64::max(max, ll + prior);
            grid.push((b, sig, ll + prior));
        }
    }
    let z: f64 = grid.iter().map(|g| (g.2 - max).exp()).sum();
    q.iter()
        .map(|&t| grid.iter().map(|g| (g.2 - max).exp() * phi((t - g.0) / g.1)).sum::<f64>() / z)
        .collect()
}

#[test]
fn pooled_sims_match_quadrature_predictive() {
    let d = two_gaussians(40, [0.3, 0.3], 1.2, 0.5, 8);
    let l = layout("S ~ 1", &d);
    let draws = conj(&l, &d, 4000, 9);
    let sims = simulate_predictive(&l, &draws, &d, 10).unwrap();
    let mut all: Vec<f64> = (0..sims.n_draws()).flat_map(|r| sims.column(r).to_vec()).collect();
    all.sort_unstable_by(f64::total_cmp);
    let q: Vec<f64> = [0.1, 0.25, 0.5, 0.75, 0.9]
        .iter()
        .map(|p| mbmeval::metrics::quantile_sorted(&all, *p))
        .collect();
    let oracle = predictive_cdf_quadrature(d.scores(), &q);
    for (i, p) in [0.1, 0.25, 0.5, 0.75, 0.9].iter().enumerate() {
        assert!((oracle[i] - p).abs() < 0.01, "{p}: quadrature {}", oracle[i]);
    }
}

#[test]
fn single_draw_reduces_to_empirical() {
    let d = toy(500, 1.0, 3);
    let l = layout("S ~ g + x + Y", &d);
    let draws = conj(&l, &d, 1, 2);
    let sims = simulate_predictive(&l, &draws, &d, 1).unwrap();
    let simulated = d.with_scores(sims.column(0).to_vec()).unwrap();
    let key = SubpopKey::all().bind("g", "b");
    for m in [MetricKind::Auc, MetricKind::Fpr { threshold: 1.0 }, MetricKind::Ppv { threshold: 1.0 }] {
        assert_eq!(
            mbm_estimate(&sims, &key, m).unwrap(),
            empirical_estimate(&simulated, &key, m).unwrap()
        );
    }
}

#[test]
fn exchangeable_cells_agree() {
    // g does not enter the model, and both g levels hold the same records
    let base = toy(300, 1.0, 4);
    let mut d = EvalDataset::new(base.attributes().to_vec(), base.covariate_names().to_vec());
    for n in 0..base.len() {
        for g in 0..2 {
            let mut rec = base.record(n);
            rec.levels[0] = g;
            d.push(rec).unwrap();
        }
    }
    let l = layout("S ~ x + Y", &d);
    let draws = conj(&l, &d, 2000, 1);
    let sims = simulate_predictive(&l, &draws, &d, 2).unwrap();
    let a = mbm_estimate(&sims, &SubpopKey::all().bind("g", "a"), MetricKind::Auc).unwrap();
    let b = mbm_estimate(&sims, &SubpopKey::all().bind("g", "b"), MetricKind::Auc).unwrap();
    assert!((a - b).abs() < 0.005, "{a} vs {b}");
}

#[test]
fn matching_model_recovers_analytic_auc() {
    let d = two_gaussians(20_000, [-3.5, -2.0], 1.25, 0.4, 12);
    let l = layout("S ~ Y", &d);
    let draws = conj(&l, &d, 500, 3);
    let sims = simulate_predictive(&l, &draws, &d, 4).unwrap();
    let auc = mbm_estimate(&sims, &SubpopKey::all(), MetricKind::Auc).unwrap();
    let truth = phi(1.5 / (1.25 * 2f64.sqrt()));
    assert!((auc - truth).abs() < 0.01, "{auc} vs {truth}");
}

#[test]
fn more_draws_change_little_and_pooling_matches_column_average() {
    let d = toy(3000, 1.0, 6);
    let l = layout("S ~ g + h + x + Y", &d);
    let draws = conj(&l, &d, 4000, 7);
    let small = draws.select(&(0..500).collect::<Vec<_>>());
    let big = simulate_predictive(&l, &draws, &d, 8).unwrap();
    let few = simulate_predictive(&l, &small, &d, 8).unwrap();
    let key = SubpopKey::all().bind("g", "a").bind("h", "q");
    for m in [MetricKind::Auc, MetricKind::Fpr { threshold: 1.5 }, MetricKind::Ppv { threshold: 1.5 }] {
        let a = mbm_estimate(&big, &key, m).unwrap();
        let b = mbm_estimate(&few, &key, m).unwrap();
        assert!((a - b).abs() < 0.01, "{m}: {a} vs {b}");
        assert!((0.0..=1.0).contains(&a));
    }
    let pooled = mbm_estimate(&few, &key, MetricKind::Auc).unwrap();
    let resolved = d.resolve(&key).unwrap();
    let members: Vec<usize> = (0..d.len()).filter(|&n| resolved.matches(&d, n)).collect();
    let per_column: f64 = (0..few.n_draws())
        .map(|r| {
            let sub = d.with_scores(few.column(r).to_vec()).unwrap().select(&members);
            empirical_estimate(&sub, &SubpopKey::all(), MetricKind::Auc).unwrap()
        })
        .sum::<f64>()
        / few.n_draws() as f64;
    assert!((pooled - per_column).abs() < 0.02);
}

#[test]
fn mbm_all_fans_out_and_is_deterministic() {
    let d = toy(400, 1.0, 7);
    let l = layout("S ~ g + Y", &d);
    let draws = conj(&l, &d, 100, 1);
    let sims = simulate_predictive(&l, &draws, &d, 2).unwrap();
    let metrics = [MetricKind::Auc, MetricKind::Fpr { threshold: 1.0 }, MetricKind::Ppv { threshold: 1.0 }];
    let keep: Vec<usize> = (0..d.len()).filter(|&n| d.code(n, 1) < 2).collect();
    let sub = d.select(&keep);
    let sims_sub = PredictiveSims::from_parts(
        sub.clone(),
        sims.n_draws(),
        (0..sims.n_draws())
            .flat_map(|r| keep.iter().map(move |&n| (r, n)))
            .map(|(r, n)| sims.get(n, r))
            .collect(),
    )
    .unwrap();
    let a = mbm_all(&sims_sub, &["g", "h"], &metrics, "m").unwrap();
    assert!(a.len() <= 12 && !a.is_empty());
    assert_eq!(a, mbm_all(&sims_sub, &["g", "h"], &metrics, "m").unwrap());
}

#[test]
fn stale_draws_are_rejected() {
    let d = toy(100, 1.0, 1);
    let l = layout("S ~ g + Y", &d);
    let draws = conj(&l, &d, 10, 1);
    let other = layout("S ~ x + Y", &d);
    assert!(matches!(simulate_predictive(&other, &draws, &d, 1), Err(Error::Stale)));
}

#[test]
fn sims_round_trip_through_binary() {
    let d = toy(80, 1.0, 2);
    let l = layout("S ~ g + Y", &d);
    let draws = conj(&l, &d, 7, 1);
    let sims = simulate_predictive(&l, &draws, &d, 1).unwrap();
    let mut buf = Vec::new();
    sims.write_binary(&mut buf).unwrap();
    assert_eq!(PredictiveSims::read_binary(buf.as_slice(), d.clone()).unwrap(), sims);
    let mut single = EvalDataset::new(vec![Attribute::new("g", &["a"])], vec![]);
    single
        .push(EvalRecord {
            levels: vec![0],
            covariates: vec![],
            label: 0,
            score: 0.0,
        })
        .unwrap();
    assert!(PredictiveSims::read_binary(buf.as_slice(), single).is_err());
}
