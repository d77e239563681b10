//! Nonparametric subsample estimators of AUC, FPR and PPV.
//!
//! AUC counts a tied positive/negative pair as one half, so
//! `auc(pos, neg) + auc(neg, pos) == 1` holds exactly. Thresholded metrics
//! classify a score as positive when it is strictly greater than the threshold.
//!
//! Both AUC routes accumulate twice the Mann-Whitney U in integer arithmetic
//! and divide once, so they agree bit-for-bit with a pairwise count.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{EvalDataset, SubpopKey};
use crate::error::{Class, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricKind {
    Auc,
    Fpr { threshold: f64 },
    Ppv { threshold: f64 },
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Fpr { .. } => "fpr",
            MetricKind::Ppv { .. } => "ppv",
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            MetricKind::Auc => None,
            MetricKind::Fpr { threshold } | MetricKind::Ppv { threshold } => Some(threshold),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold() {
            None => f.write_str(self.name()),
            Some(t) => write!(f, "{}@{}", self.name(), t),
        }
    }
}

/// Scores split by true class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSample {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl ScoreSample {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        if pos.iter().chain(&neg).any(|s| !s.is_finite()) {
            return Err(Error::Data("score sample contains a non-finite value".into()));
        }
        Ok(ScoreSample { pos, neg })
    }

    pub fn from_dataset(d: &EvalDataset) -> Self {
        let mut s = ScoreSample::default();
        for (&y, &score) in d.labels().iter().zip(d.scores()) {
            if y == 1 {
                s.pos.push(score);
            } else {
                s.neg.push(score);
            }
        }
        s
    }

    pub fn pos(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg(&self) -> &[f64] {
        &self.neg
    }

    pub fn sorted(self) -> SortedScores {
        SortedScores::new(self.pos, self.neg)
    }
}

/// Class-split scores sorted ascending; evaluates every metric without
/// re-sorting.
#[derive(Debug, Clone, Default)]
pub struct SortedScores {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl SortedScores {
    /// Takes ownership of finite class-split scores and sorts them.
    pub fn new(mut pos: Vec<f64>, mut neg: Vec<f64>) -> Self {
        pos.sort_unstable_by(f64::total_cmp);
        neg.sort_unstable_by(f64::total_cmp);
        SortedScores { pos, neg }
    }

    pub fn n_pos(&self) -> usize {
        self.pos.len()
    }

    pub fn n_neg(&self) -> usize {
        self.neg.len()
    }

    fn require_both(&self) -> Result<()> {
        if self.pos.is_empty() {
            return Err(Error::InsufficientClass(Class::Positive));
        }
        if self.neg.is_empty() {
            return Err(Error::InsufficientClass(Class::Negative));
        }
        Ok(())
    }

    /// Mann-Whitney AUC from the rank positions of positives among negatives.
    pub fn auc(&self) -> Result<f64> {
        self.require_both()?;
        // twice U: each positive earns 2 per smaller negative and 1 per tie
        let (mut below, mut not_above) = (0usize, 0usize);
        let mut twice_u: u128 = 0;
        for &p in &self.pos {
            while below < self.neg.len() && self.neg[below] < p {
                below += 1;
            }
            not_above = not_above.max(below);
            while not_above < self.neg.len() && self.neg[not_above] <= p {
                not_above += 1;
            }
            twice_u += (below + not_above) as u128;
        }
        Ok(ratio(twice_u, self.pos.len(), self.neg.len()))
    }

    /// Trapezoidal area under the empirical ROC curve, one vertex per distinct
    /// score.
    pub fn auc_roc(&self) -> Result<f64> {
        self.require_both()?;
        let (mut i, mut j) = (self.pos.len(), self.neg.len());
        let (mut tp, mut fp) = (0u128, 0u128);
        let mut twice_area: u128 = 0;
        // sweep the threshold downward through distinct scores
        while i > 0 || j > 0 {
            let top = match (i, j) {
                (0, _) => self.neg[j - 1],
                (_, 0) => self.pos[i - 1],
                _ => self.pos[i - 1].max(self.neg[j - 1]),
            };
            let (tp0, fp0) = (tp, fp);
            while i > 0 && self.pos[i - 1] == top {
                i -= 1;
                tp += 1;
            }
            while j > 0 && self.neg[j - 1] == top {
                j -= 1;
                fp += 1;
            }
            twice_area += (fp - fp0) * (tp0 + tp);
        }
        Ok(ratio(twice_area, self.pos.len(), self.neg.len()))
    }

    fn count_above(sorted: &[f64], threshold: f64) -> usize {
        sorted.len() - sorted.partition_point(|&s| s <= threshold)
    }

    pub fn fpr(&self, threshold: f64) -> Result<f64> {
        if self.neg.is_empty() {
            return Err(Error::InsufficientClass(Class::Negative));
        }
        Ok(Self::count_above(&self.neg, threshold) as f64 / self.neg.len() as f64)
    }

    pub fn ppv(&self, threshold: f64) -> Result<f64> {
        let tp = Self::count_above(&self.pos, threshold);
        let fp = Self::count_above(&self.neg, threshold);
        if tp + fp == 0 {
            return Err(Error::UndefinedMetric { threshold });
        }
        Ok(tp as f64 / (tp + fp) as f64)
    }

    pub fn evaluate(&self, metric: MetricKind) -> Result<f64> {
        match metric {
            MetricKind::Auc => self.auc(),
            MetricKind::Fpr { threshold } => self.fpr(threshold),
            MetricKind::Ppv { threshold } => self.ppv(threshold),
        }
    }

    /// Smallest observed negative score whose FPR does not exceed `target`.
    pub fn threshold_for_fpr(&self, target: f64) -> Result<f64> {
        let n = self.neg.len();
        if n == 0 {
            return Err(Error::InsufficientClass(Class::Negative));
        }
        let mut tau = self.neg[n - 1];
        // walk down distinct values; `end - 1` is the last index of the candidate
        let mut end = n;
        while end > 0 {
            let candidate = self.neg[end - 1];
            if (n - end) as f64 / n as f64 > target {
                break;
            }
            tau = candidate;
            end = self.neg.partition_point(|&s| s < candidate);
        }
        Ok(tau)
    }
}

fn ratio(twice_count: u128, n_pos: usize, n_neg: usize) -> f64 {
    twice_count as f64 / (2 * n_pos as u128 * n_neg as u128) as f64
}

pub fn auc_u_statistic(s: &ScoreSample) -> Result<f64> {
    s.clone().sorted().auc()
}

pub fn auc_roc_integration(s: &ScoreSample) -> Result<f64> {
    s.clone().sorted().auc_roc()
}

pub fn fpr_at(s: &ScoreSample, threshold: f64) -> Result<f64> {
    if s.neg.is_empty() {
        return Err(Error::InsufficientClass(Class::Negative));
    }
    let fp = s.neg.iter().filter(|&&x| x > threshold).count();
    Ok(fp as f64 / s.neg.len() as f64)
}

pub fn ppv_at(s: &ScoreSample, threshold: f64) -> Result<f64> {
    let tp = s.pos.iter().filter(|&&x| x > threshold).count();
    let fp = s.neg.iter().filter(|&&x| x > threshold).count();
    if tp + fp == 0 {
        return Err(Error::UndefinedMetric { threshold });
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

pub fn threshold_for_fpr(s: &ScoreSample, target: f64) -> Result<f64> {
    SortedScores::new(Vec::new(), s.neg.clone()).threshold_for_fpr(target)
}

pub fn evaluate(s: &ScoreSample, metric: MetricKind) -> Result<f64> {
    match metric {
        MetricKind::Auc => auc_u_statistic(s),
        MetricKind::Fpr { threshold } => fpr_at(s, threshold),
        MetricKind::Ppv { threshold } => ppv_at(s, threshold),
    }
}

/// Subsample estimate of `metric` on the records matching `key`.
pub fn empirical_estimate(d: &EvalDataset, key: &SubpopKey, metric: MetricKind) -> Result<f64> {
    let sub = d.subset(key)?;
    evaluate(&ScoreSample::from_dataset(&sub), metric).map_err(|e| e.in_cell(key))
}

/// Linear-interpolation quantile (R type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    quantile_sorted(&v, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sample(pos: &[f64], neg: &[f64]) -> ScoreSample {
        ScoreSample::new(pos.to_vec(), neg.to_vec()).unwrap()
    }

    /// O(n^2) pairwise oracle, returning the same doubled count.
    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut twice: u128 = 0;
        for &p in pos {
            for &n in neg {
                twice += match p.partial_cmp(&n).unwrap() {
                    Ordering::Greater => 2,
                    Ordering::Equal => 1,
                    Ordering::Less => 0,
                };
            }
        }
        ratio(twice, pos.len(), neg.len())
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_u_statistic(&sample(&[3., 4.], &[1., 2.])).unwrap(), 1.0);
        assert_eq!(auc_u_statistic(&sample(&[1., 2.], &[1., 2.])).unwrap(), 0.5);
        assert_eq!(auc_u_statistic(&sample(&[2.], &[1., 3.])).unwrap(), 0.5);
        assert_eq!(auc_roc_integration(&sample(&[3., 4.], &[1., 2.])).unwrap(), 1.0);
        assert_eq!(auc_roc_integration(&sample(&[1.], &[1.])).unwrap(), 0.5);
    }

    #[test]
    fn auc_needs_both_classes() {
        let err = auc_u_statistic(&sample(&[], &[1.])).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass(Class::Positive)));
        let err = auc_roc_integration(&sample(&[1.], &[])).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass(Class::Negative)));
    }

    #[test]
    fn rank_auc_matches_pairwise_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n1 = rng.random_range(1..60);
            let n0 = rng.random_range(1..60);
            // integer-valued scores force many ties
            let pos: Vec<f64> = (0..n1).map(|_| rng.random_range(0..12) as f64).collect();
            let neg: Vec<f64> = (0..n0).map(|_| rng.random_range(0..12) as f64 * 0.9).collect();
            let s = sample(&pos, &neg);
            let oracle = brute_auc(&pos, &neg);
            assert_eq!(auc_u_statistic(&s).unwrap().to_bits(), oracle.to_bits());
            assert_eq!(auc_roc_integration(&s).unwrap().to_bits(), oracle.to_bits());
        }
    }

    #[test]
    fn roc_matches_u_on_continuous_scores() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pos: Vec<f64> = (0..50).map(|_| rng.random::<f64>() + 0.3).collect();
        let neg: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let s = sample(&pos, &neg);
        let a = auc_u_statistic(&s).unwrap();
        let b = auc_roc_integration(&s).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn fpr_examples() {
        let s = sample(&[], &[0.1, 0.2, 0.9]);
        assert_eq!(fpr_at(&s, 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(fpr_at(&sample(&[], &[0.1, 0.2]), 1.0).unwrap(), 0.0);
        assert_eq!(fpr_at(&sample(&[], &[0.5]), 0.5).unwrap(), 0.0);
        assert!(fpr_at(&sample(&[1.0], &[]), 0.5).is_err());
    }

    #[test]
    fn ppv_examples() {
        assert_eq!(ppv_at(&sample(&[0.9, 0.2], &[0.8]), 0.5).unwrap(), 0.5);
        assert_eq!(ppv_at(&sample(&[0.9], &[0.1]), 0.5).unwrap(), 1.0);
        let err = ppv_at(&sample(&[0.1], &[0.2]), 0.5).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric { .. }));
    }

    #[test]
    fn sorted_and_direct_thresholds_agree() {
        let s = sample(&[0.9, 0.2, 0.5], &[0.8, 0.5, 0.1]);
        let sorted = s.clone().sorted();
        for t in [0.0, 0.1, 0.5, 0.85, 1.0] {
            assert_eq!(sorted.fpr(t).unwrap(), fpr_at(&s, t).unwrap());
            assert_eq!(sorted.ppv(t).ok(), ppv_at(&s, t).ok());
        }
    }

    #[test]
    fn threshold_examples() {
        let neg: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = sample(&[], &neg);
        let tau = threshold_for_fpr(&s, 0.01).unwrap();
        assert_eq!(tau, 99.0);
        assert_eq!(fpr_at(&s, tau).unwrap(), 0.01);
        let single = sample(&[], &[5.0]);
        assert_eq!(threshold_for_fpr(&single, 0.01).unwrap(), 5.0);
        assert_eq!(fpr_at(&single, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn empirical_estimate_tags_the_cell() {
        let mut d = EvalDataset::new(vec![crate::dataset::Attribute::new("g", &["a", "b"])], vec![]);
        for (g, y, s) in [(0, 0, 0.1), (0, 1, 0.9), (1, 0, 0.3), (1, 0, 0.4)] {
            d.push(crate::dataset::EvalRecord {
                levels: vec![g],
                covariates: vec![],
                label: y,
                score: s,
            })
            .unwrap();
        }
        let key = SubpopKey::all().bind("g", "b");
        let err = empirical_estimate(&d, &key, MetricKind::Auc).unwrap_err();
        assert!(matches!(err.root(), Error::InsufficientClass(Class::Positive)));
        assert!(err.to_string().contains("g=b"));
        let whole = empirical_estimate(&d, &SubpopKey::all(), MetricKind::Auc).unwrap();
        assert_eq!(whole, auc_u_statistic(&ScoreSample::from_dataset(&d)).unwrap());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], 1..40)
    }

    proptest! {
        #[test]
        fn auc_complement(pos in scores(), neg in scores()) {
            let a = auc_u_statistic(&sample(&pos, &neg)).unwrap();
            let b = auc_u_statistic(&sample(&neg, &pos)).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-15);
        }

        #[test]
        fn auc_invariant_to_monotone_transform(pos in scores(), neg in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (x / 3.0).exp() * 2.0 - 7.0).collect::<Vec<_>>();
            let a = auc_u_statistic(&sample(&pos, &neg)).unwrap();
            let b = auc_u_statistic(&sample(&f(&pos), &f(&neg))).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fpr_nonincreasing(neg in scores(), t1 in -6.0f64..6.0, dt in 0.0f64..4.0) {
            let s = sample(&[], &neg);
            prop_assert!(fpr_at(&s, t1 + dt).unwrap() <= fpr_at(&s, t1).unwrap());
        }

        #[test]
        fn ppv_undefined_only_above_max(pos in scores(), neg in scores(), t in -6.0f64..6.0) {
            let s = sample(&pos, &neg);
            let max = pos.iter().chain(&neg).cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(ppv_at(&s, t).is_err(), max <= t);
        }

        #[test]
        fn threshold_meets_target(neg in scores(), target in 0.001f64..0.999) {
            let s = sample(&[], &neg);
            let tau = threshold_for_fpr(&s, target).unwrap();
            prop_assert!(fpr_at(&s, tau).unwrap() <= target);
            prop_assert!(neg.contains(&tau));
            // no smaller observed negative also satisfies the target
            for &v in neg.iter().filter(|&&v| v < tau) {
                prop_assert!(fpr_at(&s, v).unwrap() > target);
            }
        }
    }
}
