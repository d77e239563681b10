//! Semi-synthetic populations with known per-subpopulation metrics.
//!
//! Units are drawn from demographic cells in proportion to their weights,
//! then get log blood pressure and lipid values from the cell's multivariate
//! normal and diabetes / hypertension treatment flags from its Bernoulli
//! probabilities. A risk function maps each unit to a probability; the class
//! is `risk >= 0.10`. Predictive-model scores then follow one of six
//! mechanisms (`none`, `simple`, `interactions`, each optionally `-hetero`).
//!
//! The shipped risk function is a linear-logistic stand-in, and the frame
//! score `f_n` fed to the `interactions` mechanism is its log-odds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, CellPartition, EvalDataset, EvalRecord, SubpopKey};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, SortedScores};
use crate::rng::rng_for;

pub mod constants {
    pub const RISK_CUTOFF: f64 = 0.10;
    pub const FPR_TARGET: f64 = 0.01;

    pub const NONE_BETA_Y: [f64; 2] = [-3.5, -2.0];
    pub const NONE_SIGMA: f64 = 1.25;

    pub const SIMPLE_GRID_HALF_WIDTH: f64 = 0.2;
    pub const SIMPLE_BETA_GENDER: [f64; 2] = [-0.2, 0.2];
    pub const SIMPLE_BETA_Y: [f64; 2] = [-3.0, -2.5];
    pub const SIMPLE_SIGMA: f64 = 0.5;

    pub const INTERACTIONS_GRID_VARIANCE: f64 = 0.2;
    pub const INTERACTIONS_SCORE_WEIGHT: f64 = 0.7;
    pub const INTERACTIONS_MEAN_SCORE_WEIGHT: f64 = 0.3;
    pub const INTERACTIONS_SIGMA: f64 = 0.5;

    pub const HETERO_BASE_FRACTION: f64 = 0.5;
}

use constants::*;

/// The sample population description shipped with the crate.
pub const SAMPLE_POPULATION: &str = include_str!("../data/sample_population.toml");

pub const DEMOGRAPHICS: [&str; 4] = ["gender", "race", "age_bin", "bmi_bin"];
pub const CONTINUOUS: [&str; 4] = ["ln.sysbp", "ln.tc", "ln.hdl", "ln.diabp"];
/// Covariate columns of a generated population, in order.
pub const COVARIATES: [&str; 7] = [
    "ln.sysbp",
    "ln.tc",
    "ln.hdl",
    "ln.diabp",
    "ln.ppbp",
    "diabetes",
    "htn_treatment",
];

/// Population size for full-scale and desk-scale runs.
pub const N_POP_FULL: usize = 5_000_000;
pub const N_POP_DESK: usize = 200_000;

const BLOCK: usize = 1 << 16;
const AGE_HALF_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub key: SubpopKey,
    pub weight: f64,
    /// Midpoint of the cell's age bin; unit ages are uniform within five
    /// years of it.
    pub age_years: f64,
    /// Means of `ln.sysbp, ln.tc, ln.hdl, ln.diabp`.
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
    pub p_diabetes: f64,
    pub p_htn_treatment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub attributes: Vec<Attribute>,
    pub cells: Vec<CellSpec>,
}

struct CompiledCell {
    codes: Vec<u32>,
    male: bool,
    age: f64,
    mean: Vector4<f64>,
    root: Matrix4<f64>,
    p_diabetes: f64,
    p_htn: f64,
}

impl PopulationSpec {
    pub fn from_toml(text: &str) -> Result<PopulationSpec> {
        let spec: PopulationSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PopulationSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PopulationSpec::from_toml(&text)
    }

    pub fn sample() -> PopulationSpec {
        PopulationSpec::from_toml(SAMPLE_POPULATION).expect("shipped population spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        if names != DEMOGRAPHICS {
            return Err(Error::Spec(format!("attributes must be {DEMOGRAPHICS:?}, got {names:?}")));
        }
        if self.cells.is_empty() {
            return Err(Error::Spec("no cells".into()));
        }
        for c in &self.cells {
            let bad = |m: &str| Err(Error::Spec(format!("cell {}: {m}", c.key)));
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return bad("weight must be positive");
            }
            if !(0.0..=1.0).contains(&c.p_diabetes) || !(0.0..=1.0).contains(&c.p_htn_treatment) {
                return bad("probabilities must lie in [0, 1]");
            }
            let m = Matrix4::from_fn(|i, j| c.cov[i][j]);
            if (m - m.transpose()).abs().max() > 1e-12 {
                return bad("covariance is not symmetric");
            }
            let eig = SymmetricEigen::new(m);
            if eig.eigenvalues.min() < -1e-10 * eig.eigenvalues.abs().max().max(1.0) {
                return bad("covariance is not positive semidefinite");
            }
            for (attr, a) in self.attributes.iter().zip(DEMOGRAPHICS) {
                let level = c.key.bindings().get(a);
                match level {
                    Some(l) if attr.level_index(l).is_some() => {}
                    _ => return bad(&format!("missing or unknown `{a}` level")),
                }
            }
        }
        Ok(())
    }

    fn compile(&self) -> Vec<CompiledCell> {
        self.cells
            .iter()
            .map(|c| {
                let m = Matrix4::from_fn(|i, j| c.cov[i][j]);
                let eig = SymmetricEigen::new(m);
                let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let root = eig.eigenvectors * Matrix4::from_diagonal(&sqrt);
                let codes: Vec<u32> = self
                    .attributes
                    .iter()
                    .map(|a| a.level_index(&c.key.bindings()[&a.name]).expect("validated"))
                    .collect();
                CompiledCell {
                    codes,
                    male: c.key.bindings()["gender"] == "M",
                    age: c.age_years,
                    mean: Vector4::from(c.mean),
                    root,
                    p_diabetes: c.p_diabetes,
                    p_htn: c.p_htn_treatment,
                }
            })
            .collect()
    }
}

/// What a risk function sees of one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub male: bool,
    pub age: f64,
    pub ln_sysbp: f64,
    pub ln_tc: f64,
    pub ln_hdl: f64,
    pub ln_diabp: f64,
    pub diabetes: bool,
    pub htn_treatment: bool,
}

pub trait RiskFunction: Sync {
    /// Log-odds of the outcome.
    fn log_odds(&self, unit: &Unit) -> f64;

    fn risk(&self, unit: &Unit) -> f64 {
        1.0 / (1.0 + (-self.log_odds(unit)).exp())
    }
}

/// Linear-logistic stand-in for a cardiovascular risk score.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StandInRisk;

impl RiskFunction for StandInRisk {
    fn log_odds(&self, u: &Unit) -> f64 {
        -2.7 + 0.012 * (u.age - 55.0)
            + 0.25 * f64::from(u8::from(u.male))
            + 2.5 * (u.ln_sysbp - 125f64.ln())
            + 0.4 * f64::from(u8::from(u.htn_treatment))
            + 1.0 * (u.ln_tc - 200f64.ln())
            - 0.9 * (u.ln_hdl - 50f64.ln())
            + 0.6 * f64::from(u8::from(u.diabetes))
    }
}

/// Generated units without predictive-model scores.
#[derive(Debug, Clone)]
pub struct Population {
    /// Demographics, covariates and labels; scores are zero until
    /// [`simulate_scores`] fills them in.
    pub data: EvalDataset,
    /// Risk log-odds `f_n` of every unit.
    pub frame_score: Vec<f64>,
}

pub fn population_schema(spec: &PopulationSpec) -> EvalDataset {
    EvalDataset::new(spec.attributes.clone(), COVARIATES.iter().map(|s| s.to_string()).collect())
}

/// Draws `n_pop` units. Blocks of units use independent RNG streams, so the
/// result is the same for any thread count.
pub fn generate_population(
    spec: &PopulationSpec,
    risk: &dyn RiskFunction,
    cutoff: f64,
    n_pop: usize,
    seed: u64,
) -> Result<Population> {
    spec.validate()?;
    if n_pop == 0 {
        return Err(Error::Spec("population size must be at least 1".into()));
    }
    let cells = spec.compile();
    let pick = WeightedIndex::new(spec.cells.iter().map(|c| c.weight)).map_err(|e| Error::Spec(e.to_string()))?;
    let n_blocks = n_pop.div_ceil(BLOCK);
    let blocks: Vec<Vec<(EvalRecord, f64)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, "population", b as u64);
            let len = BLOCK.min(n_pop - b * BLOCK);
            (0..len)
                .map(|_| {
                    let c = &cells[pick.sample(&mut rng)];
                    let z = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
                    let x = c.mean + c.root * z;
                    let age = c.age + rng.random_range(-AGE_HALF_WIDTH..AGE_HALF_WIDTH);
                    let diabetes = rng.random::<f64>() < c.p_diabetes;
                    let htn = rng.random::<f64>() < c.p_htn;
                    let unit = Unit {
                        male: c.male,
                        age,
                        ln_sysbp: x[0],
                        ln_tc: x[1],
                        ln_hdl: x[2],
                        ln_diabp: x[3],
                        diabetes,
                        htn_treatment: htn,
                    };
                    let f = risk.log_odds(&unit);
                    let y = u8::from(risk.risk(&unit) >= cutoff);
                    let ppbp = (x[0].exp() - x[3].exp()).max(1.0).ln();
                    let rec = EvalRecord {
                        levels: c.codes.clone(),
                        covariates: vec![
                            x[0],
                            x[1],
                            x[2],
                            x[3],
                            ppbp,
                            f64::from(u8::from(diabetes)),
                            f64::from(u8::from(htn)),
                        ],
                        label: y,
                        score: 0.0,
                    };
                    (rec, f)
                })
                .collect()
        })
        .collect();
    let mut data = EvalDataset::with_capacity(
        spec.attributes.clone(),
        COVARIATES.iter().map(|s| s.to_string()).collect(),
        n_pop,
    );
    let mut frame_score = Vec::with_capacity(n_pop);
    for (rec, f) in blocks.into_iter().flatten() {
        data.push(rec)?;
        frame_score.push(f);
    }
    Ok(Population { data, frame_score })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    None,
    Simple,
    Interactions,
}

/// One of the six score mechanisms, written `structure` or
/// `structure-hetero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreMechanism {
    pub structure: Structure,
    pub hetero: bool,
}

impl ScoreMechanism {
    pub const ALL: [&'static str; 6] = [
        "none",
        "none-hetero",
        "simple",
        "simple-hetero",
        "interactions",
        "interactions-hetero",
    ];

    pub fn sigma(&self) -> f64 {
        match self.structure {
            Structure::None => NONE_SIGMA,
            Structure::Simple => SIMPLE_SIGMA,
            Structure::Interactions => INTERACTIONS_SIGMA,
        }
    }
}

impl FromStr for ScoreMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, hetero) = match s.strip_suffix("-hetero") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let structure = match base {
            "none" => Structure::None,
            "simple" => Structure::Simple,
            "interactions" => Structure::Interactions,
            _ => return Err(Error::Config(format!("unknown score mechanism `{s}`"))),
        };
        Ok(ScoreMechanism { structure, hetero })
    }
}

impl fmt::Display for ScoreMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.structure {
            Structure::None => "none",
            Structure::Simple => "simple",
            Structure::Interactions => "interactions",
        };
        f.write_str(base)?;
        if self.hetero {
            f.write_str("-hetero")?;
        }
        Ok(())
    }
}

impl Serialize for ScoreMechanism {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoreMechanism {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `len` evenly spaced values from `-half` to `half`.
pub fn grid(half: f64, len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![-half],
        _ => (0..len)
            .map(|i| -half + 2.0 * half * i as f64 / (len - 1) as f64)
            .collect(),
    }
}

/// Heteroscedastic scale factors: `1 / (1 + exp(mu))` normalized by its
/// maximum, then `sigma_n = fac * sigma + 0.5 * sigma`.
pub fn hetero_sd(mu: &[f64], sigma: f64) -> Vec<f64> {
    let fac: Vec<f64> = mu.iter().map(|m| 1.0 / (1.0 + m.exp())).collect();
    let max = fac.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    fac.iter().map(|f| f / max * sigma + HETERO_BASE_FRACTION * sigma).collect()
}

/// Mean score of every unit under `mech`.
pub fn score_means(pop: &Population, mech: ScoreMechanism) -> Result<Vec<f64>> {
    let d = &pop.data;
    let idx = |name: &str| d.attr_index(name).ok_or_else(|| Error::Spec(format!("population lacks `{name}`")));
    let (g, r, a, b) = (idx("gender")?, idx("race")?, idx("age_bin")?, idx("bmi_bin")?);
    let levels = |i: usize| d.attributes()[i].levels.len();
    let mu: Vec<f64> = match mech.structure {
        Structure::None => d.labels().iter().map(|&y| NONE_BETA_Y[y as usize]).collect(),
        Structure::Simple => {
            if levels(g) != 2 {
                return Err(Error::Spec("the simple mechanism needs a two-level gender".into()));
            }
            let br = grid(SIMPLE_GRID_HALF_WIDTH, levels(r));
            let ba = grid(SIMPLE_GRID_HALF_WIDTH, levels(a));
            let bb = grid(SIMPLE_GRID_HALF_WIDTH, levels(b));
            (0..d.len())
                .map(|n| {
                    let c = d.codes(n);
                    SIMPLE_BETA_GENDER[c[g] as usize]
                        + br[c[r] as usize]
                        + ba[c[a] as usize]
                        + bb[c[b] as usize]
                        + SIMPLE_BETA_Y[d.label(n) as usize]
                })
                .collect()
        }
        Structure::Interactions => {
            let half = INTERACTIONS_GRID_VARIANCE.sqrt();
            let br = grid(half, levels(r));
            let ba = grid(half, levels(a));
            let bg = grid(half, levels(g));
            let bb = grid(half, levels(b));
            let f_bar = pop.frame_score.iter().sum::<f64>() / pop.frame_score.len() as f64;
            (0..d.len())
                .map(|n| {
                    let c = d.codes(n);
                    ba[c[a] as usize] * br[c[r] as usize]
                        + bg[c[g] as usize] * bb[c[b] as usize]
                        + INTERACTIONS_SCORE_WEIGHT * pop.frame_score[n]
                        + INTERACTIONS_MEAN_SCORE_WEIGHT * f_bar
                })
                .collect()
        }
    };
    Ok(mu)
}

/// Scores `s_n = mu_n + sigma_n * eps_n` for every unit.
pub fn simulate_scores(pop: &Population, mech: ScoreMechanism, seed: u64) -> Result<Vec<f64>> {
    let mu = score_means(pop, mech)?;
    let sigma = mech.sigma();
    let sd = if mech.hetero {
        hetero_sd(&mu, sigma)
    } else {
        vec![sigma; mu.len()]
    };
    let mut out = vec![0.0; mu.len()];
    out.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
        let mut rng = rng_for(seed, "scores", b as u64);
        for (i, o) in chunk.iter_mut().enumerate() {
            let n = b * BLOCK + i;
            let e: f64 = StandardNormal.sample(&mut rng);
            *o = mu[n] + sd[n] * e;
        }
    });
    Ok(out)
}

/// Population metrics per cell, at the threshold giving population FPR
/// `fpr_target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub threshold: f64,
    pub population: Vec<(MetricKind, Option<f64>)>,
    pub cells: Vec<TruthCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub key: SubpopKey,
    pub n: usize,
    pub metrics: Vec<(MetricKind, Option<f64>)>,
}

impl GroundTruth {
    pub fn metric_kinds(&self) -> Vec<MetricKind> {
        self.population.iter().map(|p| p.0).collect()
    }

    pub fn get(&self, key: &SubpopKey, metric: MetricKind) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| &c.key == key)?
            .metrics
            .iter()
            .find(|m| m.0 == metric)?
            .1
    }
}

/// AUC, FPR and PPV of the scored population, overall and per cell of `attrs`.
pub fn ground_truth(scored: &EvalDataset, attrs: &[&str], fpr_target: f64) -> Result<GroundTruth> {
    let all = SortedScores::new(
        (0..scored.len()).filter(|&n| scored.label(n) == 1).map(|n| scored.score(n)).collect(),
        (0..scored.len()).filter(|&n| scored.label(n) == 0).map(|n| scored.score(n)).collect(),
    );
    let threshold = all.threshold_for_fpr(fpr_target)?;
    let kinds = [
        MetricKind::Auc,
        MetricKind::Fpr { threshold },
        MetricKind::Ppv { threshold },
    ];
    let population = kinds.iter().map(|&k| (k, all.evaluate(k).ok())).collect();
    let part = CellPartition::build(scored, attrs)?;
    let cells = part
        .members()
        .into_par_iter()
        .enumerate()
        .map(|(c, members)| {
            let (pos, neg): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&n| scored.label(n) == 1);
            let s = SortedScores::new(
                pos.iter().map(|&n| scored.score(n)).collect(),
                neg.iter().map(|&n| scored.score(n)).collect(),
            );
            TruthCell {
                key: part.keys[c].clone(),
                n: members.len(),
                metrics: kinds.iter().map(|&k| (k, s.evaluate(k).ok())).collect(),
            }
        })
        .collect();
    Ok(GroundTruth {
        threshold,
        population,
        cells,
    })
}

/// `n` units drawn uniformly without replacement.
pub fn subsample(pop: &EvalDataset, n: usize, seed: u64) -> Result<EvalDataset> {
    if n > pop.len() {
        return Err(Error::Config(format!("cannot subsample {n} of {} units", pop.len())));
    }
    let mut rng = rng_for(seed, "subsample", 0);
    let idx = rand::seq::index::sample(&mut rng, pop.len(), n).into_vec();
    Ok(pop.select(&idx))
}

/// A scored population together with its mechanism and ground truth.
pub struct Scenario {
    pub mechanism: ScoreMechanism,
    pub population: EvalDataset,
    pub truth: GroundTruth,
}

/// Population, scores and ground truth in one call, with substreams of `seed`.
pub fn build_scenario(
    spec: &PopulationSpec,
    mechanism: ScoreMechanism,
    n_pop: usize,
    attrs: &[&str],
    seed: u64,
) -> Result<Scenario> {
    let pop = generate_population(
        spec,
        &StandInRisk,
        RISK_CUTOFF,
        n_pop,
        crate::rng::substream(seed, "population"),
    )?;
    let scores = simulate_scores(&pop, mechanism, crate::rng::substream(seed, "scores"))?;
    let population = pop.data.with_scores(scores)?;
    let truth = ground_truth(&population, attrs, FPR_TARGET)?;
    Ok(Scenario {
        mechanism,
        population,
        truth,
    })
}
