//! The evaluation procedure: empirical estimates, then per model fit, check,
//! MBM, bootstrap and fallback merge.

use std::fs;
use std::path::{Path, PathBuf};

use mbmeval::checking::{apply_fallback, best_ll, cv_compare, relative_nll, CellCheckResult, CvOptions};
use mbmeval::dataset::{CellPartition, EvalDataset};
use mbmeval::formula::{ModelLayout, ModelSpec};
use mbmeval::inference::{fit, PosteriorDraws, SamplerDiagnostics};
use mbmeval::metrics::{MetricKind, SortedScores};
use mbmeval::predictive::{mbm_all, simulate_predictive, PredictiveSims};
use mbmeval::resample::{empirical_all, BootstrapMode, empirical_bootstrap, mbm_bootstrap, BootstrapOutput, MetricEstimate, Provenance};
use mbmeval::rng::{indexed, substream};
use mbmeval::synth::{build_scenario, subsample, GroundTruth, PopulationSpec, Scenario, ScoreMechanism};
use mbmeval::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{digest, RunConfig, Source};
use crate::report::{BestLl, Manifest, MethodEstimates, ModelChecks, ModelSummary, Report};

/// The evaluation dataset with its metrics and, for synthetic sources, the
/// population ground truth.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub data: EvalDataset,
    pub metrics: Vec<MetricKind>,
    pub truth: Option<GroundTruth>,
}

pub fn metric_kinds(cfg: &RunConfig, threshold: f64) -> Vec<MetricKind> {
    cfg.metrics
        .kinds
        .iter()
        .map(|k| match k.as_str() {
            "auc" => MetricKind::Auc,
            "fpr" => MetricKind::Fpr { threshold },
            _ => MetricKind::Ppv { threshold },
        })
        .collect()
}

/// Synthetic population for `mechanism`, shared by all repetitions.
pub fn scenario(cfg: &RunConfig, mechanism: ScoreMechanism) -> Result<Scenario> {
    let Source::Synth { n_pop, population, .. } = &cfg.source else {
        return Err(Error::Config("a synthetic source is required".into()));
    };
    let spec = match population {
        Some(p) => PopulationSpec::load(p)?,
        None => PopulationSpec::sample(),
    };
    build_scenario(&spec, mechanism, *n_pop, &cfg.attrs(), substream(cfg.seed, "scenario"))
}

/// Subsample `rep` of a scenario, scored with the ground-truth threshold.
pub fn synth_inputs(cfg: &RunConfig, sc: &Scenario, n: usize, rep: usize) -> Result<Inputs> {
    let data = subsample(&sc.population, n, indexed(cfg.seed, "sample", rep as u64))?;
    Ok(Inputs {
        data,
        metrics: metric_kinds(cfg, sc.truth.threshold),
        truth: Some(sc.truth.clone()),
    })
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    match &cfg.source {
        Source::Csv { path, schema } => {
            let data = EvalDataset::load_csv(path, schema)?;
            let threshold = match cfg.metrics.threshold {
                Some(t) => t,
                None => {
                    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&n| data.label(n) == 1);
                    SortedScores::new(
                        pos.iter().map(|&n| data.score(n)).collect(),
                        neg.iter().map(|&n| data.score(n)).collect(),
                    )
                    .threshold_for_fpr(cfg.metrics.fpr_target)?
                }
            };
            Ok(Inputs {
                metrics: metric_kinds(cfg, threshold),
                data,
                truth: None,
            })
        }
        Source::Synth { mechanism, n, .. } => {
            let sc = scenario(cfg, *mechanism)?;
            synth_inputs(cfg, &sc, *n, 0)
        }
    }
}

/// Persisted intermediates under `<output>/cache`, keyed by content hashes.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn disabled() -> Cache {
        Cache { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Cache {
        Cache { dir: Some(dir.into()) }
    }

    fn path(&self, stage: &str, name: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}-{name}-{}.{ext}", &key[..16])))
    }

    fn json<T: Serialize + DeserializeOwned>(
        &self,
        stage: &str,
        name: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let Some(path) = self.path(stage, name, key, "json") else {
            return compute();
        };
        if let Ok(text) = fs::read(&path) {
            if let Ok(v) = serde_json::from_slice(&text) {
                return Ok(v);
            }
        }
        let v = compute()?;
        write_file(&path, &to_json(&v)?)?;
        Ok(v)
    }
}

pub fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub draws: PosteriorDraws,
    pub diagnostics: Option<SamplerDiagnostics>,
}

pub struct Pipeline<'a> {
    pub cfg: &'a RunConfig,
    pub inputs: Inputs,
    pub seed: u64,
    cache: Cache,
    specs: Vec<ModelSpec>,
    layouts: Vec<ModelLayout>,
}

impl<'a> Pipeline<'a> {
    /// Fails on models that do not resolve against the data.
    pub fn new(cfg: &'a RunConfig, inputs: Inputs, seed: u64, cache: Cache) -> Result<Pipeline<'a>> {
        let specs: Vec<ModelSpec> = cfg
            .active_models()
            .iter()
            .map(|m| m.spec(cfg.sampler.prior))
            .collect::<Result<_>>()?;
        let layouts = specs
            .iter()
            .map(|s| ModelLayout::new(s, &inputs.data))
            .collect::<Result<_>>()?;
        CellPartition::build(&inputs.data, &cfg.attrs())?;
        Ok(Pipeline {
            cfg,
            inputs,
            seed,
            cache,
            specs,
            layouts,
        })
    }

    pub fn n_models(&self) -> usize {
        self.specs.len()
    }

    pub fn model_name(&self, m: usize) -> &str {
        &self.cfg.active_models()[m].name
    }

    fn key<T: Serialize>(&self, stage: &str, extra: &T) -> String {
        digest(&(
            stage,
            self.inputs.data.content_hash(),
            self.cfg.attrs(),
            &self.inputs.metrics,
            self.seed,
            extra,
        ))
    }

    fn posterior_key(&self, m: usize) -> String {
        self.key("posterior", &(&self.specs[m], &self.cfg.sampler, self.needs_loglik()))
    }

    /// Importance-weighted bootstrapping reuses the per-record log-likelihoods.
    fn needs_loglik(&self) -> bool {
        self.bootstrap_on() && self.cfg.bootstrap.mode == BootstrapMode::ImportanceWeighted
    }

    pub fn posterior(&self, m: usize) -> Result<Posterior> {
        let key = self.posterior_key(m);
        let name = self.model_name(m);
        let draws_path = self.cache.path("draws", name, &key, "bin");
        let diag_path = self.cache.path("diagnostics", name, &key, "json");
        if let (Some(dp), Some(jp)) = (&draws_path, &diag_path) {
            // the diagnostics file is written last, so its presence implies
            // complete draws
            if let (Ok(d), Ok(j)) = (fs::read(dp), fs::read(jp)) {
                if let (Ok(draws), Ok(diagnostics)) = (PosteriorDraws::read_binary(d.as_slice()), serde_json::from_slice(&j)) {
                    return Ok(Posterior { draws, diagnostics });
                }
            }
        }
        let (draws, diagnostics) = fit(
            &self.layouts[m],
            &self.inputs.data,
            self.cfg.sampler.draws,
            indexed(self.seed, "fit", m as u64),
            &self.cfg.sampler.mcmc(),
            self.needs_loglik(),
        )?;
        if let (Some(dp), Some(jp)) = (&draws_path, &diag_path) {
            let mut buf = Vec::new();
            draws.write_binary(&mut buf).map_err(|e| Error::io(dp, e))?;
            write_file(dp, &buf)?;
            write_file(jp, &to_json(&diagnostics)?)?;
        }
        Ok(Posterior { draws, diagnostics })
    }

    fn sims_path(&self, m: usize) -> Option<PathBuf> {
        self.cache.path("sims", self.model_name(m), &self.posterior_key(m), "bin")
    }

    /// Posterior predictive scores for every record, one column per draw.
    pub fn sims(&self, m: usize, post: &Posterior) -> Result<PredictiveSims> {
        if let Some(p) = self.sims_path(m) {
            if let Ok(bytes) = fs::read(&p) {
                if let Ok(s) = PredictiveSims::read_binary(bytes.as_slice(), self.inputs.data.clone()) {
                    return Ok(s);
                }
            }
        }
        simulate_predictive(
            &self.layouts[m],
            &post.draws,
            &self.inputs.data,
            indexed(self.seed, "sims", m as u64),
        )
    }

    pub fn save_sims(&self, m: usize, sims: &PredictiveSims) -> Result<()> {
        if let Some(p) = self.sims_path(m) {
            let mut buf = Vec::new();
            sims.write_binary(&mut buf).map_err(|e| Error::io(&p, e))?;
            write_file(&p, &buf)?;
        }
        Ok(())
    }

    fn bootstrap_on(&self) -> bool {
        self.cfg.bootstrap.b > 0
    }

    fn plan(&self) -> mbmeval::resample::BootstrapPlan {
        self.cfg.bootstrap.plan(substream(self.seed, "bootstrap"))
    }

    /// Empirical estimates, with intervals when bootstrapping is on.
    pub fn empirical(&self) -> Result<Vec<MetricEstimate>> {
        let attrs = self.cfg.attrs();
        if !self.bootstrap_on() {
            return empirical_all(&self.inputs.data, &attrs, &self.inputs.metrics);
        }
        let key = self.key("empirical", &self.cfg.bootstrap);
        self.cache.json("bootstrap", "empirical", &key, || {
            empirical_bootstrap(&self.inputs.data, &self.plan(), &attrs, &self.inputs.metrics)
        })
    }

    /// MBM point estimates.
    pub fn mbm(&self, m: usize, post: &Posterior) -> Result<Vec<MetricEstimate>> {
        let sims = self.sims(m, post)?;
        mbm_all(&sims, &self.cfg.attrs(), &self.inputs.metrics, self.model_name(m))
    }

    /// MBM estimates with bootstrap intervals; points agree with [`Self::mbm`].
    pub fn mbm_intervals(&self, m: usize, post: &Posterior) -> Result<BootstrapOutput> {
        let key = self.key("bootstrap", &(&self.specs[m], &self.cfg.sampler, &self.cfg.bootstrap));
        let name = self.model_name(m);
        self.cache.json("bootstrap", name, &key, || {
            let mut out = mbm_bootstrap(
                &self.layouts[m],
                &post.draws,
                &self.inputs.data,
                &self.plan(),
                &self.cfg.attrs(),
                &self.inputs.metrics,
                name,
                &self.cfg.sampler.mcmc(),
            )?;
            let points = self.mbm(m, post)?;
            for (e, p) in out.estimates.iter_mut().zip(points) {
                e.point = p.point;
                e.error = p.error;
            }
            Ok(out)
        })
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            folds: self.cfg.cv.folds,
            draws: self.cfg.cv.draws,
            margin: self.cfg.cv.margin,
            mcmc: self.cfg.sampler.mcmc(),
        }
    }

    /// Cross-validated comparison with the KDE baseline. Folds are shared by
    /// all models.
    pub fn check(&self, m: usize) -> Result<Vec<CellCheckResult>> {
        let key = self.key("check", &(&self.specs[m], &self.cfg.sampler, &self.cfg.cv));
        self.cache.json("check", self.model_name(m), &key, || {
            cv_compare(
                &self.specs[m],
                &self.inputs.data,
                &self.cfg.attrs(),
                &self.cv_options(),
                substream(self.seed, "cv"),
            )
        })
    }

    /// Rows carrying `err` for every cell and metric.
    fn failed_rows(&self, empirical: &[MetricEstimate], model: &str, err: &Error) -> Vec<MetricEstimate> {
        empirical
            .iter()
            .map(|e| {
                MetricEstimate::point(
                    e.key.clone(),
                    e.metric,
                    e.n,
                    Err(Error::Data(err.to_string())),
                    Provenance::Mbm { model: model.into() },
                )
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config_hash: self.cfg.hash(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            dataset_hash: self.inputs.data.content_hash(),
            n_records: self.inputs.data.len(),
            metrics: self.inputs.metrics.clone(),
            levels: if self.bootstrap_on() {
                self.cfg.bootstrap.levels.clone()
            } else {
                Vec::new()
            },
        }
    }

    /// Runs every stage. Model-level failures are recorded, not returned.
    pub fn report(&self) -> Result<Report> {
        let empirical = self.empirical()?;
        let mut estimates = vec![MethodEstimates {
            method: "empirical".into(),
            estimates: empirical.clone(),
        }];
        let mut models = Vec::new();
        let mut checks = Vec::new();
        let mut rel = Vec::new();
        let mut warnings = Vec::new();
        for m in 0..self.n_models() {
            let name = self.model_name(m).to_string();
            let mut summary = ModelSummary {
                name: name.clone(),
                spec: self.specs[m].to_string(),
                diagnostics: None,
                median_ess: None,
                error: None,
            };
            let mut run = || -> Result<(Vec<MetricEstimate>, Option<Vec<CellCheckResult>>)> {
                let post = self.posterior(m)?;
                summary.diagnostics = post.diagnostics.clone();
                let est = if self.bootstrap_on() {
                    let out = self.mbm_intervals(m, &post)?;
                    if !out.ess.is_empty() {
                        let mut e = out.ess.clone();
                        e.sort_unstable_by(f64::total_cmp);
                        summary.median_ess = Some(mbmeval::metrics::quantile_sorted(&e, 0.5));
                    }
                    warnings.extend(out.warnings.iter().map(|w| format!("{name}: {w}")));
                    out.estimates
                } else {
                    self.mbm(m, &post)?
                };
                let check = if self.cfg.cv.enabled { Some(self.check(m)?) } else { None };
                Ok((est, check))
            };
            match run() {
                Ok((est, check)) => {
                    if let Some(diag) = &summary.diagnostics {
                        warnings.extend(diag.warnings.iter().map(|w| format!("{name}: {w}")));
                    }
                    if let Some(check) = check {
                        let merged = apply_fallback(&est, &check, &empirical)?;
                        rel.extend(relative_nll(&name, &check));
                        estimates.push(MethodEstimates {
                            method: name.clone(),
                            estimates: est,
                        });
                        estimates.push(MethodEstimates {
                            method: format!("{name}+fallback"),
                            estimates: merged,
                        });
                        checks.push(ModelChecks { model: name, results: check });
                    } else {
                        estimates.push(MethodEstimates { method: name, estimates: est });
                    }
                }
                Err(e) => {
                    warnings.push(format!("{name}: {e}"));
                    summary.error = Some(e.to_string());
                    estimates.push(MethodEstimates {
                        method: name.clone(),
                        estimates: self.failed_rows(&empirical, &name, &e),
                    });
                }
            }
            models.push(summary);
        }
        let pairs: Vec<(String, Vec<CellCheckResult>)> =
            checks.iter().map(|c| (c.model.clone(), c.results.clone())).collect();
        let best = best_ll(&pairs)
            .into_iter()
            .map(|(key, choice)| BestLl { key, choice })
            .collect();
        Ok(Report {
            manifest: self.manifest(),
            estimates,
            models,
            checks,
            relative_nll: rel,
            best_ll: best,
            truth: self.inputs.truth.clone(),
            warnings,
        })
    }
}
