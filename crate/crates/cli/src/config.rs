//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use mbmeval::dataset::SchemaConfig;
use mbmeval::formula::{parse_model, ModelSpec};
use mbmeval::inference::{McmcOptions, PriorConfig};
use mbmeval::resample::{BootstrapMode, BootstrapPlan};
use mbmeval::synth::{ScoreMechanism, N_POP_DESK};
use mbmeval::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub source: Source,
    /// Attributes whose level combinations define the reported subpopulations.
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub empirical_only: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("mbmeval-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    Csv {
        path: PathBuf,
        schema: SchemaConfig,
    },
    Synth {
        mechanism: ScoreMechanism,
        /// Subsample size.
        n: usize,
        #[serde(default = "default_n_pop")]
        n_pop: usize,
        /// Population spec file; the bundled sample spec when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        population: Option<PathBuf>,
    },
}

fn default_n_pop() -> usize {
    N_POP_DESK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Any of `auc`, `fpr`, `ppv`.
    pub kinds: Vec<String>,
    /// Population FPR used to pick the threshold when none is given.
    pub fpr_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            kinds: vec!["auc".into(), "fpr".into(), "ppv".into()],
            fpr_target: 0.01,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub formula: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<String>,
}

impl ModelConfig {
    pub fn spec(&self, prior: PriorConfig) -> Result<ModelSpec> {
        Ok(parse_model(&self.formula, self.sigma.as_deref())?.with_prior(prior))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Posterior draws kept per fit (R).
    pub draws: usize,
    pub chains: usize,
    pub warmup: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    pub init_radius: f64,
    pub prior: PriorConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let m = McmcOptions::default();
        SamplerConfig {
            draws: mbmeval::inference::DEFAULT_DRAWS,
            chains: m.chains,
            warmup: m.warmup,
            max_depth: m.max_depth,
            target_accept: m.target_accept,
            init_radius: m.init_radius,
            prior: PriorConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn mcmc(&self) -> McmcOptions {
        McmcOptions {
            chains: self.chains,
            warmup: self.warmup,
            max_depth: self.max_depth,
            target_accept: self.target_accept,
            init_radius: self.init_radius,
            cache_loglik: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Replicates; 0 disables intervals.
    pub b: usize,
    pub mode: BootstrapMode,
    pub levels: Vec<f64>,
    pub r_out: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        let p = BootstrapPlan::default();
        BootstrapConfig {
            b: p.b,
            mode: p.mode,
            levels: p.levels,
            r_out: p.r_out,
        }
    }
}

impl BootstrapConfig {
    pub fn plan(&self, seed: u64) -> BootstrapPlan {
        BootstrapPlan {
            b: self.b,
            mode: self.mode,
            seed,
            levels: self.levels.clone(),
            r_out: self.r_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub enabled: bool,
    pub folds: usize,
    pub draws: usize,
    pub margin: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            enabled: true,
            folds: 5,
            draws: 1000,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mechanisms to run; the source mechanism when empty.
    pub mechanisms: Vec<ScoreMechanism>,
    /// Subsample sizes; the source size when empty.
    pub sizes: Vec<usize>,
    pub repetitions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mechanisms: Vec::new(),
            sizes: Vec::new(),
            repetitions: 10,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.source {
            Source::Csv { path, .. } => rebase(path),
            Source::Synth { population, .. } => {
                if let Some(p) = population {
                    rebase(p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.metrics.kinds.is_empty() {
            return bad("at least one metric is required".into());
        }
        for k in &self.metrics.kinds {
            if !["auc", "fpr", "ppv"].contains(&k.as_str()) {
                return bad(format!("unknown metric `{k}`"));
            }
        }
        if !(self.metrics.fpr_target > 0.0 && self.metrics.fpr_target < 1.0) {
            return bad("metrics.fpr_target must lie in (0, 1)".into());
        }
        if self.models.is_empty() && !self.empirical_only {
            return bad("configure at least one model or set empirical_only".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            let ok = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
            if !ok {
                return bad(format!("model name `{}` must be non-empty [A-Za-z0-9._-]", m.name));
            }
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("duplicate model name `{}`", m.name));
            }
            if m.name == "empirical" {
                return bad("`empirical` is reserved".into());
            }
            m.spec(self.sampler.prior)?;
        }
        self.sampler.prior.validate()?;
        if self.sampler.draws == 0 || self.sampler.chains == 0 {
            return bad("sampler.draws and sampler.chains must be positive".into());
        }
        if self.bootstrap.b > 0 {
            self.bootstrap.plan(0).validate()?;
        }
        if self.cv.enabled && (self.cv.folds < 2 || self.cv.draws == 0) {
            return bad("cv needs folds >= 2 and draws >= 1".into());
        }
        if let Source::Synth { n, n_pop, .. } = &self.source {
            if *n == 0 || n > n_pop {
                return bad(format!("synth source needs 0 < n <= n_pop, got n = {n}, n_pop = {n_pop}"));
            }
            if self.experiment.sizes.iter().any(|s| s == &0 || s > n_pop) {
                return bad("experiment sizes must lie in 1..=n_pop".into());
            }
        }
        if self.experiment.repetitions == 0 {
            return bad("experiment.repetitions must be positive".into());
        }
        Ok(())
    }

    pub fn attrs(&self) -> Vec<&str> {
        self.attributes.iter().map(String::as_str).collect()
    }

    /// Active models: none in empirical-only runs.
    pub fn active_models(&self) -> &[ModelConfig] {
        if self.empirical_only {
            &[]
        } else {
            &self.models
        }
    }

    /// Hash of everything that affects results; the output directory is
    /// excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest(&c)
    }
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
attributes = ["g"]
[source]
kind = "csv"
path = "data.csv"
[source.schema]
attributes = [{ name = "g" }]
[[models]]
name = "m"
formula = "S ~ g + Y"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.sampler.draws, 4000);
        assert_eq!(c.bootstrap.b, 100);
        assert_eq!(c.cv.folds, 5);
        assert_eq!(c.experiment.repetitions, 10);
        assert_eq!(c.metrics.kinds.len(), 3);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_model = MINIMAL.replace("[[models]]\nname = \"m\"\nformula = \"S ~ g + Y\"\n", "");
        assert!(RunConfig::from_toml(&no_model).is_err());
        assert!(RunConfig::from_toml(&format!("empirical_only = true\n{no_model}")).is_ok());
        assert!(RunConfig::from_toml(&MINIMAL.replace("S ~ g + Y", "S ~ g +")).is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\n[cv]\nfolds = 1\n")).is_err());
        assert!(RunConfig::from_toml(&format!("colour = 1\n{MINIMAL}")).is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\n[metrics]\nkinds = []\n")).is_err());
        let dup = format!("{MINIMAL}\n[[models]]\nname = \"m\"\nformula = \"S ~ Y\"\n");
        assert!(RunConfig::from_toml(&dup).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }
}
