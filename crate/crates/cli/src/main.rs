use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbmeval::Result;
use mbmeval_cli::pipeline::{load_inputs, Cache, Pipeline};
use mbmeval_cli::report::{self, to_pretty_json, write_all, MethodEstimates, ModelChecks, ModelSummary, Report};
use mbmeval_cli::{experiment, RunConfig};

/// Model-based performance metrics for subpopulations.
#[derive(Parser)]
#[command(name = "mbmeval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every model and cache its posterior draws.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also persist posterior predictive scores.
        #[arg(long)]
        save_sims: bool,
    },
    /// Empirical and MBM point estimates.
    Estimate(Common),
    /// Cross-validated model checks against the KDE baseline.
    Check(Common),
    /// Bootstrap intervals for empirical and MBM estimates.
    Bootstrap(Common),
    /// Every stage, with all report files.
    Report(Common),
    /// Repeated subsamples of synthetic populations; error and coverage tables.
    Experiment(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, env = "MBMEVAL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    empirical_only: bool,
    /// Posterior draws per fit.
    #[arg(long)]
    draws: Option<usize>,
    /// Bootstrap replicates (0 disables intervals).
    #[arg(long)]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    no_cv: bool,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Skip the on-disk cache of intermediates.
    #[arg(long)]
    no_cache: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.empirical_only |= self.empirical_only;
        if let Some(r) = self.draws {
            cfg.sampler.draws = r;
        }
        if let Some(b) = self.bootstrap_b {
            cfg.bootstrap.b = b;
        }
        if let Some(k) = self.folds {
            cfg.cv.folds = k;
        }
        if self.no_cv {
            cfg.cv.enabled = false;
        }
        if let Some(r) = self.repetitions {
            cfg.experiment.repetitions = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn cache(&self, cfg: &RunConfig) -> Cache {
        if self.no_cache {
            Cache::disabled()
        } else {
            Cache::at(cfg.output_dir.join("cache"))
        }
    }
}

fn partial(p: &Pipeline) -> Report {
    Report {
        manifest: p.manifest(),
        estimates: Vec::new(),
        models: Vec::new(),
        checks: Vec::new(),
        relative_nll: Vec::new(),
        best_ll: Vec::new(),
        truth: p.inputs.truth.clone(),
        warnings: Vec::new(),
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let common = match &cli.command {
        Command::Simulate { common, .. } => common,
        Command::Estimate(c) | Command::Check(c) | Command::Bootstrap(c) | Command::Report(c) | Command::Experiment(c) => c,
    };
    let cfg = common.config()?;
    let out = cfg.output_dir.clone();
    if let Command::Experiment(_) = cli.command {
        let rep = experiment::run_experiment(&cfg, |msg| eprintln!("{msg}"))?;
        return experiment::emit(&rep, &out);
    }
    let pipe = Pipeline::new(&cfg, load_inputs(&cfg)?, cfg.seed, common.cache(&cfg))?;
    match cli.command {
        Command::Simulate { save_sims, .. } => {
            let mut summaries = Vec::new();
            for m in 0..pipe.n_models() {
                let post = pipe.posterior(m)?;
                if save_sims {
                    pipe.save_sims(m, &pipe.sims(m, &post)?)?;
                }
                summaries.push(ModelSummary {
                    name: pipe.model_name(m).into(),
                    spec: cfg.active_models()[m].spec(cfg.sampler.prior)?.to_string(),
                    diagnostics: post.diagnostics,
                    median_ess: None,
                    error: None,
                });
            }
            write_all(&out, vec![("diagnostics.json", to_pretty_json(&summaries)?)])
        }
        Command::Estimate(_) | Command::Bootstrap(_) => {
            let intervals = matches!(cli.command, Command::Bootstrap(_));
            let mut r = partial(&pipe);
            if !intervals {
                r.manifest.levels.clear();
                r.estimates.push(MethodEstimates {
                    method: "empirical".into(),
                    estimates: mbmeval::resample::empirical_all(&pipe.inputs.data, &cfg.attrs(), &pipe.inputs.metrics)?,
                });
            } else {
                r.estimates.push(MethodEstimates {
                    method: "empirical".into(),
                    estimates: pipe.empirical()?,
                });
            }
            for m in 0..pipe.n_models() {
                let post = pipe.posterior(m)?;
                let estimates = if intervals && cfg.bootstrap.b > 0 {
                    pipe.mbm_intervals(m, &post)?.estimates
                } else {
                    pipe.mbm(m, &post)?
                };
                r.estimates.push(MethodEstimates {
                    method: pipe.model_name(m).into(),
                    estimates,
                });
            }
            let stem = if intervals { "bootstrap" } else { "estimates" };
            write_all(
                &out,
                vec![
                    (&format!("{stem}.json"), to_pretty_json(&r.estimates)?),
                    (&format!("{stem}.csv"), report::estimates_csv(&r)?),
                ],
            )
        }
        Command::Check(_) => {
            let mut r = partial(&pipe);
            for m in 0..pipe.n_models() {
                let results = pipe.check(m)?;
                r.relative_nll
                    .extend(mbmeval::checking::relative_nll(pipe.model_name(m), &results));
                r.checks.push(ModelChecks {
                    model: pipe.model_name(m).into(),
                    results,
                });
            }
            let pairs: Vec<_> = r.checks.iter().map(|c| (c.model.clone(), c.results.clone())).collect();
            let best: Vec<report::BestLl> = mbmeval::checking::best_ll(&pairs)
                .into_iter()
                .map(|(key, choice)| report::BestLl { key, choice })
                .collect();
            write_all(
                &out,
                vec![
                    ("checks.json", to_pretty_json(&r.checks)?),
                    ("checks.csv", report::checks_csv(&r)?),
                    ("relative_nll.csv", report::relative_nll_csv(&r)?),
                    ("best_ll.json", to_pretty_json(&best)?),
                ],
            )
        }
        Command::Report(_) => report::emit(&pipe.report()?, &out),
        Command::Experiment(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
