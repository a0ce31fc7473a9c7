use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ictm::harness::io::{
    load_dataset, load_grid, load_model, save_dataset, save_model, write_aggregate, write_attributions,
    write_dependence,
};
use ictm::harness::{resolve_tau, run_mc, simulate_dataset, tune, RunConfig};
use ictm::metrics::{fit_relative_error, ibs, mspe, EvalGrid, TrueModel, DEFAULT_POINTS};
use ictm::shapley::{explain, shap_dependence, shap_summary, stratified_background};
use ictm::streams::{derive_seed, tag};
use ictm::train::{center_fit, fit, fit_ltm, FitOptions};

#[derive(Parser)]
#[command(name = "ictm", version, about = "Interval-censored transformation models under case-cohort sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Network,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort, apply the configured design and write the dataset CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset and write it as JSON.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "network")]
        method: FitMethod,
    },
    /// Score a saved model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma separated subset of re, mspe, ibs.
        #[arg(long, default_value = "ibs")]
        metrics: String,
        /// Simulation config describing the truth (needed for re and mspe) and the design probabilities.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Monte Carlo comparison of PRO, SUB, SRS and LTM.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long, env = "ICTM_JOBS", default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact Shapley attributions of a saved model's covariate network.
    Shap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        background_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also export dependence data for this feature (1-based).
        #[arg(long)]
        dependence: Option<usize>,
        #[arg(long)]
        dependence_out: Option<PathBuf>,
    },
    /// Grid search with k-fold cross-validation.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Tune on this dataset instead of a freshly simulated one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = load_config(Some(&config))?;
            let (tau, records) = simulate_dataset(&cfg, cfg.seed)?;
            save_dataset(&out, &records)?;
            eprintln!("tau = {tau}; wrote {} records to {}", records.len(), out.display());
        }
        Command::Fit { config, data, out, method } => {
            let cfg = load_config(Some(&config))?;
            let (p_s, p_c) = cfg.probabilities();
            let records = load_dataset(&data, p_s, p_c)?;
            let support = match (cfg.fit.support, cfg.sim.tau) {
                (Some(s), _) => Some(s),
                (None, Some(tau)) => Some((0.0, tau)),
                (None, None) => None,
            };
            let opts = FitOptions { support, ..cfg.fit.clone() };
            let spec = cfg.hp.spec()?;
            let seed = derive_seed(cfg.seed, &[tag::FIT]);
            let fitted = match method {
                FitMethod::Network => fit(&records, &spec, &cfg.hp, seed, &opts)?,
                FitMethod::Linear => fit_ltm(&records, &spec, cfg.ltm_hyperparameters(), seed, &opts)?,
            };
            let reference: Vec<Vec<f64>> = records.iter().filter_map(|r| r.z.clone()).collect();
            let centred = center_fit(&fitted, &reference)?;
            save_model(&out, &centred)?;
            eprintln!(
                "epochs run {}, best epoch {}, monitored loss {:.6}",
                centred.epochs_run,
                centred.best_epoch,
                centred.monitor_curve[centred.best_epoch]
            );
        }
        Command::Evaluate { model, data, metrics, config } => {
            let fitted = load_model(&model)?;
            let cfg = load_config(config.as_deref())?;
            let (p_s, p_c) = cfg.probabilities();
            let records: Vec<_> = load_dataset(&data, p_s, p_c)?.into_iter().filter(|r| r.observed).collect();
            let covariates: Vec<Vec<f64>> = records.iter().filter_map(|r| r.z.clone()).collect();
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for metric in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
                match metric {
                    "re" | "mspe" if config.is_none() => bail!(ictm::Error::Config(format!("{metric} needs --config describing the truth"))),
                    "re" => writeln!(out, "re,{}", fit_relative_error(&fitted, cfg.sim.g_case, &covariates)?)?,
                    "mspe" => {
                        let truth = TrueModel { baseline: cfg.sim.baseline, case: cfg.sim.g_case, spec: cfg.sim.spec()? };
                        let grid = EvalGrid::from_records(&records, DEFAULT_POINTS)?;
                        writeln!(out, "mspe,{}", mspe(&fitted, &truth, &covariates, &grid)?)?;
                    }
                    "ibs" => {
                        let (c, u) = fitted.model.hazard.support();
                        let res = ibs(&fitted, &records, &EvalGrid::new(c, u, DEFAULT_POINTS)?)?;
                        writeln!(out, "ibs,{}", res.score)?;
                        if res.degenerate > 0 {
                            eprintln!("ibs: {} degenerate interval evaluations used 0.5", res.degenerate);
                        }
                    }
                    other => bail!(ictm::Error::Config(format!("unknown metric {other:?}"))),
                }
            }
        }
        Command::Mc { config, reps, jobs, out } => {
            let mut cfg = load_config(Some(&config))?;
            if let Some(r) = reps {
                cfg.reps = r;
            }
            let (replications, table) = run_mc(&cfg, jobs)?;
            for rep in &replications {
                for o in &rep.outcomes {
                    if let Err(e) = &o.metrics {
                        eprintln!("replication {}: {} missing: {e}", rep.rep, o.method);
                    }
                }
            }
            let mut w = writer(&out)?;
            write_aggregate(&mut w, &table)?;
            w.flush()?;
        }
        Command::Shap { model, data, background_size, out, config, dependence, dependence_out } => {
            let fitted = load_model(&model)?;
            let cfg = load_config(config.as_deref())?;
            let (p_s, p_c) = cfg.probabilities();
            let records = load_dataset(&data, p_s, p_c)?;
            let samples: Vec<Vec<f64>> = records.iter().filter_map(|r| r.z.clone()).collect();
            let background = stratified_background(&records, background_size, derive_seed(cfg.seed, &[tag::BACKGROUND]))?;
            let names: Vec<String> = (1..=fitted.model.net.input_dim()).map(|j| format!("z{j}")).collect();
            let result = explain(&fitted.model.net, &samples, &background, names.clone())?;
            let mut w = writer(&out)?;
            write_attributions(&mut w, &result, &samples)?;
            w.flush()?;
            for (_, name, value) in shap_summary(&result) {
                println!("{name},{value}");
            }
            if let Some(j) = dependence {
                if j == 0 || j > names.len() {
                    bail!(ictm::Error::Config(format!("dependence feature must lie in 1..={}", names.len())));
                }
                let table = shap_dependence(&result, &samples, j - 1)?;
                let path = dependence_out.unwrap_or_else(|| out.with_extension(format!("dependence_z{j}.csv")));
                let mut w = writer(&path)?;
                write_dependence(&mut w, &table, &names)?;
                w.flush()?;
            }
        }
        Command::Tune { config, grid, folds, data } => {
            let mut cfg = load_config(Some(&config))?;
            let grid = load_grid(&grid)?;
            let records = match data {
                Some(path) => {
                    let (p_s, p_c) = cfg.probabilities();
                    Some(load_dataset(&path, p_s, p_c)?)
                }
                None => {
                    cfg.sim.tau = Some(resolve_tau(&cfg.sim, cfg.tau_cache.as_deref(), cfg.seed)?);
                    None
                }
            };
            let result = tune(&cfg, records, &grid, folds)?;
            for (i, (score, epochs)) in result.scores.iter().zip(&result.mean_epochs).enumerate() {
                eprintln!("grid[{i}] cv_nll {score:.6} mean_epochs {epochs:.1}");
            }
            println!("# grid point {}", result.best_index);
            print!("{}", toml::to_string(&result.selected)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err.chain().any(|e| e.downcast_ref::<ictm::Error>().is_some_and(ictm::Error::is_numerical));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}
