use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use balancelab::error::{Error, Result};
use balancelab::harness::{self, ExperimentConfig, RunOptions, RunReport};

#[derive(Parser)]
#[command(
    name = "balancelab",
    version,
    about = "Benchmark modality-balancing methods on synthetic multimodal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (or file, for `generate`); defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list, replacing the config's.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Master seed; beats BALANCELAB_SEED, which beats the config.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to a file.
    Generate(Common),
    /// Train and evaluate the configured method for every seed.
    Train(Common),
    /// Evaluate a saved checkpoint on the configured test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one method parameter over a grid of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep, e.g. `method.alpha`; defaults to `[sweep].param`.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
    },
    /// Compare the summaries of finished runs.
    Table {
        /// `summary.json` files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for `table.csv` and `table.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = harness::load_config(&common.config)?;
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds.clone();
    }
    let env = std::env::var(harness::SEED_ENV).ok();
    config.master_seed =
        harness::resolve_master_seed(common.master_seed, env.as_deref(), config.master_seed)?;
    config.validate()?;
    Ok(config)
}

fn options(common: &Common, config: &ExperimentConfig) -> RunOptions {
    RunOptions {
        out_dir: Some(common.out.clone().unwrap_or_else(|| config.out_dir.clone())),
        jobs: common.jobs,
        save_models: true,
    }
}

fn finish(report: &RunReport, dir: &Path) -> Result<bool> {
    print!("{}", report.to_csv());
    eprintln!("reports written to {}", dir.display());
    for f in &report.failures {
        eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.error);
    }
    Ok(report.is_complete())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(common) => {
            let config = load(&common)?;
            let path = common
                .out
                .clone()
                .unwrap_or_else(|| config.out_dir.join("dataset.mmds"));
            let data = harness::generate_dataset(&config, config.seeds[0], &path)?;
            eprintln!("wrote {} samples to {}", data.len(), path.display());
            Ok(true)
        }
        Command::Train(common) => {
            let config = load(&common)?;
            let opts = options(&common, &config);
            let report = harness::run_experiment(&config, &opts)?;
            finish(&report, opts.out_dir.as_deref().expect("out dir set"))
        }
        Command::Evaluate { common, checkpoint } => {
            let config = load(&common)?;
            let (perf, shapley) =
                harness::evaluate_checkpoint(&config, config.seeds[0], &checkpoint)?;
            let json = serde_json::json!({
                "acc": perf.accuracy,
                "macro_f1": perf.macro_f1,
                "confusion": perf.confusion,
                "phi": shapley.phi,
                "imbalance": shapley.imbalance,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&json).map_err(|e| Error::Contract(e.to_string()))?
            );
            Ok(true)
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let config = load(&common)?;
            let section = config.sweep.clone();
            let param = param
                .or_else(|| section.as_ref().map(|s| s.param.clone()))
                .ok_or_else(|| Error::Config {
                    path: "sweep.param".into(),
                    msg: "no parameter to sweep".into(),
                })?;
            let values = values
                .or_else(|| section.map(|s| s.values))
                .ok_or_else(|| Error::Config {
                    path: "sweep.values".into(),
                    msg: "no values to sweep".into(),
                })?;
            let opts = options(&common, &config);
            let report = harness::run_sweep(&config, &param, &values, &opts)?;
            finish(&report, opts.out_dir.as_deref().expect("out dir set"))
        }
        Command::Table { reports, out } => {
            let reports = reports
                .iter()
                .map(|p| harness::load_report(p))
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare_table(&reports)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let csv = dir.join("table.csv");
                std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
                let txt = dir.join("table.txt");
                std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
