use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dhkfac::harness::checkpoint::Checkpoint;
use dhkfac::harness::config::{ExperimentConfig, OptimizerKind};
use dhkfac::harness::data::{build_split, simulate_split, Dataset, Split};
use dhkfac::harness::eval::{evaluate, write_path_csv, EvalReport};
use dhkfac::harness::plots::{fan_chart_csv, histogram_csv, loss_curves};
use dhkfac::harness::pricecheck::{format_table, price_check};
use dhkfac::harness::train::{train_to_dir, TrainInputs};
use dhkfac::harness::{HarnessError, HarnessResult};
use dhkfac::market::mc_oracle::McOracle;
use dhkfac::market::PathSet;

#[derive(Parser)]
#[command(name = "dhkfac", version, about = "Deep hedging of a cliquet with Adam or DH-KFAC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Kfac,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Kfac => OptimizerKind::Kfac,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one split of the configured market and write it as a path file.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV with one row per path and step.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare the Fourier pricer with a Monte-Carlo estimate on every grid option.
    PriceCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        paths: usize,
        #[arg(long, default_value_t = 2)]
        substeps: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a policy; writes metrics.csv and checkpoint.dhck.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the optimizer named in the config.
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        /// Output directory; defaults to `<output_dir>/<optimizer>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iterations: Option<u64>,
        #[arg(long)]
        val_target: Option<f64>,
        /// Continue from a checkpoint of the same problem and optimizer.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training paths from `simulate` instead of simulating them here.
        #[arg(long)]
        train_paths: Option<PathBuf>,
        #[arg(long)]
        val_paths: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split; writes report.json and paths.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must describe the same problem as the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        test_paths: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Convert metrics and evaluation files into plot-ready CSVs.
    ExportPlots {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> HarnessResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk()),
    }
}

fn dataset(cfg: &ExperimentConfig, file: Option<&Path>, split: Split) -> HarnessResult<Dataset> {
    match file {
        Some(p) => Dataset::build(&PathSet::read_binary(p)?, cfg),
        None => build_split(cfg, split),
    }
}

fn create(path: &Path) -> HarnessResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::Simulate { config, split, out, csv } => {
            let cfg = load_config(config.as_deref())?;
            let paths = simulate_split(&cfg, split.into())?;
            paths.write_binary(&out)?;
            if let Some(csv) = csv {
                let mut w = create(&csv)?;
                paths.write_csv(&mut w)?;
                w.flush()?;
            }
            println!("wrote {} paths of {} steps to {}", paths.n_paths, paths.steps, out.display());
        }
        Command::PriceCheck { config, paths, substeps, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mut oracle = McOracle {
                n_paths: paths,
                substeps,
                ..McOracle::default()
            };
            if let Some(s) = seed {
                oracle.seed = s;
            }
            let rows = price_check(&cfg.market.heston(), cfg.market.dt, &cfg.grid_spec()?, &oracle)?;
            print!("{}", format_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{} of {} options within tolerance", rows.len() - failed, rows.len());
            if failed > 0 {
                return Err(HarnessError::Numerical(format!("{failed} options outside tolerance")));
            }
        }
        Command::Train {
            config,
            optimizer,
            out_dir,
            seed,
            max_iterations,
            val_target,
            resume,
            train_paths,
            val_paths,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = max_iterations {
                cfg.training.max_iterations = m;
            }
            if val_target.is_some() {
                cfg.training.val_target = val_target;
            }
            let kind = optimizer.map_or(cfg.training.optimizer, OptimizerKind::from);
            cfg.training.optimizer = kind;
            cfg.validate()?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.join(kind.to_string()));
            let resume = match resume {
                Some(p) => Some(Checkpoint::read(p)?.restore(&cfg)?),
                None => None,
            };
            let train_ds = dataset(&cfg, train_paths.as_deref(), Split::Train)?;
            let val_ds = dataset(&cfg, val_paths.as_deref(), Split::Validation)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml())?;
            let inputs = TrainInputs {
                train: &train_ds,
                val: &val_ds,
                resume,
            };
            let out = train_to_dir(&cfg, kind, inputs, &dir)?;
            let last_val = out.rows.iter().rev().find_map(|r| r.val_loss);
            println!(
                "{kind}: {} iterations, initial validation loss {:.6e}, last {:.6e}",
                out.iterations,
                out.initial_val_loss,
                last_val.unwrap_or(f64::NAN)
            );
            match (cfg.training.val_target, out.reached_target) {
                (Some(_), Some(it)) => println!("target reached at iteration {it}"),
                (Some(target), None) => {
                    let best = out.rows.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
                    return Err(HarnessError::TargetNotReached {
                        target,
                        iterations: out.iterations,
                        best,
                    });
                }
                _ => {}
            }
        }
        Command::Evaluate {
            checkpoint,
            config,
            test_paths,
            out_dir,
        } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ck.config()?,
            };
            let params = ck.params(&cfg)?;
            let test = dataset(&cfg, test_paths.as_deref(), Split::Test)?;
            let (report, records) = evaluate(&cfg, &params, &test)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            let mut w = create(&out_dir.join("paths.csv"))?;
            write_path_csv(&mut w, &records)?;
            w.flush()?;
            println!(
                "std hedged {:.6} delta-only {:.6} unhedged {:.6}; skew hedged {:+.3} delta-only {:+.3}; mean costs {:.3e}",
                report.hedged.std,
                report.delta_only.std,
                report.unhedged.std,
                report.hedged.skewness,
                report.delta_only.skewness,
                report.mean_costs
            );
        }
        Command::ExportPlots { metrics, report, out_dir } => {
            if metrics.is_none() && report.is_none() {
                return Err(HarnessError::Config("nothing to export: pass --metrics and/or --report".into()));
            }
            fs::create_dir_all(&out_dir)?;
            if let Some(m) = metrics {
                let text = fs::read_to_string(m)?;
                let mut w = create(&out_dir.join("loss_curves.csv"))?;
                loss_curves(&text, &mut w)?;
                w.flush()?;
            }
            if let Some(r) = report {
                let report: EvalReport = serde_json::from_str(&fs::read_to_string(r)?)?;
                let mut w = create(&out_dir.join("pnl_histograms.csv"))?;
                histogram_csv(&report, &mut w)?;
                w.flush()?;
                let mut w = create(&out_dir.join("action_fans.csv"))?;
                fan_chart_csv(&report, &mut w)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
