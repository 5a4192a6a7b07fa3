//! Short training runs over a grid of optimizer settings on a reduced copy
//! of a config, printing the validation trajectory of each setting.
//!
//! `cargo run --release --example grid -- --iterations 200 "cap=3e-3;mom=0.5" "opt=adam"`
//!
//! Keys: opt, seed, bs, lr, mom, rho, shr, etamax, cap, bd, bf, ws.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use dhkfac::harness::config::{ExperimentConfig, OptimizerKind};
use dhkfac::harness::data::{build_split, Split};
use dhkfac::harness::train::{train, TrainInputs};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    iterations: u64,
    #[arg(long, default_value_t = 16384)]
    train_paths: usize,
    #[arg(long, default_value_t = 2048)]
    val_paths: usize,
    #[arg(long, default_value_t = 10)]
    val_every: u64,
    /// Settings as `key=value` pairs joined by `;`.
    settings: Vec<String>,
}

fn apply(cfg: &mut ExperimentConfig, setting: &str) -> Result<OptimizerKind, String> {
    let mut kind = OptimizerKind::Kfac;
    for kv in setting.split(';').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv}"))?;
        let num = || v.parse::<f64>().map_err(|e| format!("{k}: {e}"));
        let int = || v.parse::<u64>().map_err(|e| format!("{k}: {e}"));
        match k {
            "opt" => kind = v.parse().map_err(|e| format!("{k}: {e}"))?,
            "seed" => cfg.seed = int()?,
            "bs" => cfg.training.batch_size = int()? as usize,
            "lr" => cfg.adam.lr = num()?,
            "mom" => cfg.kfac.beta_mom = num()?,
            "rho" => cfg.kfac.rho_tr0 = num()?,
            "shr" => cfg.kfac.shrinkage = num()?,
            "etamax" => cfg.kfac.eta_max = num()?,
            "cap" if v == "none" => cfg.kfac.max_step_rms = None,
            "cap" => cfg.kfac.max_step_rms = Some(num()?),
            "bd" => cfg.kfac.beta_d = num()?,
            "bf" => cfg.kfac.beta_f = num()?,
            "ws" => cfg.kfac.warm_start_paths = int()? as usize,
            _ => return Err(format!("unknown key {k}")),
        }
    }
    Ok(kind)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut base = match &args.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => ExperimentConfig::desk(),
    };
    base.data.n_train = args.train_paths;
    base.data.n_val = args.val_paths;
    base.training.max_iterations = args.iterations;
    base.training.val_every = args.val_every;
    base.training.probe_every = 0;
    base.training.val_target = None;
    let (train_ds, val_ds) = match (build_split(&base, Split::Train), build_split(&base, Split::Validation)) {
        (Ok(t), Ok(v)) => (t, v),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = false;
    for setting in &args.settings {
        let mut cfg = base.clone();
        let kind = match apply(&mut cfg, setting).and_then(|k| cfg.validate().map(|_| k).map_err(|e| e.to_string())) {
            Ok(k) => k,
            Err(e) => {
                eprintln!("[{setting}] {e}");
                failed = true;
                continue;
            }
        };
        let start = Instant::now();
        let inputs = TrainInputs {
            train: &train_ds,
            val: &val_ds,
            resume: None,
        };
        let out = train(&cfg, kind, inputs, |row| {
            if let Some(v) = row.val_loss {
                print!("{}:{v:.4} ", row.iteration);
                let _ = std::io::stdout().flush();
            }
            Ok(())
        });
        match out {
            Ok(o) => println!("\n[{setting}] {} iterations in {:.0}s", o.iterations, start.elapsed().as_secs_f64()),
            Err(e) => {
                println!("\n[{setting}] stopped: {e}");
                failed = true;
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
