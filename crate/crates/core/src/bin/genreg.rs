use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use genreg::config::Config;
use genreg::harness::{self, BenchOptions, EvalOptions, Method, Model};
use genreg::networks::Precision;
use genreg::{Error, Result};

#[derive(Parser)]
#[command(name = "genreg", version, about = "Generative point-cloud registration lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (GENREG_WORKERS takes precedence).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    Precision::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train generator and discriminators on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one pair of clouds with a trained checkpoint.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate methods over a dataset and write CSV and JSON reports.
    Eval {
        /// Needed by the generator-based methods.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "genreg,icp,ransac-on-genreg")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare pdsac and ransac on synthetic correspondences with outliers.
    BenchConsensus {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.3)]
        outliers: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let c = &cli.common;
    let workers = harness::resolve_workers(c.workers)?;
    let mut cfg = load_config(c.config.as_deref())?;
    match cli.command {
        Command::GenData { out } => {
            let records = harness::gen_data(&cfg, &out, c.seed)?;
            Ok(json!({ "command": "gen-data", "pairs": records.len(), "out": out }))
        }
        Command::Train { data, out } => {
            cfg.train.seed = c.seed;
            cfg.train.workers = workers.or(cfg.train.workers);
            cfg.train.precision = c.precision.unwrap_or(cfg.train.precision);
            let outcome = harness::train_cmd(&cfg, &data, &out)?;
            let last = outcome.history.last().map(|r| r.loss.total);
            Ok(json!({
                "command": "train",
                "steps": outcome.steps,
                "generator_updates": outcome.generator_updates,
                "final_total": last,
                "suppressed_grads": outcome.suppressed_grads,
                "out": out,
            }))
        }
        Command::Register { checkpoint, a, b, out } => {
            let expected = c.config.as_ref().map(|_| &cfg.network);
            let model = Model::load(&checkpoint, expected)?;
            let precision = c.precision.unwrap_or(Precision::F64);
            let r = harness::register_cmd(&model, &a, &b, &out, &cfg.pdsac, precision, c.seed)?;
            Ok(json!({ "command": "register", "t_est": r.t_est, "cd": r.cd, "out": out }))
        }
        Command::Eval { checkpoint, data, methods, out } => {
            let methods = Method::parse_list(&methods)?;
            let expected = c.config.as_ref().map(|_| &cfg.network);
            let model = checkpoint.as_deref().map(|p| Model::load(p, expected)).transpose()?;
            let pairs: Vec<_> = harness::load_dataset(&data)?.into_iter().map(|(_, p)| p).collect();
            let opts = EvalOptions {
                methods,
                pdsac: cfg.pdsac,
                ransac: cfg.ransac,
                precision: c.precision.unwrap_or(Precision::F64),
                workers,
                seed: c.seed,
                cloud_dir: Some(out.join("clouds")),
            };
            let report = harness::eval(model.as_ref(), &pairs, &opts)?;
            report.write(&out)?;
            Ok(json!({ "command": "eval", "rows": report.rows.len(), "aggregates": report.aggregates, "out": out }))
        }
        Command::BenchConsensus { n, m, k, outliers, trials, out } => {
            let opts = BenchOptions { n, m, k, outlier_fraction: outliers, trials, seed: c.seed, ..BenchOptions::default() };
            let report = harness::bench_consensus(&opts)?;
            report.write(&out)?;
            Ok(json!({ "command": "bench-consensus", "summary": report.summary, "out": out }))
        }
    }
}

fn error_line(e: &Error) -> serde_json::Value {
    let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
    if let Error::Config { key, .. } = e {
        body["key"] = json!(key);
    }
    json!({ "error": body })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
