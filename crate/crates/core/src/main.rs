use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gflownet::config::RunConfig;
use gflownet::nn::Checkpoint;
use gflownet::runner::{
    count_dags, count_trees, metrics_csv, run_bench, run_eval, run_gendata, run_train, target_csv, EnumKind, GenKind,
};

#[derive(Parser)]
#[command(name = "gfn", version, about = "Train and evaluate GFlowNet samplers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy and write metrics.csv, timing.csv, run.json and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Compute the configured metrics for a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Learned couplings (couplings.json) for neg_log_rmse.
        #[arg(long)]
        couplings: Option<PathBuf>,
    },
    /// Generate a dataset: er-dag, ising, phylo-synthetic or modes.
    Gendata {
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Exhaustive enumeration: dags, trees, or the configured target distribution.
    Enumerate {
        what: String,
        /// Number of nodes or species.
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Measure training iterations per second.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().context("--config is required for this subcommand")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let p = dir.join(file);
            std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("runs/latest"));
            let res = run_train(&cfg, Some(&out))?;
            if let Some(last) = res.rows.last() {
                println!("{}", metrics_csv(std::slice::from_ref(last)).trim_end());
            }
            println!("{:.1} it/s, artifacts in {}", res.iterations_per_second, out.display());
        }
        Cmd::Eval { common, checkpoint, couplings } => {
            let cfg = load_config(&common)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let j = match couplings {
                Some(p) => {
                    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                    let best = v.get("best").context("couplings file has no `best` entry")?;
                    Some(serde_json::from_value::<Vec<f64>>(best.clone())?)
                }
                None => None,
            };
            let row = run_eval(&cfg, ck, j.as_deref())?;
            emit(common.out.as_deref(), "eval.csv", &metrics_csv(&[row]))?;
        }
        Cmd::Gendata { kind, common } => {
            let kind: GenKind = kind.parse()?;
            let (env, seed) = match &common.config {
                Some(_) => {
                    let cfg = load_config(&common)?;
                    (cfg.env, cfg.seed)
                }
                None => (kind.default_env(), common.seed.unwrap_or(0)),
            };
            let out = common.out.unwrap_or_else(|| PathBuf::from("data"));
            for p in run_gendata(kind, &env, seed, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Enumerate { what, n, common } => match what.parse::<EnumKind>()? {
            EnumKind::Dags => emit(common.out.as_deref(), "count.txt", &format!("{}\n", count_dags(n)?))?,
            EnumKind::Trees => emit(common.out.as_deref(), "count.txt", &format!("{}\n", count_trees(n, 10_000_000)?))?,
            EnumKind::Target => {
                let cfg = load_config(&common)?;
                emit(common.out.as_deref(), "target.csv", &target_csv(&cfg)?)?;
            }
        },
        Cmd::Bench { common, warmup, iterations, repeats } => {
            let cfg = load_config(&common)?;
            if repeats < 2 {
                bail!("bench needs at least two repeats for an error interval");
            }
            let r = run_bench(&cfg, warmup, iterations, repeats)?;
            let text = serde_json::to_string_pretty(&r)? + "\n";
            emit(common.out.as_deref(), "bench.json", &text)?;
            if common.out.is_some() {
                println!("{:.1} ± {:.1} it/s", r.mean, r.pm_3se);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
