use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mwalk::config::{EnvKind, RunConfig};
use mwalk::env::kg::synthetic_kb;
use mwalk::env::puzzle::{bfs_dfs_steps, generate_dataset};
use mwalk::run::{load_state, sibling_config, train_run, Split, Task, SYNTHETIC_ENTITIES};
use mwalk::{Error, Result};

#[derive(Parser)]
#[command(name = "mwalk", version, about = "Graph walking with tree search")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Checkpoint to resume from (train) or to load (eval, predict).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the 600-puzzle dataset into --out.
    PuzzleGen {
        /// Keep only puzzles solvable within this many moves.
        #[arg(long, default_value_t = 11)]
        max_depth: usize,
    },
    /// Generate the synthetic composition KB into --out.
    KbGen {
        #[arg(long, default_value_t = SYNTHETIC_ENTITIES)]
        entities: usize,
    },
    /// Train a model; writes config, metrics and checkpoint into --out.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also report breadth- and depth-first search effort (puzzle only).
        #[arg(long)]
        oracle: bool,
    },
    /// Rank answers for one query: `A B C q` or `source relation`.
    Predict {
        query: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Vocabulary { .. } | Error::Io(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::defaults(EnvKind::Puzzle),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    }
    match &cli.command {
        Command::PuzzleGen { max_depth } => {
            let cfg = load_config(cli, None)?;
            let out = require(&cli.out, "--out")?;
            let ds = generate_dataset(cfg.seed, Some(*max_depth));
            ds.write(out)?;
            log::info!(
                "wrote {} train and {} test puzzles to {}",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::KbGen { entities } => {
            let cfg = load_config(cli, None)?;
            let out = require(&cli.out, "--out")?;
            if *entities < 10 {
                return Err(Error::Config("--entities must be at least 10".into()));
            }
            synthetic_kb(cfg.seed, *entities).write(out)?;
            log::info!("wrote synthetic KB to {}", out.display());
        }
        Command::Train => {
            let cfg = load_config(cli, None)?;
            let out = require(&cli.out, "--out")?;
            let (_, log) = train_run(&cfg, out, cli.checkpoint.as_deref())?;
            if let Some(last) = log.last() {
                print_json(last)?;
            }
        }
        Command::Eval { split, oracle } => {
            let ck = require(&cli.checkpoint, "--checkpoint")?;
            let cfg = load_config(cli, Some(&sibling_config(ck)))?;
            let task = Task::load(&cfg)?;
            let state = load_state(&task, &cfg, ck)?;
            let report = task.evaluate(&cfg, &state, *split)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                report.write_csv(&out.join("eval.csv"))?;
                let full = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Data(e.to_string()))?;
                std::fs::write(out.join("eval.json"), full)?;
            }
            print_json(&report.budgets)?;
            if *oracle {
                let Task::Puzzle(t) = &task else {
                    return Err(Error::Config("--oracle applies to the puzzle only".into()));
                };
                let qs = match split {
                    Split::Train => &t.data.train,
                    _ => &t.data.test,
                };
                let mut bfs = 0.0;
                let mut dfs = 0.0;
                for q in qs {
                    let e = bfs_dfs_steps(q)?;
                    bfs += e.bfs_expansions as f64;
                    dfs += e.dfs_expansions as f64;
                }
                let n = qs.len().max(1) as f64;
                print_json(
                    &serde_json::json!({ "bfs_mean_expansions": bfs / n, "dfs_mean_expansions": dfs / n }),
                )?;
            }
        }
        Command::Predict { query, top } => {
            let ck = require(&cli.checkpoint, "--checkpoint")?;
            let cfg = load_config(cli, Some(&sibling_config(ck)))?;
            let task = Task::load(&cfg)?;
            let state = load_state(&task, &cfg, ck)?;
            print_json(&task.predict(&cfg, &state, query, *top)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MWALK_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
