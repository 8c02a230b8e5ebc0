//! `lge` command-line runner: single runs, ablation suites, cell-size
//! sweeps and log aggregation.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lge_core::envsim::{load_maze, EnvConfig};
use lge_core::experiment::{run, Algorithm, RunConfig, RunOptions};
use lge_core::metrics::{aggregate, AggregateOptions, RunLog};
use lge_core::seeding::{stream_rng, Stream};
use lge_core::tensor::write_checkpoint;
use lge_core::Error;

/// Environment variable overriding the default output root.
const OUTPUT_ROOT_VAR: &str = "LGE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "lge", version, about = "Latent Go-Explore maze experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm over one or more seeds.
    Run {
        /// lge, goexplore or random. Overrides the config file.
        #[arg(long)]
        algo: Option<String>,
        /// Also write the stored observations of each run.
        #[arg(long)]
        dump_states: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Full LGE and its three single-flag ablations on shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Go-Explore over several cell sizes on shared seeds.
    SweepCells {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 2.0, 6.0])]
        sizes: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// IQM curves and performance profiles from a directory of run logs.
    Aggregate {
        dir: PathBuf,
        /// Output directory (defaults to DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        stride: u64,
        /// Combine logs of one label even if their config hashes differ.
        #[arg(long)]
        allow_mixed_configs: bool,
        /// Seed of the bootstrap resampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maze file (defaults to the shipped layout).
    #[arg(long)]
    maze: Option<PathBuf>,
    /// Seeds as `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Environment steps per run (overrides the config file).
    #[arg(long)]
    steps: Option<u64>,
    /// Output root (defaults to $LGE_OUTPUT_ROOT, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Small agent networks and batches for quick runs.
    #[arg(long)]
    desk: bool,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Maze(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn parse_seeds(s: &str) -> CmdResult<Vec<u64>> {
    let bad = || Failure::Config(format!("invalid seed list '{s}'"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<CmdResult<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() || seeds.is_empty() {
        return Err(Failure::Config(format!("seeds must be distinct and nonempty: '{s}'")));
    }
    Ok(seeds)
}

struct Setup {
    base: RunConfig,
    maze: EnvConfig,
    seeds: Vec<u64>,
    root: PathBuf,
    jobs: usize,
}

impl Common {
    fn setup(&self, algo: Option<Algorithm>) -> CmdResult<Setup> {
        let mut base = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(a) = algo {
            base.algorithm = a;
        }
        if self.desk {
            let desk = RunConfig::desk(base.algorithm);
            base.agent.networks = desk.agent.networks;
            base.agent.batch_size = desk.agent.batch_size;
        }
        if let Some(n) = self.steps {
            base.total_steps = n;
        }
        base.validate()?;
        let maze = match &self.maze {
            Some(p) => load_maze(p).map_err(|e| Failure::Config(e.to_string()))?,
            None => EnvConfig::default_maze(),
        };
        let root = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Setup {
            base,
            maze,
            seeds: parse_seeds(&self.seeds)?,
            root,
            jobs: self.jobs.max(1),
        })
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(Error::io(path, e).to_string())
}

/// Run `cfg` once per seed into `dir`, returning the logs in seed order.
fn run_seeds(cfg: &RunConfig, setup: &Setup, dir: &Path, dump_states: bool) -> CmdResult<Vec<RunLog>> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| io_failure(&config_path, e))?;
    let one = |seed: u64| -> CmdResult<RunLog> {
        let cfg = RunConfig { seed, ..cfg.clone() };
        eprintln!("{} seed {seed}: {} steps", cfg.label(), cfg.total_steps);
        let out = run(&cfg, &setup.maze, &RunOptions::default())?;
        out.log.write(dir.join(format!("seed-{seed}.log")))?;
        if let Some(ck) = &out.checkpoint {
            write_checkpoint(&dir.join(format!("seed-{seed}.ckpt")), ck)?;
        }
        if dump_states {
            if let Some(buf) = &out.buffer {
                buf.dump(&dir.join(format!("seed-{seed}.states.csv")))?;
            }
        }
        eprintln!(
            "{} seed {seed}: final coverage {:.4}",
            cfg.label(),
            out.log.final_coverage()
        );
        Ok(out.log)
    };
    let mut logs = Vec::with_capacity(setup.seeds.len());
    for chunk in setup.seeds.chunks(setup.jobs) {
        let results: Vec<CmdResult<RunLog>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || one(seed))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Failure::Run("run thread panicked".into())))
                })
                .collect()
        });
        for r in results {
            logs.push(r?);
        }
    }
    Ok(logs)
}

fn write_aggregate(logs: &[RunLog], dir: &Path, opts: &AggregateOptions, seed: u64) -> CmdResult<()> {
    let agg = aggregate(logs, opts, &mut stream_rng(seed, Stream::Bootstrap))?;
    for w in &agg.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    for (name, text) in [("aggregate.csv", agg.table_text()), ("profile.csv", agg.profile_text())] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_failure(&p, e))?;
    }
    let mut labels: Vec<&str> = logs.iter().map(|l| l.algorithm.as_str()).collect();
    labels.dedup();
    for label in labels {
        if let Some(r) = agg.final_row(label) {
            println!(
                "{label}: t={} iqm={:.4} ci=[{:.4}, {:.4}]",
                r.timestep, r.iqm, r.ci_lo, r.ci_hi
            );
        }
    }
    Ok(())
}

fn collect_logs(dir: &Path, out: &mut Vec<RunLog>) -> CmdResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect_logs(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "log") {
            out.push(RunLog::read(&p)?);
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Run {
            algo,
            dump_states,
            common,
        } => {
            let algo = algo.map(|a| Algorithm::parse(&a)).transpose()?;
            let setup = common.setup(algo)?;
            let dir = setup.root.join(setup.base.label());
            run_seeds(&setup.base, &setup, &dir, dump_states)?;
        }
        Command::Ablate { common } => {
            let setup = common.setup(Some(Algorithm::Lge))?;
            let mut variants = vec![setup.base.clone()];
            for flag in 0..3 {
                let mut v = setup.base.clone();
                match flag {
                    0 => v.lge.no_post_exploration = true,
                    1 => v.lge.uniform_goal_sampling = true,
                    _ => v.lge.no_subgoal_reduction = true,
                }
                variants.push(v);
            }
            let mut logs = Vec::new();
            for v in &variants {
                logs.extend(run_seeds(v, &setup, &setup.root.join(v.label()), false)?);
            }
            write_aggregate(&logs, &setup.root.join("ablation"), &AggregateOptions::default(), 0)?;
        }
        Command::SweepCells { sizes, common } => {
            let setup = common.setup(Some(Algorithm::Goexplore))?;
            let mut logs = Vec::new();
            for size in sizes {
                let mut v = setup.base.clone();
                v.goexplore.cell_size = size;
                v.validate()?;
                logs.extend(run_seeds(&v, &setup, &setup.root.join(v.label()), true)?);
            }
            write_aggregate(&logs, &setup.root.join("cell-sweep"), &AggregateOptions::default(), 0)?;
        }
        Command::Aggregate {
            dir,
            out,
            stride,
            allow_mixed_configs,
            seed,
        } => {
            let mut logs = Vec::new();
            collect_logs(&dir, &mut logs)?;
            if logs.is_empty() {
                return Err(Failure::Run(format!("no run logs under {}", dir.display())));
            }
            let opts = AggregateOptions {
                stride,
                allow_mixed_configs,
                ..AggregateOptions::default()
            };
            write_aggregate(&logs, out.as_deref().unwrap_or(&dir), &opts, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
