use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ftrain::pipeline::build_1f1b_schedule;
use ftrain::planner::{brute_force_group_oracle, group_machines, Profile, ORACLE_MAX_N};
use ftrain::scenario::{run_scenario, RunConfig};
use ftrain::simtime::{compare, sweep, sweep_csv, FailureDistribution, FailureProcess, SimStrategy, SweepAxis, Workload};
use ftrain::Error;

#[derive(Parser)]
#[command(name = "ftrain", version, about = "Fault-tolerant pipeline training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a run config, recovering from every scripted failure.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group machines for selective logging from a profile file.
    Plan {
        profile: PathBuf,
        /// Also solve exhaustively and report the gap (N <= 12).
        #[arg(long)]
        oracle: bool,
    },
    /// Simulate end-to-end training time under random failures.
    Simulate {
        workload: PathBuf,
        #[arg(long, default_value_t = 17.0)]
        mtbf: f64,
        #[arg(long, default_value_t = 2023)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        reps: u64,
        #[arg(long, value_enum, default_value_t = Dist::Uniform)]
        distribution: Dist,
        /// Sweep one axis instead of comparing; prints CSV.
        #[arg(long, value_enum, requires = "values")]
        sweep: Option<Axis>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Strategy for the sweep.
        #[arg(long, value_enum, default_value_t = Strat::GlobalCkpt)]
        strategy: Strat,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the 1F1B grid for `p` stages and `m` micro-batches.
    ScheduleDump { p: usize, m: usize },
    /// Run configs against their ghost runs and report equivalence.
    Verify {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Uniform,
    Exponential,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    CheckpointInterval,
    Mtbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strat {
    GlobalCkpt,
    CheckFreq,
    Elastic,
    UndoReplication,
    LogReplay,
    ParallelLogReplay,
}

impl From<Strat> for SimStrategy {
    fn from(s: Strat) -> Self {
        match s {
            Strat::GlobalCkpt => SimStrategy::GlobalCkpt,
            Strat::CheckFreq => SimStrategy::CheckFreqLike,
            Strat::Elastic => SimStrategy::ElasticHorovodLike,
            Strat::UndoReplication => SimStrategy::UndoReplication,
            Strat::LogReplay => SimStrategy::LogReplay,
            Strat::ParallelLogReplay => SimStrategy::ParallelLogReplay,
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_UNRECOVERABLE: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::InvalidHyper(_) | Error::InvalidShape(_)) => EXIT_CONFIG,
        Some(Error::Storage { .. }) | None => 1,
        Some(_) => EXIT_UNRECOVERABLE,
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg, &config);
            let rep = run_scenario(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            eprintln!("outputs in {}", dir.display());
        }
        Cmd::Plan { profile, oracle } => {
            let p = read_profile(&profile)?;
            let plan = group_machines(&p)?;
            let mut v = serde_json::to_value(&plan)?;
            if oracle {
                if p.n > ORACLE_MAX_N {
                    return Err(Error::InvalidConfig(format!("oracle limited to N <= {ORACLE_MAX_N}")).into());
                }
                let best = brute_force_group_oracle(&p)?;
                v["oracle"] = serde_json::to_value(&best)?;
                v["oracle_gap"] = (plan.est_recovery_time - best.est_recovery_time).into();
            }
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Cmd::Simulate {
            workload,
            mtbf,
            seed,
            reps,
            distribution,
            sweep: axis,
            values,
            strategy,
            csv,
        } => {
            let w = Workload::load(&workload)?;
            let process = FailureProcess {
                mtbf_hours: mtbf,
                seed,
                distribution: match distribution {
                    Dist::Uniform => FailureDistribution::Uniform,
                    Dist::Exponential => FailureDistribution::Exponential,
                },
            };
            match axis {
                None => println!("{}", serde_json::to_string_pretty(&compare(&w, &process, reps)?)?),
                Some(a) => {
                    let axis = match a {
                        Axis::CheckpointInterval => SweepAxis::CheckpointInterval,
                        Axis::Mtbf => SweepAxis::Mtbf,
                    };
                    let strategy = strategy.into();
                    let points = sweep(&w, strategy, axis, &values, &process, reps)?;
                    let text = sweep_csv(axis, strategy, &points);
                    match csv {
                        Some(path) => fs::write(&path, text).with_context(|| path.display().to_string())?,
                        None => print!("{text}"),
                    }
                }
            }
        }
        Cmd::ScheduleDump { p, m } => print!("{}", build_1f1b_schedule(p, m)?.render()),
        Cmd::Verify { configs, out } => {
            let root = out.unwrap_or_else(|| PathBuf::from("runs/verify"));
            let mut failed = 0;
            for path in &configs {
                let mut cfg = RunConfig::load(path)?;
                cfg.compare_ghost = true;
                let name = stem(path);
                let rep = run_scenario(&cfg, &root.join(&name))?;
                let g = rep.ghost.expect("ghost requested");
                let ok = g.within_tolerance;
                failed += usize::from(!ok);
                println!(
                    "{} {name}: recoveries={} bit_exact={} max_rel_diff={:e}",
                    if ok { "PASS" } else { "FAIL" },
                    rep.recoveries.len(),
                    g.digest_equal,
                    g.max_rel_diff
                );
            }
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_profile(path: &Path) -> anyhow::Result<Profile> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())).into())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig, config: &Path) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        let name = if cfg.name.is_empty() { stem(config) } else { cfg.name.clone() };
        PathBuf::from("runs").join(name)
    })
}
