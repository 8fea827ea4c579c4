use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tinygroups::sim::{check, emit_report, run_experiment, sized_params, Experiment, SeedRange, SimConfig};
use tinygroups::Error;

#[derive(Parser)]
#[command(name = "tinygroups", version, about = "Simulate overlays of O(log log n)-size groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over a seed range and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// e1..e5; overrides the config file.
        #[arg(long)]
        experiment: Option<String>,
        /// Half-open range such as 0..50; overrides the config file.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the acceptance checks and exit with 3 if any fails.
        #[arg(long)]
        check: bool,
    },
    /// Print sized d1, tau and gossip phase boundaries.
    Params {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        /// Epoch length; defaults to 4n.
        #[arg(long = "T")]
        t_steps: Option<u64>,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Config(String),
    Check,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(m)) => Failure::Config(m.clone()),
            Some(Error::Infeasible(m)) => Failure::Config(m.clone()),
            _ => Failure::Other(e),
        }
    }
}

fn config_error(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn run(config: PathBuf, experiment: Option<String>, seeds: Option<String>, out: Option<PathBuf>, do_check: bool) -> Result<(), Failure> {
    let mut cfg = SimConfig::load(&config).map_err(config_error)?;
    if let Some(e) = experiment {
        cfg.experiment = Some(e.parse::<Experiment>().map_err(config_error)?);
    }
    if let Some(s) = seeds {
        cfg.seeds = Some(s.parse::<SeedRange>().map_err(config_error)?);
    }
    if out.is_some() {
        cfg.out = out;
    }
    let experiment = cfg.experiment.ok_or_else(|| Failure::Config("no experiment given".into()))?;
    let seeds = cfg.seeds.ok_or_else(|| Failure::Config("no seed range given".into()))?.seeds();
    cfg.validate().map_err(config_error)?;
    let results = run_experiment(&cfg, experiment, &seeds).context("experiment failed")?;
    if let Some(dir) = &cfg.out {
        let paths = emit_report(&results, dir).with_context(|| format!("writing reports to {}", dir.display()))?;
        println!("wrote {}", paths.jsonl.display());
        println!("wrote {}", paths.csv.display());
        println!("wrote {}", paths.summary.display());
        println!("wrote {}", paths.digest.display());
    }
    if do_check {
        let lines = check(&cfg, experiment, &results).context("acceptance check failed to run")?;
        for l in &lines {
            println!("{l}");
        }
        if lines.iter().any(|l| !l.passed) {
            return Err(Failure::Check);
        }
    }
    Ok(())
}

fn params(beta: f64, n: usize, k: f64, delta: f64, t_steps: Option<u64>, json: bool) -> Result<(), Failure> {
    let p = sized_params(beta, n, k, delta, t_steps, 0).map_err(|e| match e {
        Error::Infeasible(m) | Error::Config(m) | Error::InvalidParameter(m) => Failure::Config(m),
        other => Failure::Config(other.to_string()),
    })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&p).map_err(|e| Failure::Other(e.into()))?);
    } else {
        println!("n = {}, beta = {}, k = {}, delta = {}", p.n, p.beta, p.k, p.delta);
        println!("d1 = {:.4} (group size {}, bad-group probability {:.3e})", p.d1, p.group_size, p.bad_group_probability);
        println!("tau = {:.6e} for T = {}", p.tau, p.t_steps);
        println!("d' = {:.4}", p.d_prime);
        println!("phase 1: steps 1..={}", p.phase1_end);
        println!("phase 2: steps {}..={}", p.phase1_end + 1, p.phase2_end);
        println!("phase 3: steps {}..={}", p.phase2_end + 1, p.phase3_end);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            experiment,
            seeds,
            out,
            check,
        } => run(config, experiment, seeds, out, check),
        Command::Params {
            beta,
            n,
            k,
            delta,
            t_steps,
            json,
        } => params(beta, n, k, delta, t_steps, json),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => {
            eprintln!("acceptance check failed");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
