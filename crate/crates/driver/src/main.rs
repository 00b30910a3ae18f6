use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moie_core::envs::{evaluate_mean_policy, make_env};
use moie_core::types::seeded_rng;
use moie_driver::artifacts::{train_to_dir, TrainError};
use moie_driver::config::ExperimentConfig;
use moie_driver::experiment::RunOptions;
use moie_driver::plot::{eval_means, learning_curve, render_svg};
use moie_driver::serialize::load_policy;
use moie_driver::trace::export_activation_trace;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "moie", version, about = "Mixture-of-interpretable-experts policy iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with prototypes selected from visited states.
    Train(TrainArgs),
    /// Train with gradient-learned prototypes.
    TrainDiffproto(TrainArgs),
    /// Evaluate a saved policy with mean actions.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the expert activations along one episode as TSV.
    Trace {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "trace.tsv")]
        out: PathBuf,
    },
    /// Plot mean eval return with a 95% band over several metrics logs.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "learning_curve.svg")]
        out: PathBuf,
        #[arg(long, default_value = "mean eval return")]
        title: String,
    },
    /// Print the documented default configuration.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several seeds as independent processes, one directory each.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        diffproto: bool,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Store every visited state in states.bin for provenance checks.
    #[arg(long)]
    archive_states: bool,
}

enum Failure {
    Config(String),
    Numerical(String),
    Other(String),
}

impl Failure {
    fn other(e: impl std::fmt::Display) -> Self {
        Failure::Other(e.to_string())
    }
}

fn load_config(args: &TrainArgs, diffproto: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(env) = &args.env {
        cfg.env.clone_from(env);
    }
    if let Some(k) = args.clusters {
        cfg.clusters = k;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    cfg.diffproto |= diffproto;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn train(args: &TrainArgs, diffproto: bool) -> Result<(), Failure> {
    let cfg = load_config(args, diffproto)?;
    let opts = RunOptions { archive_states: args.archive_states };
    match train_to_dir(&cfg, &args.out_dir, opts) {
        Ok(out) => {
            let last = out.records.last().map_or(f64::NAN, |r| r.eval_mean);
            println!("final mean eval return {last:.2}; artifacts in {}", args.out_dir.display());
            Ok(())
        }
        Err(TrainError::Run(e)) => Err(Failure::Numerical(e.to_string())),
        Err(e) => Err(Failure::other(e)),
    }
}

fn sweep(args: &TrainArgs, seeds: &[u64], jobs: usize, diffproto: bool) -> Result<(), Failure> {
    // validate once up front so every child starts from a usable config
    load_config(args, diffproto)?;
    let exe = std::env::current_exe().map_err(Failure::other)?;
    let mut pending: Vec<u64> = seeds.iter().rev().copied().collect();
    let mut running: Vec<(u64, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs.max(1) {
            let Some(seed) = pending.pop() else { break };
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg(if diffproto { "train-diffproto" } else { "train" });
            cmd.arg("--seed").arg(seed.to_string());
            cmd.arg("--out-dir").arg(args.out_dir.join(format!("seed_{seed}")));
            if let Some(c) = &args.config {
                cmd.arg("--config").arg(c);
            }
            if let Some(e) = &args.env {
                cmd.arg("--env").arg(e);
            }
            if let Some(k) = args.clusters {
                cmd.arg("--clusters").arg(k.to_string());
            }
            if let Some(n) = args.iterations {
                cmd.arg("--iterations").arg(n.to_string());
            }
            if args.archive_states {
                cmd.arg("--archive-states");
            }
            running.push((seed, cmd.spawn().map_err(Failure::other)?));
        }
        let (seed, mut child) = running.remove(0);
        let status = child.wait().map_err(Failure::other)?;
        if !status.success() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Other(format!("seeds {failed:?} failed")))
    }
}

fn eval(policy: &Path, env: &str, episodes: usize, seed: u64) -> Result<(), Failure> {
    let policy = load_policy(policy).map_err(Failure::other)?;
    let mut env = make_env(env).map_err(|e| Failure::Config(e.to_string()))?;
    if env.dim_state() != policy.dim_state() || env.dim_action() != policy.dim_action() {
        return Err(Failure::Config("policy dimensions do not match the environment".into()));
    }
    let mut rng = seeded_rng(seed);
    let returns: Vec<f64> = (0..episodes).map(|_| evaluate_mean_policy(env.as_mut(), &policy, &mut rng)).collect();
    for (i, r) in returns.iter().enumerate() {
        println!("episode {i}\t{r:.4}");
    }
    println!("mean\t{:.4}", returns.iter().sum::<f64>() / returns.len().max(1) as f64);
    Ok(())
}

fn plot(metrics: &[PathBuf], out: &Path, title: &str) -> Result<(), Failure> {
    let logs = metrics
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))?;
            eval_means(&text).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let curve = learning_curve(&logs).map_err(Failure::other)?;
    std::fs::write(out, render_svg(&curve, title)).map_err(Failure::other)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => train(&args, false),
        Command::TrainDiffproto(args) => train(&args, true),
        Command::Eval { policy, env, episodes, seed } => eval(&policy, &env, episodes, seed),
        Command::Trace { policy, env, seed, out } => {
            let policy = load_policy(&policy).map_err(Failure::other)?;
            let mut env = make_env(&env).map_err(|e| Failure::Config(e.to_string()))?;
            export_activation_trace(&policy, env.as_mut(), seed, &out).map_err(Failure::other)
        }
        Command::Plot { metrics, out, title } => plot(&metrics, &out, &title),
        Command::InitConfig { out } => {
            let text = ExperimentConfig::default().documented();
            match out {
                Some(path) => std::fs::write(path, text).map_err(Failure::other),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Sweep { train, seeds, jobs, diffproto } => sweep(&train, &seeds, jobs, diffproto),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical abort: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
