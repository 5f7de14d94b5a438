use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dispnet_core::autodiff::Primitive;
use dispnet_core::gradcheck::Scope;

mod commands;
mod config;
mod exit;

use config::{RunConfig, PRESETS};
use exit::{config_error, io_error, Failure};

/// Worker threads for training and evaluation; defaults to all cores.
const WORKERS_ENV: &str = "DISPNET_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "dispnet", version, about = "Point cloud completion with displacement operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "default", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, the loss curve and a final report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the configured split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Complete one partial scan.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write ASCII instead of binary PLY.
        #[arg(long)]
        ascii: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// primitive, operator, loss, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Break one primitive's derivative, to confirm detection.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&args.preset).expect("clap restricts preset names"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn init_workers() -> Result<(), Failure> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| config_error(format!("{WORKERS_ENV}={value} is not a worker count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(format!("worker pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    init_workers()?;
    match cli.command {
        Command::Train { run, checkpoint, steps } => {
            let mut cfg = run_config(&run)?;
            if let Some(steps) = steps {
                cfg.train.steps = steps;
            }
            commands::train(cfg, checkpoint.as_deref())
        }
        Command::Eval { run, checkpoint, split } => commands::eval(run_config(&run)?, &checkpoint, split),
        Command::Complete {
            checkpoint,
            input,
            output,
            seed,
            ascii,
        } => commands::complete(&checkpoint, &input, &output, seed, ascii),
        Command::Gradcheck {
            scope,
            seed,
            instances,
            inject_fault,
        } => {
            let scopes = if scope == "all" {
                Scope::ALL.to_vec()
            } else {
                vec![scope.parse::<Scope>().map_err(config_error)?]
            };
            let fault = inject_fault
                .map(|name| Primitive::from_name(&name).ok_or_else(|| io_error(format!("unknown primitive '{name}'"))))
                .transpose()?;
            commands::gradcheck(&scopes, seed, instances, fault)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
