//! `dlcaps`: train, evaluate, inspect and benchmark DL-CapsNet models.
//!
//! Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error,
//! 4 checkpoint error.

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dlcaps", version, about = "DL-CapsNet training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Phase-1 then phase-2 training; writes metrics.csv, run_config.txt and checkpoints to run.dir.
    Train(ConfigArgs),
    /// Accuracy of one checkpoint, or of a softmax-averaged ensemble.
    Eval {
        /// Checkpoint file; repeat for an ensemble.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Total and per-layer parameter counts.
    Params(ConfigArgs),
    /// 64-bit finite-difference gradient checks.
    Gradcheck {
        scope: Scope,
        /// Corrupt one backward pass to confirm the suite catches it.
        #[arg(long)]
        inject_fault: Option<Fault>,
    },
    /// Forward latency per batch size and capsule counts entering the final routing.
    Bench {
        /// Comma-separated batch sizes.
        #[arg(long, default_value = "1,32", value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        /// Timed runs per batch size (at least 20).
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[command(flatten)]
        args: ConfigArgs,
    },
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Config file (`key = value` lines); defaults to the cifar10 preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, e.g. `--lr 0 --train.gamma 0.9`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Scope {
    Ops,
    Model,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Fault {
    Squash,
}

/// Moves every `--key value` pair that is not a flag of the subcommand
/// behind a `--`, so flags and overrides can be given in any order.
fn split_overrides(args: Vec<String>) -> Vec<String> {
    let cmd = Cli::command();
    let Some(sub) = args.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return args;
    };
    let known: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .chain([("help".to_string(), false)])
        .collect();
    let mut kept = args[..2].to_vec();
    let mut overrides = Vec::new();
    let mut it = args[2..].iter();
    while let Some(a) = it.next() {
        if a == "--" {
            overrides.extend(it.by_ref().cloned());
            break;
        }
        let name = a.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        match name.and_then(|n| known.iter().find(|(k, _)| k == n)) {
            Some((_, takes_value)) => {
                kept.push(a.clone());
                if *takes_value && !a.contains('=') {
                    kept.extend(it.next().cloned());
                }
            }
            None if name.is_some() => {
                overrides.push(a.clone());
                overrides.extend(it.next().cloned());
            }
            None => kept.push(a.clone()),
        }
    }
    if !overrides.is_empty() {
        kept.push("--".to_string());
        kept.extend(overrides);
    }
    kept
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(split_overrides(std::env::args().collect()));
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval { checkpoints, args } => commands::eval(&checkpoints, &args),
        Command::Params(args) => commands::params(&args),
        Command::Gradcheck { scope, inject_fault } => commands::gradcheck(scope, inject_fault),
        Command::Bench { batch_sizes, runs, warmup, args } => commands::bench(&args, &batch_sizes, runs, warmup),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
