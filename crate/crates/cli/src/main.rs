mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "darer", version, about = "Train, evaluate and inspect dual-task dialog reasoning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every command that builds or checks a model.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// flat TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// KEY=VALUE overrides, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
    pub set: Vec<String>,
    /// seed for initialization, shuffling and dropout
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct OutArgs {
    /// output directory [default: $DARER_OUT, else ./runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and metrics
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// shorthand for --set epochs=N
        #[arg(long)]
        epochs: Option<usize>,
        /// overwrite an existing checkpoint
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one corpus split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// report every reasoning step, t = 0..=T
        #[arg(long)]
        per_step: bool,
        /// label left out of metric averages, as LABEL or TASK:LABEL
        #[arg(long = "ignore-label", value_name = "LABEL")]
        ignore_label: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train one model per step count and tabulate dev F1
    SweepT {
        /// comma-separated step counts, in output order
        #[arg(long = "t-values", value_delimiter = ',', required = true)]
        t_values: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dump the reasoning-graph attention of one dialog at one step
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dialog: String,
        /// reasoning step, 1..=T
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare analytic gradients against central differences
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write a synthetic corpus with planted cross-task rules
    GenSynth {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        /// rules to switch off: r1 (disagreement flips), r2 (agreement copies), r3 (question-answer)
        #[arg(long = "disable-rule", value_delimiter = ',')]
        disable_rule: Vec<String>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { cfg, out, epochs, force } => commands::train(&cfg, &out, epochs, force),
        Command::Eval {
            checkpoint,
            split,
            per_step,
            ignore_label,
            cfg,
            out,
        } => commands::eval(&checkpoint, &split, per_step, &ignore_label, &cfg, &out),
        Command::SweepT { t_values, cfg, out, epochs } => commands::sweep_t(&t_values, &cfg, &out, epochs),
        Command::Inspect {
            checkpoint,
            dialog,
            step,
            cfg,
            out,
        } => commands::inspect(&checkpoint, &dialog, step, &cfg, &out),
        Command::Gradcheck { seeds, h, tol, out } => commands::gradcheck(seeds, h, tol, &out),
        Command::GenSynth {
            out,
            seed,
            train,
            dev,
            test,
            disable_rule,
        } => commands::gen_synth(&out, seed, train, dev, test, &disable_rule),
    }
}
