//! `stabletrain`: generate corpora, distort them, train, evaluate and run
//! grid searches from a JSON run config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{load_config, Overrides, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(name = "stabletrain", version, about = "Stability-training experiments on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    Datagen {
        #[command(flatten)]
        run: RunArgs,
        /// Target directory (defaults to <output_dir>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one distortion to every image of a corpus directory.
    Distort {
        #[arg(long)]
        input: PathBuf,
        /// Tag such as jpeg-50, crop-2, thumb-100 or gaussian-0.05.
        #[arg(long)]
        distortion: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes params, history and a summary.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a params file on clean and distorted copies of the eval corpus.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        params: PathBuf,
    },
    /// Shared pretraining, then fine-tune and score every grid cell.
    Gridsearch {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Flat flags; each overrides the matching config key.
#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Replaces the metric list; repeatable.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// Replaces the distortion list; repeatable.
    #[arg(long = "distortion")]
    distortions: Vec<String>,
    /// Any config key, e.g. `--set optimizer.momentum=0.8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut o = Overrides::default();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.set(k, v);
            }
        };
        put("task", self.task.as_ref().map(|v| json!(v)));
        put("mode", self.mode.as_ref().map(|v| json!(v)));
        put("seed", self.seed.map(|v| json!(v)));
        put("output_dir", self.output_dir.as_ref().map(|v| json!(v)));
        put("stability.alpha", self.alpha.map(|v| json!(v)));
        put("stability.sigma", self.sigma.map(|v| json!(v)));
        put("optimizer.learning_rate", self.learning_rate.map(|v| json!(v)));
        put("optimizer.pretrain_steps", self.pretrain_steps.map(|v| json!(v)));
        put("optimizer.finetune_steps", self.finetune_steps.map(|v| json!(v)));
        put("optimizer.batch_size", self.batch_size.map(|v| json!(v)));
        if !self.metrics.is_empty() {
            o.set("eval.metrics", json!(self.metrics));
        }
        if !self.distortions.is_empty() {
            o.set("distortions", json!(self.distortions));
        }
        for s in &self.sets {
            o.parse_assignment(s)?;
        }
        load_config(self.config.as_deref(), &o)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Datagen { run, out } => commands::datagen(&run.resolve()?, out.as_deref()).map(|_| ()),
        Command::Distort { input, distortion, output, seed } => commands::distort(&input, &distortion, &output, seed),
        Command::Train { run } => commands::train(&run.resolve()?).map(|_| ()),
        Command::Eval { run, params } => commands::eval(&run.resolve()?, &params).map(|_| ()),
        Command::Gridsearch { run } => commands::gridsearch(&run.resolve()?).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
