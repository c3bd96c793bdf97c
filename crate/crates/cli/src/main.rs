use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pggm_cli::commands;
use pggm_cli::config::{Estimator, RunConfig};
use pggm_cli::error::CliError;

#[derive(Parser)]
#[command(name = "pggm", version, about = "Partial Gaussian graphical models: simulate, fit, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truths and train/validation/test samples.
    Simulate(Common),
    /// Fit estimators on simulated replications or a CSV data source.
    Fit(Common),
    /// Score stored fits against the truth and on test data.
    Evaluate(Common),
    /// Simulate, fit the compared estimators, evaluate, and tabulate.
    Benchmark(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory to read replications from; defaults to the output directory.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Feature count to simulate; repeatable.
    #[arg(long = "q")]
    qs: Vec<usize>,
    /// Estimator to fit or evaluate; repeatable.
    #[arg(long = "estimator")]
    estimators: Vec<String>,
    /// `element` or `column`.
    #[arg(long)]
    penalty: Option<String>,
    /// Link threshold for the exported link lists.
    #[arg(long)]
    mu: Option<f64>,
    /// Top-k link precision against `evaluate.categories`.
    #[arg(long)]
    topk: Option<usize>,
    /// Category file for top-k precision.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Override any configuration key, e.g. `fit.solver.max_inner=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn quoted(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(v) = &self.out {
            put("out", quoted(&v.to_string_lossy()));
        }
        if let Some(v) = self.reps {
            put("reps", v.to_string());
        }
        if let Some(v) = self.seed {
            put("seed", v.to_string());
        }
        if let Some(v) = self.workers {
            put("workers", v.to_string());
        }
        if !self.qs.is_empty() {
            let list: Vec<String> = self.qs.iter().map(|q| q.to_string()).collect();
            put("simulate.qs", format!("[{}]", list.join(", ")));
        }
        if !self.estimators.is_empty() {
            let mut list = Vec::new();
            for e in self.estimators.iter().flat_map(|e| e.split(',')) {
                list.push(quoted(Estimator::parse(e.trim())?.name()));
            }
            put("fit.estimators", format!("[{}]", list.join(", ")));
        }
        if let Some(v) = &self.penalty {
            put("fit.penalty", quoted(v));
        }
        if let Some(v) = self.mu {
            put("evaluate.mu", format!("{v:?}"));
        }
        if let Some(v) = self.topk {
            put("evaluate.topk", v.to_string());
        }
        if let Some(v) = &self.categories {
            put("evaluate.categories", quoted(&v.to_string_lossy()));
        }
        for s in &self.sets {
            let (k, v) =
                s.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            put(k.trim(), v.trim().to_string());
        }
        Ok(o)
    }

    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::cmd_simulate(&c.load()?),
        Command::Fit(c) => commands::cmd_fit(&c.load()?, c.input.as_deref()),
        Command::Evaluate(c) => commands::cmd_evaluate(&c.load()?, c.input.as_deref()),
        Command::Benchmark(c) => commands::cmd_benchmark(&c.load()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pggm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
