use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use medkd::commands::{self, exit_code, EvalTask, Env, Outcome};
use medkd::config::RunConfig;
use medkd::Result;

#[derive(Debug, Parser)]
#[command(name = "medkd", version, about = "Desk-scale distillation, gating and evaluation experiments")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel steps.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Fail on malformed input lines instead of skipping them.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare attention diagnostics under the gapped and uniform layouts.
    RopeDemo,
    /// Train the toy student and write the per-step trace.
    KdTrain,
    /// Train once per alpha and tabulate final metrics.
    KdSweep {
        /// Comma-separated values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        alpha: Vec<f64>,
    },
    /// Gate line-delimited samples and correct the failing ones.
    GateEval {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Pick the best candidate from a pool file.
    SasgSelect {
        #[arg(long)]
        pool: PathBuf,
    },
    /// Score predictions against labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
    },
}

fn env(cli: &Cli) -> Result<Env> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let mut env = Env::new(config);
    env.strict = cli.strict;
    Ok(env)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let env = env(cli)?;
    match &cli.command {
        Command::RopeDemo => commands::rope_demo(&env),
        Command::KdTrain => commands::kd_train(&env),
        Command::KdSweep { alpha } => commands::kd_sweep(&env, alpha),
        Command::GateEval { samples } => commands::gate_eval(&env, samples),
        Command::SasgSelect { pool } => commands::sasg_select(&env, pool),
        Command::Evaluate { pred, gt, task } => commands::evaluate(&env, pred, gt, *task),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(usize::from(cli.jobs)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(outcome) => {
            if let Some(text) = &outcome.stdout {
                println!("{text}");
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            if outcome.failures > 0 {
                eprintln!("error: {} item(s) failed; see the output records", outcome.failures);
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
